#pragma once

// Self-distillation machinery: MLP projector with weight-normalized output,
// temperature softmax with teacher centering/sharpening, EMA teacher state,
// and the two feature self-reinforcement losses.

#include "fsr/aggregation.hpp"
#include "fsr/common.hpp"
#include "fsr/encoder.hpp"
#include "fsr/tensor.hpp"

namespace fsr {

struct ProjectorConfig {
  int in_dim = 64;
  int hidden = 256;
  int bottleneck = 64;
  int out_dim = 256;  // K
};

struct ProjectorParams {
  ProjectorConfig cfg;
  MatrixXd l1, b1;      // hidden×D, 1×hidden
  MatrixXd l2, b2;      // hidden×hidden
  MatrixXd l3, b3;      // bottleneck×hidden
  MatrixXd wn_v;        // K×bottleneck, direction of the weight-normed layer
  MatrixXd wn_g;        // K×1, learnable scale

  static ProjectorParams init(const ProjectorConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct ProjectorVars {
  Var l1, b1, l2, b2, l3, b3, wn_v, wn_g;
};

ProjectorVars leaf_projector(Tape& tape, ProjectorParams& params, bool requires_grad = true);

// Raw projector logits for a (rows)×D token matrix: 3-layer MLP (GELU after
// the first two layers), L2-normalized bottleneck, weight-normalized linear.
Var projector_logits_t(Tape& tape, Var tokens, const ProjectorVars& vars);
MatrixXd projector_logits(const MatrixXd& tokens, const ProjectorParams& params);

// Row 0 is the class-token distribution, remaining rows the patch tokens.
struct Distribution {
  MatrixXd probs;  // (1+N)×K, rows sum to 1
};

// probs = softmax((logits - center)/tau) per row; center only on the teacher
// path (pass nullptr for the student). Rejects tau <= 0.
Var project_and_normalize_t(Tape& tape, Var tokens, const ProjectorVars& vars, double tau,
                            const VectorXd* center);
Distribution project_and_normalize(const MatrixXd& tokens, const ProjectorParams& params,
                                   double tau, const VectorXd* center);

// center <- m_c*center + (1-m_c)*mean over batch rows of teacher logits
VectorXd update_center(const VectorXd& center, const MatrixXd& teacher_logits_batch,
                       double center_momentum);

// theta_t <- m*theta_t + (1-m)*theta_s elementwise, matched by visit order.
template <typename Component>
void ema_update(Component& teacher, Component& student, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("ema_update: momentum in [0,1]");
  std::vector<MatrixXd*> tp, sp;
  teacher.visit("", [&](const std::string&, MatrixXd& m) { tp.push_back(&m); });
  student.visit("", [&](const std::string&, MatrixXd& m) { sp.push_back(&m); });
  if (tp.size() != sp.size()) throw NumericError("ema_update: parameter structure mismatch");
  for (size_t i = 0; i < tp.size(); ++i)
    *tp[i] = momentum * *tp[i] + (1.0 - momentum) * *sp[i];
}

// L_u: masked-patch cross-entropy against the same-view teacher distribution.
// Teacher rows are constants; the class row is excluded.
Var loss_uncertain_t(Tape& tape, Var student_probs, const MatrixXd& teacher_probs,
                     const MaskPair& mask);
double loss_uncertain(const Distribution& student, const Distribution& teacher,
                      const MaskPair& mask);

// L_c: class-token cross-entropy, teacher view-1 class row vs student class row.
Var loss_certain_t(Tape& tape, Var student_probs, const MatrixXd& teacher_probs_view1);
double loss_certain(const Distribution& teacher_view1, const Distribution& student);

// EMA snapshot of the student plus the centering state.
struct TeacherState {
  EncoderParams encoder;
  AggregationParams aggregation;
  ProjectorParams projector;
  VectorXd center;  // K

  static TeacherState from_student(const EncoderParams& enc, const AggregationParams& agg,
                                   const ProjectorParams& proj);
};

}  // namespace fsr
