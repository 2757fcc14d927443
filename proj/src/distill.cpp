#include "fsr/distill.hpp"

namespace fsr {

ProjectorParams ProjectorParams::init(const ProjectorConfig& cfg, Rng& rng) {
  ProjectorParams p;
  p.cfg = cfg;
  const double std = 0.02;
  p.l1 = trunc_normal_matrix(rng, cfg.hidden, cfg.in_dim, std);
  p.b1 = MatrixXd::Zero(1, cfg.hidden);
  p.l2 = trunc_normal_matrix(rng, cfg.hidden, cfg.hidden, std);
  p.b2 = MatrixXd::Zero(1, cfg.hidden);
  p.l3 = trunc_normal_matrix(rng, cfg.bottleneck, cfg.hidden, std);
  p.b3 = MatrixXd::Zero(1, cfg.bottleneck);
  p.wn_v = trunc_normal_matrix(rng, cfg.out_dim, cfg.bottleneck, std);
  p.wn_g = MatrixXd::Ones(cfg.out_dim, 1);
  return p;
}

void ProjectorParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + "l1", l1);
  fn(prefix + "b1", b1);
  fn(prefix + "l2", l2);
  fn(prefix + "b2", b2);
  fn(prefix + "l3", l3);
  fn(prefix + "b3", b3);
  fn(prefix + "wn_v", wn_v);
  fn(prefix + "wn_g", wn_g);
}

ProjectorVars leaf_projector(Tape& tape, ProjectorParams& params, bool requires_grad) {
  ProjectorVars v;
  v.l1 = tape.leaf(params.l1, requires_grad);
  v.b1 = tape.leaf(params.b1, requires_grad);
  v.l2 = tape.leaf(params.l2, requires_grad);
  v.b2 = tape.leaf(params.b2, requires_grad);
  v.l3 = tape.leaf(params.l3, requires_grad);
  v.b3 = tape.leaf(params.b3, requires_grad);
  v.wn_v = tape.leaf(params.wn_v, requires_grad);
  v.wn_g = tape.leaf(params.wn_g, requires_grad);
  return v;
}

Var projector_logits_t(Tape& tape, Var tokens, const ProjectorVars& vars) {
  Var h = tape.gelu(tape.linear(tokens, vars.l1, vars.b1));
  h = tape.gelu(tape.linear(h, vars.l2, vars.b2));
  Var bottleneck = tape.linear(h, vars.l3, vars.b3);

  // L2-normalize bottleneck rows, then apply the weight-normalized layer:
  // W_eff = diag(g / ||v_row||) * V, no bias.
  const Eigen::Index rows = tape.val(bottleneck).rows();
  Var norms = tape.rows_l2norm(bottleneck);
  Var inv = tape.cdiv(tape.constant(MatrixXd::Ones(rows, 1)), norms);
  Var unit = tape.scale_rows(bottleneck, inv);

  Var vnorms = tape.rows_l2norm(vars.wn_v);
  Var wscale = tape.cdiv(vars.wn_g, vnorms);
  Var weff = tape.scale_rows(vars.wn_v, wscale);
  return tape.matmul_nt(unit, weff);
}

MatrixXd projector_logits(const MatrixXd& tokens, const ProjectorParams& params) {
  Tape tape(false);
  ProjectorVars vars = leaf_projector(tape, const_cast<ProjectorParams&>(params), false);
  Var t = tape.leaf(tokens, false);
  return tape.val(projector_logits_t(tape, t, vars));
}

Var project_and_normalize_t(Tape& tape, Var tokens, const ProjectorVars& vars, double tau,
                            const VectorXd* center) {
  if (!(tau > 0.0)) throw ConfigError("project_and_normalize: temperature must be positive");
  Var logits = projector_logits_t(tape, tokens, vars);
  if (center) {
    if (center->size() != tape.val(logits).cols())
      throw NumericError("project_and_normalize: center length mismatch");
    MatrixXd c = center->transpose().replicate(tape.val(logits).rows(), 1);
    logits = tape.sub(logits, tape.constant(c));
  }
  return tape.softmax_rows(tape.scale(logits, 1.0 / tau));
}

Distribution project_and_normalize(const MatrixXd& tokens, const ProjectorParams& params,
                                   double tau, const VectorXd* center) {
  Tape tape(false);
  ProjectorVars vars = leaf_projector(tape, const_cast<ProjectorParams&>(params), false);
  Var t = tape.leaf(tokens, false);
  return Distribution{tape.val(project_and_normalize_t(tape, t, vars, tau, center))};
}

VectorXd update_center(const VectorXd& center, const MatrixXd& teacher_logits_batch,
                       double center_momentum) {
  if (!(center_momentum >= 0.0 && center_momentum <= 1.0))
    throw ConfigError("update_center: momentum in [0,1]");
  if (teacher_logits_batch.rows() == 0) return center;
  if (teacher_logits_batch.cols() != center.size())
    throw NumericError("update_center: logit width mismatch");
  VectorXd mean = teacher_logits_batch.colwise().mean().transpose();
  return center_momentum * center + (1.0 - center_momentum) * mean;
}

Var loss_uncertain_t(Tape& tape, Var student_probs, const MatrixXd& teacher_probs,
                     const MaskPair& mask) {
  const Eigen::Index rows = tape.val(student_probs).rows();
  if (teacher_probs.rows() != rows || teacher_probs.cols() != tape.val(student_probs).cols())
    throw NumericError("loss_uncertain: distribution shapes disagree");
  if (static_cast<Eigen::Index>(mask.binary.size()) != rows - 1)
    throw NumericError("loss_uncertain: mask length must equal patch count");
  VectorXd w = VectorXd::Zero(rows);
  for (Eigen::Index i = 1; i < rows; ++i)
    w(i) = mask.binary[static_cast<size_t>(i - 1)] ? 1.0 : 0.0;
  return tape.ce_soft_rows(student_probs, teacher_probs, w);
}

double loss_uncertain(const Distribution& student, const Distribution& teacher,
                      const MaskPair& mask) {
  Tape tape(false);
  Var sp = tape.constant(student.probs);
  return tape.val(loss_uncertain_t(tape, sp, teacher.probs, mask))(0, 0);
}

Var loss_certain_t(Tape& tape, Var student_probs, const MatrixXd& teacher_probs_view1) {
  const Eigen::Index rows = tape.val(student_probs).rows();
  if (teacher_probs_view1.cols() != tape.val(student_probs).cols())
    throw NumericError("loss_certain: distribution widths disagree");
  VectorXd w = VectorXd::Zero(rows);
  w(0) = 1.0;
  MatrixXd target = MatrixXd::Zero(rows, teacher_probs_view1.cols());
  target.row(0) = teacher_probs_view1.row(0);
  return tape.ce_soft_rows(student_probs, target, w);
}

double loss_certain(const Distribution& teacher_view1, const Distribution& student) {
  Tape tape(false);
  Var sp = tape.constant(student.probs);
  return tape.val(loss_certain_t(tape, sp, teacher_view1.probs))(0, 0);
}

TeacherState TeacherState::from_student(const EncoderParams& enc, const AggregationParams& agg,
                                        const ProjectorParams& proj) {
  TeacherState t;
  t.encoder = enc;
  t.aggregation = agg;
  t.projector = proj;
  t.center = VectorXd::Zero(proj.cfg.out_dim);
  return t;
}

}  // namespace fsr
