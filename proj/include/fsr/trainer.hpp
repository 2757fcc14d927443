#pragma once

// End-to-end training: schedules, per-step graph construction over both
// student views, teacher maintenance, AdamW, and deterministic batching.

#include "fsr/cam.hpp"
#include "fsr/common.hpp"
#include "fsr/decoder_losses.hpp"
#include "fsr/distill.hpp"
#include "fsr/encoder.hpp"
#include "fsr/masking.hpp"
#include "fsr/synthdata.hpp"

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fsr {

enum class MaskingStrategy { kUncertain, kRandom, kNone };
enum class AggregationKind { kMca, kGap, kGmp };
enum class LrScheduleKind { kCosine, kPolynomial };

struct TrainConfig {
  int iterations = 3000;
  int batch_size = 8;
  double base_lr = 6e-5;
  int warmup_iters = 300;
  LrScheduleKind lr_schedule = LrScheduleKind::kCosine;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  std::array<double, 5> lambdas{1.0, 0.2, 0.1, 0.1, 0.1};
  bool lambda45_cosine_decay = false;
  double mask_ratio = 0.4;
  double beta_low = 0.2;
  double beta_high = 0.7;
  double tau_student = 0.1;
  double tau_teacher = 0.04;
  double center_momentum = 0.9;
  double proj_momentum = 0.996;  // rises to 1.0 on a cosine schedule
  double enc_momentum = 0.0;
  MaskingStrategy masking = MaskingStrategy::kUncertain;
  AggregationKind aggregation = AggregationKind::kMca;
  int max_affinity_pairs = 512;

  int num_classes = 3;
  EncoderConfig encoder;
  int agg_blocks = 2;
  int agg_ff_dim = 128;
  int proj_hidden = 256;
  int proj_bottleneck = 64;
  int proj_dim = 256;  // K
  int decoder_channels = 64;

  uint64_t seed = 0;
  int threads = 1;  // 1 = strict single-threaded mode

  AggregationConfig aggregation_config() const {
    return AggregationConfig{encoder.dim, agg_blocks, agg_ff_dim};
  }
  ProjectorConfig projector_config() const {
    return ProjectorConfig{encoder.dim, proj_hidden, proj_bottleneck, proj_dim};
  }
  DecoderConfig decoder_config() const {
    return DecoderConfig{encoder.dim, decoder_channels, num_classes, 2};
  }
  void validate() const;
};

double lr_schedule(int64_t t, const TrainConfig& cfg);
double momentum_schedule(int64_t t, const TrainConfig& cfg);
// Cosine decay factor for lambda4/lambda5 when lambda45_cosine_decay is set.
double lambda45_factor(int64_t t, const TrainConfig& cfg);

struct StudentParams {
  EncoderParams encoder;
  ClassifierParams classifier;
  DecoderParams decoder;
  AggregationParams aggregation;
  ProjectorParams projector;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct AdamMoments {
  MatrixXd m, v;
  int64_t t = 0;
};

struct TrainerState {
  TrainConfig cfg;
  StudentParams student;
  TeacherState teacher;
  std::map<std::string, AdamMoments> opt;
  int64_t iter = 0;

  static TrainerState init(const TrainConfig& cfg);
};

// Frozen per-sample quantities the loss graph treats as constants: pseudo
// labels, the mask, affinity pairs, and the no-gradient teacher outputs.
struct StepArtifacts {
  PseudoLabel pseudo;
  MaskPair mask;                   // k = 0 when masking/distillation is off
  std::vector<int> masked_indices; // ascending
  std::vector<AffinityPair> pairs;
  MatrixXd teacher_p1_cls;         // 1×K: class row of teacher view-1 distribution
  MatrixXd teacher_p2_masked;      // k×K: teacher view-2 patch rows at masked_indices
  MatrixXd teacher_center_logits;  // rows feeding the center update
};

struct FixedStepInputs {
  int64_t iter = 0;
  std::vector<synthdata::ViewPair> views;
  std::vector<StepArtifacts> artifacts;
};

// Batch assembly + artifact computation for state.iter (pure function of the
// config, seed and iteration; does not advance state).
FixedStepInputs prepare_step_inputs(const TrainerState& state,
                                    const std::vector<synthdata::LabeledImage>& train_set);

// Total loss over the fixed inputs, forward only. Used by the trainer and by
// finite-difference checks.
LossBreakdown eval_total_loss(StudentParams& student, const TrainConfig& cfg,
                              const FixedStepInputs& inputs);

// Same graph with gradients; per-parameter batch-averaged gradients are
// accumulated into grads (visit names as keys).
LossBreakdown accumulate_gradients(StudentParams& student, const TrainConfig& cfg,
                                   const FixedStepInputs& inputs,
                                   std::map<std::string, MatrixXd>& grads);

struct StepLog {
  int64_t iter = 0;
  double lr = 0.0;
  double m_proj = 0.0;
  LossBreakdown losses;
};

StepLog train_step(TrainerState& state, const std::vector<synthdata::LabeledImage>& train_set);

using StepCallback = std::function<void(const StepLog&)>;
void train_loop(TrainerState& state, const std::vector<synthdata::LabeledImage>& train_set,
                int steps, const StepCallback& on_step);

}  // namespace fsr
