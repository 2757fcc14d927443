#pragma once

// Lightweight convolutional segmentation decoder and the supervised losses:
// multi-label classification, pixel-wise segmentation with an ignore index,
// pairwise cosine affinity, and the weighted total objective.

#include "fsr/cam.hpp"
#include "fsr/common.hpp"
#include "fsr/tensor.hpp"

#include <array>
#include <vector>

namespace fsr {

struct DecoderConfig {
  int in_dim = 64;
  int channels = 64;
  int num_classes = 3;  // foreground classes; output adds background channel 0
  int dilation = 2;
};

struct DecoderParams {
  DecoderConfig cfg;
  MatrixXd conv1_w, conv1_b;  // C1×(D*9), 1×C1
  MatrixXd conv2_w, conv2_b;  // C1×(C1*9)
  MatrixXd cls_w, cls_b;      // (C+1)×C1, 1×(C+1)

  static DecoderParams init(const DecoderConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct DecoderVars {
  Var conv1_w, conv1_b, conv2_w, conv2_b, cls_w, cls_b;
};

DecoderVars leaf_decoder(Tape& tape, DecoderParams& params, bool requires_grad = true);

// tokens: (H*W)×D on the token grid; output (H*W)×(C+1) segmentation logits.
Var decode_segmentation_t(Tape& tape, Var tokens, const DecoderVars& vars,
                          const DecoderConfig& cfg, int grid_h, int grid_w);
MatrixXd decode_segmentation(const MatrixXd& tokens, const DecoderParams& params, int grid_h,
                             int grid_w);

// Mean over classes of the multi-label soft margin loss.
Var loss_cls_t(Tape& tape, Var logits, const std::vector<int>& labels);
double loss_cls(const VectorXd& logits, const std::vector<int>& labels);

// Mean cross-entropy over non-IGNORE positions; 0 (with a warning on stderr)
// when every position is IGNORE.
Var loss_seg_t(Tape& tape, Var seg_logits, const PseudoLabel& pseudo);
double loss_seg(const MatrixXd& seg_logits, const PseudoLabel& pseudo);

// Sampled token pairs with non-IGNORE pseudo labels; target 1 for same-label
// pairs, 0 otherwise. At most max_pairs pairs per call.
std::vector<AffinityPair> sample_affinity_pairs(const PseudoLabel& pseudo, int max_pairs,
                                                Rng& rng);
Var loss_aff_t(Tape& tape, Var tokens, const std::vector<AffinityPair>& pairs);
double loss_aff(const MatrixXd& tokens, const std::vector<AffinityPair>& pairs);

struct LossBreakdown {
  double cls = 0.0;
  double aff = 0.0;
  double seg = 0.0;
  double u = 0.0;
  double c = 0.0;
  double total = 0.0;
  std::array<double, 5> lambdas{1.0, 0.2, 0.1, 0.1, 0.1};
};

// total = l1*cls + l2*aff + l3*seg + l4*u + l5*c, exactly.
LossBreakdown total_loss(double cls, double aff, double seg, double u, double c,
                         const std::array<double, 5>& lambdas);

}  // namespace fsr
