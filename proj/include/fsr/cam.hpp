#pragma once

// Class activation maps from final-layer patch tokens and the shared
// classifier weights, pooled classification logits, and reliable pseudo
// segmentation labels.

#include "fsr/common.hpp"
#include "fsr/tensor.hpp"

#include <vector>

namespace fsr {

constexpr int kIgnoreIndex = 255;

struct Cam {
  MatrixXd scores;  // N×C, each entry in [0,1]
  int grid_h = 0;
  int grid_w = 0;
};

struct PseudoLabel {
  std::vector<int> labels;  // N entries in {0..C} ∪ {kIgnoreIndex}; 0 = background
  int grid_h = 0;
  int grid_w = 0;
};

// raw = Z·Wᵀ, ReLU, then per-class min-max over the N spatial positions.
// Channels that are all-zero after ReLU stay all-zero.
Cam compute_cam(const MatrixXd& z, const MatrixXd& w, int grid_h, int grid_w);

// Spatial global average of per-token logits Z·Wᵀ.
Var pool_class_logits_t(Tape& tape, Var z, Var w);
VectorXd pool_class_logits(const MatrixXd& z, const MatrixXd& w);

// Position rule on m = max over present classes of cam[i,:]:
// m ≥ beta_high → argmax class id, m ≤ beta_low → background, else IGNORE.
PseudoLabel derive_pseudo_labels(const Cam& cam, const std::vector<int>& labels,
                                 double beta_low, double beta_high);

}  // namespace fsr
