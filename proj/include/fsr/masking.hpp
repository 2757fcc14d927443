#pragma once

// Uncertainty-guided token masking: soft scores from the CAM band, exact
// top-k selection, mask-token substitution, and the random baseline.

#include "fsr/cam.hpp"
#include "fsr/common.hpp"
#include "fsr/tensor.hpp"

#include <vector>

namespace fsr {

struct MaskPair {
  VectorXd soft;                // M_s, length N
  std::vector<uint8_t> binary;  // M_b, exactly k ones
  int k = 0;
};

// M_s[i] = u_i + 1 if beta_low < max(cam[i,:]) < beta_high else u_i,
// with u_i ~ U(0,1) drawn per token.
VectorXd score_uncertainty(const Cam& cam, double beta_low, double beta_high, Rng& rng);

// k = floor(N*r); flags the k largest entries of soft, ties broken by lower index.
MaskPair select_mask(const VectorXd& soft, double ratio);

// Uniformly random k-subset (ablation baseline).
MaskPair random_mask(int n, double ratio, Rng& rng);

// Masked rows become mask_token + their position embedding; others unchanged.
// tokens must already carry position embeddings (patchify_embed output).
Var apply_mask_tokens_t(Tape& tape, Var tokens, const MaskPair& mask, Var mask_token, Var pos);
MatrixXd apply_mask_tokens(const MatrixXd& tokens, const MaskPair& mask,
                           const MatrixXd& mask_token, const MatrixXd& pos);

}  // namespace fsr
