#pragma once

// Small vision transformer backbone: patch embedding with learnable position
// embeddings, pre-norm self-attention/feed-forward blocks, attention capture,
// and the classifier weights shared with CAM generation.

#include "fsr/common.hpp"
#include "fsr/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace fsr {

struct EncoderConfig {
  int image_size = 64;
  int patch_size = 8;
  int dim = 64;
  int depth = 4;
  int heads = 4;
  int ff_dim = 128;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * 3; }
};

struct EncoderLayerParams {
  MatrixXd ln1_g, ln1_b;
  MatrixXd wq, bq, wk, bk, wv, bv, wo, bo;
  MatrixXd ln2_g, ln2_b;
  MatrixXd ff1, ff1_b, ff2, ff2_b;
};

struct EncoderParams {
  EncoderConfig cfg;
  MatrixXd patch_proj;   // D × (P*P*3)
  MatrixXd patch_bias;   // 1×D
  MatrixXd pos;          // N×D
  MatrixXd mask_token;   // 1×D
  std::vector<EncoderLayerParams> layers;

  static EncoderParams init(const EncoderConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct EncoderLayerVars {
  Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, ff1, ff1_b, ff2, ff2_b;
};

// Tape handles for one parameter set; create once per tape so gradients from
// multiple forward passes accumulate on the same leaves.
struct EncoderVars {
  Var patch_proj, patch_bias, pos, mask_token;
  std::vector<EncoderLayerVars> layers;
};

EncoderVars leaf_encoder(Tape& tape, EncoderParams& params, bool requires_grad = true);

// Flattens an S×S×3 view into the N×(P*P*3) patch matrix (row-major patches,
// row-major pixels within a patch).
MatrixXd patchify(const std::vector<float>& view, int image_size, int patch_size);

// patch projection + position embeddings
Var patchify_embed_t(Tape& tape, const MatrixXd& patches, const EncoderVars& vars);
MatrixXd patchify_embed(const std::vector<float>& view, const EncoderParams& params);

struct AttentionCapture {
  // layers × heads, each N×N with rows summing to 1
  std::vector<std::vector<MatrixXd>> layers;
  // final + per-layer token embeddings (layer_outputs[l] is the output of
  // block l; index 0 is the embedding input) for CKA analysis
  std::vector<MatrixXd> layer_outputs;
};

Var transformer_forward_t(Tape& tape, Var tokens, const EncoderVars& vars,
                          const EncoderConfig& cfg, AttentionCapture* capture = nullptr);
MatrixXd transformer_forward(const MatrixXd& tokens, const EncoderParams& params,
                             AttentionCapture* capture = nullptr);

// Read-out of the attention maps produced by a forward pass.
AttentionCapture capture_attention(const MatrixXd& tokens, const EncoderParams& params);

struct ClassifierParams {
  MatrixXd w;  // C×D, shared between classification pooling and CAM
  static ClassifierParams init(int num_classes, int dim, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

}  // namespace fsr
