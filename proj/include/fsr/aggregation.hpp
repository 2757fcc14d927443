#pragma once

// Aggregation of unmasked patch tokens into a single class token through
// stacked masked cross-attention blocks, with GAP/GMP pooling baselines.

#include "fsr/common.hpp"
#include "fsr/masking.hpp"
#include "fsr/tensor.hpp"

#include <vector>

namespace fsr {

struct AggregationConfig {
  int dim = 64;
  int blocks = 2;
  int ff_dim = 128;
};

struct AggregationBlockParams {
  MatrixXd ln_ca_g, ln_ca_b;  // LayerNorm over [class; patches] rows
  MatrixXd wq, bq, wk, bk, wv, bv, wo, bo;
  MatrixXd ln_ff_g, ln_ff_b;
  MatrixXd ff1, ff1_b, ff2, ff2_b;
};

struct AggregationParams {
  AggregationConfig cfg;
  MatrixXd cls_token;  // 1×D, learnable initial class token
  std::vector<AggregationBlockParams> blocks;

  static AggregationParams init(const AggregationConfig& cfg, Rng& rng);
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct AggregationBlockVars {
  Var ln_ca_g, ln_ca_b, wq, bq, wk, bk, wv, bv, wo, bo, ln_ff_g, ln_ff_b, ff1, ff1_b, ff2,
      ff2_b;
};

struct AggregationVars {
  Var cls_token;
  std::vector<AggregationBlockVars> blocks;
};

AggregationVars leaf_aggregation(Tape& tape, AggregationParams& params,
                                 bool requires_grad = true);

// One MCA block: queries from the normalized class token, keys/values from
// normalized patches, masked positions excluded from the softmax, residual
// output projection, then a residual feed-forward on the class token.
// Throws when every patch token is masked. attn_out (1×N) has exact zeros at
// masked positions.
Var mca_block_forward_t(Tape& tape, Var class_tok, Var patches, const MaskPair& mask,
                        const AggregationBlockVars& vars, MatrixXd* attn_out = nullptr);
MatrixXd mca_block_forward(const MatrixXd& class_tok, const MatrixXd& patches,
                           const MaskPair& mask, const AggregationBlockParams& params,
                           MatrixXd* attn_out = nullptr);

Var aggregate_class_token_t(Tape& tape, Var patches, const MaskPair& mask,
                            const AggregationVars& vars);
MatrixXd aggregate_class_token(const MatrixXd& patches, const MaskPair& mask,
                               const AggregationParams& params);

// Mean / per-dimension max over unmasked tokens only.
Var pool_gap_t(Tape& tape, Var patches, const MaskPair& mask);
Var pool_gmp_t(Tape& tape, Var patches, const MaskPair& mask);
MatrixXd pool_gap(const MatrixXd& patches, const MaskPair& mask);
MatrixXd pool_gmp(const MatrixXd& patches, const MaskPair& mask);

}  // namespace fsr
