#include "fsr/aggregation.hpp"

#include <algorithm>

namespace fsr {

namespace {

std::vector<int> unmasked_indices(const MaskPair& mask) {
  std::vector<int> idx;
  for (size_t i = 0; i < mask.binary.size(); ++i)
    if (!mask.binary[i]) idx.push_back(static_cast<int>(i));
  return idx;
}

}  // namespace

AggregationParams AggregationParams::init(const AggregationConfig& cfg, Rng& rng) {
  if (cfg.blocks < 1) throw ConfigError("aggregation: need at least one block");
  AggregationParams p;
  p.cfg = cfg;
  const double std = 0.02;
  p.cls_token = trunc_normal_matrix(rng, 1, cfg.dim, std);
  for (int b = 0; b < cfg.blocks; ++b) {
    AggregationBlockParams bp;
    bp.ln_ca_g = MatrixXd::Ones(1, cfg.dim);
    bp.ln_ca_b = MatrixXd::Zero(1, cfg.dim);
    bp.wq = trunc_normal_matrix(rng, cfg.dim, cfg.dim, std);
    bp.bq = MatrixXd::Zero(1, cfg.dim);
    bp.wk = trunc_normal_matrix(rng, cfg.dim, cfg.dim, std);
    bp.bk = MatrixXd::Zero(1, cfg.dim);
    bp.wv = trunc_normal_matrix(rng, cfg.dim, cfg.dim, std);
    bp.bv = MatrixXd::Zero(1, cfg.dim);
    bp.wo = trunc_normal_matrix(rng, cfg.dim, cfg.dim, std);
    bp.bo = MatrixXd::Zero(1, cfg.dim);
    bp.ln_ff_g = MatrixXd::Ones(1, cfg.dim);
    bp.ln_ff_b = MatrixXd::Zero(1, cfg.dim);
    bp.ff1 = trunc_normal_matrix(rng, cfg.ff_dim, cfg.dim, std);
    bp.ff1_b = MatrixXd::Zero(1, cfg.ff_dim);
    bp.ff2 = trunc_normal_matrix(rng, cfg.dim, cfg.ff_dim, std);
    bp.ff2_b = MatrixXd::Zero(1, cfg.dim);
    p.blocks.push_back(std::move(bp));
  }
  return p;
}

void AggregationParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + "cls_token", cls_token);
  for (size_t b = 0; b < blocks.size(); ++b) {
    std::string bp = prefix + "block" + std::to_string(b) + ".";
    auto& x = blocks[b];
    fn(bp + "ln_ca_g", x.ln_ca_g);
    fn(bp + "ln_ca_b", x.ln_ca_b);
    fn(bp + "wq", x.wq);
    fn(bp + "bq", x.bq);
    fn(bp + "wk", x.wk);
    fn(bp + "bk", x.bk);
    fn(bp + "wv", x.wv);
    fn(bp + "bv", x.bv);
    fn(bp + "wo", x.wo);
    fn(bp + "bo", x.bo);
    fn(bp + "ln_ff_g", x.ln_ff_g);
    fn(bp + "ln_ff_b", x.ln_ff_b);
    fn(bp + "ff1", x.ff1);
    fn(bp + "ff1_b", x.ff1_b);
    fn(bp + "ff2", x.ff2);
    fn(bp + "ff2_b", x.ff2_b);
  }
}

AggregationVars leaf_aggregation(Tape& tape, AggregationParams& params, bool requires_grad) {
  AggregationVars v;
  v.cls_token = tape.leaf(params.cls_token, requires_grad);
  for (auto& bp : params.blocks) {
    AggregationBlockVars bv;
    bv.ln_ca_g = tape.leaf(bp.ln_ca_g, requires_grad);
    bv.ln_ca_b = tape.leaf(bp.ln_ca_b, requires_grad);
    bv.wq = tape.leaf(bp.wq, requires_grad);
    bv.bq = tape.leaf(bp.bq, requires_grad);
    bv.wk = tape.leaf(bp.wk, requires_grad);
    bv.bk = tape.leaf(bp.bk, requires_grad);
    bv.wv = tape.leaf(bp.wv, requires_grad);
    bv.bv = tape.leaf(bp.bv, requires_grad);
    bv.wo = tape.leaf(bp.wo, requires_grad);
    bv.bo = tape.leaf(bp.bo, requires_grad);
    bv.ln_ff_g = tape.leaf(bp.ln_ff_g, requires_grad);
    bv.ln_ff_b = tape.leaf(bp.ln_ff_b, requires_grad);
    bv.ff1 = tape.leaf(bp.ff1, requires_grad);
    bv.ff1_b = tape.leaf(bp.ff1_b, requires_grad);
    bv.ff2 = tape.leaf(bp.ff2, requires_grad);
    bv.ff2_b = tape.leaf(bp.ff2_b, requires_grad);
    v.blocks.push_back(bv);
  }
  return v;
}

Var mca_block_forward_t(Tape& tape, Var class_tok, Var patches, const MaskPair& mask,
                        const AggregationBlockVars& vars, MatrixXd* attn_out) {
  const Eigen::Index n = tape.val(patches).rows();
  const Eigen::Index d = tape.val(patches).cols();
  if (static_cast<Eigen::Index>(mask.binary.size()) != n)
    throw NumericError("mca_block_forward: mask length mismatch");
  if (std::all_of(mask.binary.begin(), mask.binary.end(), [](uint8_t m) { return m != 0; }))
    throw NumericError("mca_block_forward: every patch token is masked, nothing to attend to");

  // One LayerNorm over the concatenation [class; patches]; row-wise it is the
  // same normalization for the query and the key/value rows.
  Var cat = tape.concat_rows(class_tok, patches);
  Var normed = tape.layernorm_rows(cat, vars.ln_ca_g, vars.ln_ca_b);
  Var ncls = tape.slice_rows(normed, 0, 1);
  Var npat = tape.slice_rows(normed, 1, static_cast<int>(n));

  Var q = tape.linear(ncls, vars.wq, vars.bq);   // 1×D
  Var k = tape.linear(npat, vars.wk, vars.bk);   // N×D
  Var v = tape.linear(npat, vars.wv, vars.bv);   // N×D

  Var logits = tape.scale(tape.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d)));
  Var attn = tape.softmax_rows_excluding(logits, mask.binary);
  if (attn_out) *attn_out = tape.val(attn);

  Var mixed = tape.linear(tape.matmul(attn, v), vars.wo, vars.bo);
  Var with_attn = tape.add(class_tok, mixed);

  Var nff = tape.layernorm_rows(with_attn, vars.ln_ff_g, vars.ln_ff_b);
  Var h = tape.gelu(tape.linear(nff, vars.ff1, vars.ff1_b));
  Var ff = tape.linear(h, vars.ff2, vars.ff2_b);
  return tape.add(with_attn, ff);
}

MatrixXd mca_block_forward(const MatrixXd& class_tok, const MatrixXd& patches,
                           const MaskPair& mask, const AggregationBlockParams& params,
                           MatrixXd* attn_out) {
  Tape tape(false);
  AggregationParams tmp;
  tmp.cfg.dim = static_cast<int>(patches.cols());
  tmp.blocks.push_back(params);
  tmp.cls_token = class_tok;
  AggregationVars vars = leaf_aggregation(tape, tmp, false);
  Var p = tape.constant(patches);
  return tape.val(mca_block_forward_t(tape, vars.cls_token, p, mask, vars.blocks[0], attn_out));
}

Var aggregate_class_token_t(Tape& tape, Var patches, const MaskPair& mask,
                            const AggregationVars& vars) {
  Var cls = vars.cls_token;
  for (const auto& block : vars.blocks)
    cls = mca_block_forward_t(tape, cls, patches, mask, block);
  return cls;
}

MatrixXd aggregate_class_token(const MatrixXd& patches, const MaskPair& mask,
                               const AggregationParams& params) {
  Tape tape(false);
  AggregationVars vars = leaf_aggregation(tape, const_cast<AggregationParams&>(params), false);
  Var p = tape.constant(patches);
  return tape.val(aggregate_class_token_t(tape, p, mask, vars));
}

Var pool_gap_t(Tape& tape, Var patches, const MaskPair& mask) {
  std::vector<int> idx = unmasked_indices(mask);
  if (idx.empty()) throw NumericError("pool_gap: every token is masked");
  Var kept = tape.gather_rows(patches, idx);
  return tape.scale(tape.sum_rows(kept), 1.0 / static_cast<double>(idx.size()));
}

Var pool_gmp_t(Tape& tape, Var patches, const MaskPair& mask) {
  std::vector<int> idx = unmasked_indices(mask);
  if (idx.empty()) throw NumericError("pool_gmp: every token is masked");
  return tape.colwise_max_subset(patches, idx);
}

MatrixXd pool_gap(const MatrixXd& patches, const MaskPair& mask) {
  Tape tape(false);
  Var p = tape.constant(patches);
  return tape.val(pool_gap_t(tape, p, mask));
}

MatrixXd pool_gmp(const MatrixXd& patches, const MaskPair& mask) {
  Tape tape(false);
  Var p = tape.constant(patches);
  return tape.val(pool_gmp_t(tape, p, mask));
}

}  // namespace fsr
