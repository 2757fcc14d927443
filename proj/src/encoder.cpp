#include "fsr/encoder.hpp"

namespace fsr {

namespace {

MatrixXd zeros(Eigen::Index r, Eigen::Index c) { return MatrixXd::Zero(r, c); }
MatrixXd ones_row(Eigen::Index c) { return MatrixXd::Ones(1, c); }

}  // namespace

EncoderParams EncoderParams::init(const EncoderConfig& cfg, Rng& rng) {
  if (cfg.image_size % cfg.patch_size != 0)
    throw ConfigError("encoder: image_size must be a multiple of patch_size");
  if (cfg.dim % cfg.heads != 0) throw ConfigError("encoder: dim must be divisible by heads");
  EncoderParams p;
  p.cfg = cfg;
  const double std = 0.02;
  p.patch_proj = trunc_normal_matrix(rng, cfg.dim, cfg.patch_dim(), std);
  p.patch_bias = zeros(1, cfg.dim);
  p.pos = trunc_normal_matrix(rng, cfg.tokens(), cfg.dim, std);
  p.mask_token = trunc_normal_matrix(rng, 1, cfg.dim, std);
  for (int l = 0; l < cfg.depth; ++l) {
    EncoderLayerParams lp;
    lp.ln1_g = ones_row(cfg.dim);
    lp.ln1_b = zeros(1, cfg.dim);
    lp.wq = trunc_normal_matrix(rng, cfg.dim, cfg.dim, std);
    lp.bq = zeros(1, cfg.dim);
    lp.wk = trunc_normal_matrix(rng, cfg.dim, cfg.dim, std);
    lp.bk = zeros(1, cfg.dim);
    lp.wv = trunc_normal_matrix(rng, cfg.dim, cfg.dim, std);
    lp.bv = zeros(1, cfg.dim);
    lp.wo = trunc_normal_matrix(rng, cfg.dim, cfg.dim, std);
    lp.bo = zeros(1, cfg.dim);
    lp.ln2_g = ones_row(cfg.dim);
    lp.ln2_b = zeros(1, cfg.dim);
    lp.ff1 = trunc_normal_matrix(rng, cfg.ff_dim, cfg.dim, std);
    lp.ff1_b = zeros(1, cfg.ff_dim);
    lp.ff2 = trunc_normal_matrix(rng, cfg.dim, cfg.ff_dim, std);
    lp.ff2_b = zeros(1, cfg.dim);
    p.layers.push_back(std::move(lp));
  }
  return p;
}

void EncoderParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + "patch_proj", patch_proj);
  fn(prefix + "patch_bias", patch_bias);
  fn(prefix + "pos", pos);
  fn(prefix + "mask_token", mask_token);
  for (size_t l = 0; l < layers.size(); ++l) {
    std::string lp = prefix + "layer" + std::to_string(l) + ".";
    auto& x = layers[l];
    fn(lp + "ln1_g", x.ln1_g);
    fn(lp + "ln1_b", x.ln1_b);
    fn(lp + "wq", x.wq);
    fn(lp + "bq", x.bq);
    fn(lp + "wk", x.wk);
    fn(lp + "bk", x.bk);
    fn(lp + "wv", x.wv);
    fn(lp + "bv", x.bv);
    fn(lp + "wo", x.wo);
    fn(lp + "bo", x.bo);
    fn(lp + "ln2_g", x.ln2_g);
    fn(lp + "ln2_b", x.ln2_b);
    fn(lp + "ff1", x.ff1);
    fn(lp + "ff1_b", x.ff1_b);
    fn(lp + "ff2", x.ff2);
    fn(lp + "ff2_b", x.ff2_b);
  }
}

EncoderVars leaf_encoder(Tape& tape, EncoderParams& params, bool requires_grad) {
  EncoderVars v;
  v.patch_proj = tape.leaf(params.patch_proj, requires_grad);
  v.patch_bias = tape.leaf(params.patch_bias, requires_grad);
  v.pos = tape.leaf(params.pos, requires_grad);
  v.mask_token = tape.leaf(params.mask_token, requires_grad);
  for (auto& lp : params.layers) {
    EncoderLayerVars lv;
    lv.ln1_g = tape.leaf(lp.ln1_g, requires_grad);
    lv.ln1_b = tape.leaf(lp.ln1_b, requires_grad);
    lv.wq = tape.leaf(lp.wq, requires_grad);
    lv.bq = tape.leaf(lp.bq, requires_grad);
    lv.wk = tape.leaf(lp.wk, requires_grad);
    lv.bk = tape.leaf(lp.bk, requires_grad);
    lv.wv = tape.leaf(lp.wv, requires_grad);
    lv.bv = tape.leaf(lp.bv, requires_grad);
    lv.wo = tape.leaf(lp.wo, requires_grad);
    lv.bo = tape.leaf(lp.bo, requires_grad);
    lv.ln2_g = tape.leaf(lp.ln2_g, requires_grad);
    lv.ln2_b = tape.leaf(lp.ln2_b, requires_grad);
    lv.ff1 = tape.leaf(lp.ff1, requires_grad);
    lv.ff1_b = tape.leaf(lp.ff1_b, requires_grad);
    lv.ff2 = tape.leaf(lp.ff2, requires_grad);
    lv.ff2_b = tape.leaf(lp.ff2_b, requires_grad);
    v.layers.push_back(lv);
  }
  return v;
}

MatrixXd patchify(const std::vector<float>& view, int image_size, int patch_size) {
  if (image_size % patch_size != 0)
    throw NumericError("patchify: image size " + std::to_string(image_size) +
                       " not divisible by patch size " + std::to_string(patch_size));
  if (view.size() != static_cast<size_t>(image_size) * image_size * 3)
    throw NumericError("patchify: view buffer has wrong size");
  const int g = image_size / patch_size;
  const int pd = patch_size * patch_size * 3;
  MatrixXd patches(g * g, pd);
  for (int py = 0; py < g; ++py)
    for (int px = 0; px < g; ++px) {
      int row = py * g + px;
      int col = 0;
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          for (int c = 0; c < 3; ++c) {
            int iy = py * patch_size + y;
            int ix = px * patch_size + x;
            patches(row, col++) =
                static_cast<double>(view[(static_cast<size_t>(iy) * image_size + ix) * 3 + c]);
          }
    }
  return patches;
}

Var patchify_embed_t(Tape& tape, const MatrixXd& patches, const EncoderVars& vars) {
  Var p = tape.constant(patches);
  Var tokens = tape.linear(p, vars.patch_proj, vars.patch_bias);
  return tape.add(tokens, vars.pos);
}

MatrixXd patchify_embed(const std::vector<float>& view, const EncoderParams& params) {
  Tape tape(/*grad_enabled=*/false);
  EncoderVars vars = leaf_encoder(tape, const_cast<EncoderParams&>(params), false);
  MatrixXd patches = patchify(view, params.cfg.image_size, params.cfg.patch_size);
  return tape.val(patchify_embed_t(tape, patches, vars));
}

Var transformer_forward_t(Tape& tape, Var tokens, const EncoderVars& vars,
                          const EncoderConfig& cfg, AttentionCapture* capture) {
  Var x = tokens;
  if (capture) capture->layer_outputs.push_back(tape.val(x));
  for (size_t l = 0; l < vars.layers.size(); ++l) {
    const auto& lv = vars.layers[l];
    Var n1 = tape.layernorm_rows(x, lv.ln1_g, lv.ln1_b);
    Var q = tape.linear(n1, lv.wq, lv.bq);
    Var k = tape.linear(n1, lv.wk, lv.bk);
    Var v = tape.linear(n1, lv.wv, lv.bv);
    std::vector<MatrixXd> attn;
    Var sa = tape.mhsa(q, k, v, cfg.heads, capture ? &attn : nullptr);
    if (capture) capture->layers.push_back(std::move(attn));
    Var proj = tape.linear(sa, lv.wo, lv.bo);
    x = tape.add(x, proj);
    Var n2 = tape.layernorm_rows(x, lv.ln2_g, lv.ln2_b);
    Var h = tape.gelu(tape.linear(n2, lv.ff1, lv.ff1_b));
    Var ff = tape.linear(h, lv.ff2, lv.ff2_b);
    x = tape.add(x, ff);
    if (!tape.val(x).allFinite())
      throw NumericError("encoder layer " + std::to_string(l) + ": non-finite activations");
    if (capture) capture->layer_outputs.push_back(tape.val(x));
  }
  return x;
}

MatrixXd transformer_forward(const MatrixXd& tokens, const EncoderParams& params,
                             AttentionCapture* capture) {
  Tape tape(/*grad_enabled=*/false);
  EncoderVars vars = leaf_encoder(tape, const_cast<EncoderParams&>(params), false);
  Var x = tape.leaf(tokens, false);
  return tape.val(transformer_forward_t(tape, x, vars, params.cfg, capture));
}

AttentionCapture capture_attention(const MatrixXd& tokens, const EncoderParams& params) {
  AttentionCapture cap;
  transformer_forward(tokens, params, &cap);
  return cap;
}

ClassifierParams ClassifierParams::init(int num_classes, int dim, Rng& rng) {
  ClassifierParams p;
  p.w = trunc_normal_matrix(rng, num_classes, dim, 0.02);
  return p;
}

void ClassifierParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + "w", w);
}

}  // namespace fsr
