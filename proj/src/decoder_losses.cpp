#include "fsr/decoder_losses.hpp"

#include <iostream>

namespace fsr {

DecoderParams DecoderParams::init(const DecoderConfig& cfg, Rng& rng) {
  DecoderParams p;
  p.cfg = cfg;
  const double std = 0.02;
  p.conv1_w = trunc_normal_matrix(rng, cfg.channels, cfg.in_dim * 9, std);
  p.conv1_b = MatrixXd::Zero(1, cfg.channels);
  p.conv2_w = trunc_normal_matrix(rng, cfg.channels, cfg.channels * 9, std);
  p.conv2_b = MatrixXd::Zero(1, cfg.channels);
  p.cls_w = trunc_normal_matrix(rng, cfg.num_classes + 1, cfg.channels, std);
  p.cls_b = MatrixXd::Zero(1, cfg.num_classes + 1);
  return p;
}

void DecoderParams::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + "conv1_w", conv1_w);
  fn(prefix + "conv1_b", conv1_b);
  fn(prefix + "conv2_w", conv2_w);
  fn(prefix + "conv2_b", conv2_b);
  fn(prefix + "cls_w", cls_w);
  fn(prefix + "cls_b", cls_b);
}

DecoderVars leaf_decoder(Tape& tape, DecoderParams& params, bool requires_grad) {
  DecoderVars v;
  v.conv1_w = tape.leaf(params.conv1_w, requires_grad);
  v.conv1_b = tape.leaf(params.conv1_b, requires_grad);
  v.conv2_w = tape.leaf(params.conv2_w, requires_grad);
  v.conv2_b = tape.leaf(params.conv2_b, requires_grad);
  v.cls_w = tape.leaf(params.cls_w, requires_grad);
  v.cls_b = tape.leaf(params.cls_b, requires_grad);
  return v;
}

Var decode_segmentation_t(Tape& tape, Var tokens, const DecoderVars& vars,
                          const DecoderConfig& cfg, int grid_h, int grid_w) {
  Var h = tape.relu(tape.conv3x3_grid(tokens, vars.conv1_w, vars.conv1_b, grid_h, grid_w,
                                      cfg.dilation));
  h = tape.relu(tape.conv3x3_grid(h, vars.conv2_w, vars.conv2_b, grid_h, grid_w, cfg.dilation));
  return tape.linear(h, vars.cls_w, vars.cls_b);  // 1×1 classifier conv
}

MatrixXd decode_segmentation(const MatrixXd& tokens, const DecoderParams& params, int grid_h,
                             int grid_w) {
  Tape tape(false);
  DecoderVars vars = leaf_decoder(tape, const_cast<DecoderParams&>(params), false);
  Var t = tape.constant(tokens);
  return tape.val(decode_segmentation_t(tape, t, vars, params.cfg, grid_h, grid_w));
}

Var loss_cls_t(Tape& tape, Var logits, const std::vector<int>& labels) {
  VectorXd y(static_cast<Eigen::Index>(labels.size()));
  for (size_t i = 0; i < labels.size(); ++i) y(static_cast<Eigen::Index>(i)) = labels[i];
  return tape.bce_multilabel(logits, y);
}

double loss_cls(const VectorXd& logits, const std::vector<int>& labels) {
  Tape tape(false);
  Var l = tape.constant(logits.transpose());
  return tape.val(loss_cls_t(tape, l, labels))(0, 0);
}

Var loss_seg_t(Tape& tape, Var seg_logits, const PseudoLabel& pseudo) {
  if (static_cast<Eigen::Index>(pseudo.labels.size()) != tape.val(seg_logits).rows())
    throw NumericError("loss_seg: pseudo label count mismatch");
  bool any_scored = false;
  for (int l : pseudo.labels)
    if (l != kIgnoreIndex) any_scored = true;
  if (!any_scored)
    std::cerr << "[fsr] warning: loss_seg saw an all-IGNORE pseudo label map\n";
  return tape.ce_indexed(seg_logits, pseudo.labels, kIgnoreIndex);
}

double loss_seg(const MatrixXd& seg_logits, const PseudoLabel& pseudo) {
  Tape tape(false);
  Var l = tape.constant(seg_logits);
  return tape.val(loss_seg_t(tape, l, pseudo))(0, 0);
}

std::vector<AffinityPair> sample_affinity_pairs(const PseudoLabel& pseudo, int max_pairs,
                                                Rng& rng) {
  std::vector<int> eligible;
  for (size_t i = 0; i < pseudo.labels.size(); ++i)
    if (pseudo.labels[i] != kIgnoreIndex) eligible.push_back(static_cast<int>(i));
  std::vector<AffinityPair> pairs;
  if (eligible.size() < 2) return pairs;
  pairs.reserve(static_cast<size_t>(max_pairs));
  for (int p = 0; p < max_pairs; ++p) {
    int a = eligible[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(eligible.size()) - 1))];
    int b = eligible[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(eligible.size()) - 1))];
    if (a == b) continue;
    AffinityPair pr;
    pr.i = a;
    pr.j = b;
    pr.target = pseudo.labels[static_cast<size_t>(a)] == pseudo.labels[static_cast<size_t>(b)]
                    ? 1.0
                    : 0.0;
    pairs.push_back(pr);
  }
  return pairs;
}

Var loss_aff_t(Tape& tape, Var tokens, const std::vector<AffinityPair>& pairs) {
  return tape.cosine_pair_loss(tokens, pairs);
}

double loss_aff(const MatrixXd& tokens, const std::vector<AffinityPair>& pairs) {
  Tape tape(false);
  Var t = tape.constant(tokens);
  return tape.val(loss_aff_t(tape, t, pairs))(0, 0);
}

LossBreakdown total_loss(double cls, double aff, double seg, double u, double c,
                         const std::array<double, 5>& lambdas) {
  LossBreakdown b;
  b.cls = cls;
  b.aff = aff;
  b.seg = seg;
  b.u = u;
  b.c = c;
  b.lambdas = lambdas;
  b.total = lambdas[0] * cls + lambdas[1] * aff + lambdas[2] * seg + lambdas[3] * u +
            lambdas[4] * c;
  return b;
}

}  // namespace fsr
