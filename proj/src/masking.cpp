#include "fsr/masking.hpp"

#include <algorithm>
#include <numeric>

namespace fsr {

VectorXd score_uncertainty(const Cam& cam, double beta_low, double beta_high, Rng& rng) {
  if (!(0.0 < beta_low && beta_low < beta_high && beta_high < 1.0))
    throw ConfigError("score_uncertainty: need 0 < beta_low < beta_high < 1");
  const Eigen::Index n = cam.scores.rows();
  VectorXd soft(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double m = cam.scores.cols() > 0 ? cam.scores.row(i).maxCoeff() : 0.0;
    double u = uniform(rng, 0.0, 1.0);
    soft(i) = (beta_low < m && m < beta_high) ? u + 1.0 : u;
  }
  return soft;
}

MaskPair select_mask(const VectorXd& soft, double ratio) {
  const Eigen::Index n = soft.size();
  if (n == 0) throw NumericError("select_mask: empty score vector");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("select_mask: ratio must be in (0,1)");
  const int k = static_cast<int>(std::floor(static_cast<double>(n) * ratio));

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  // Descending by score; lower index wins ties.
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return soft(a) > soft(b); });

  MaskPair mp;
  mp.soft = soft;
  mp.k = k;
  mp.binary.assign(static_cast<size_t>(n), 0);
  for (int i = 0; i < k; ++i) mp.binary[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
  return mp;
}

MaskPair random_mask(int n, double ratio, Rng& rng) {
  if (n <= 0) throw NumericError("random_mask: n must be positive");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("random_mask: ratio must be in (0,1)");
  const int k = static_cast<int>(std::floor(n * ratio));
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  MaskPair mp;
  mp.soft = VectorXd::Zero(n);
  mp.k = k;
  mp.binary.assign(static_cast<size_t>(n), 0);
  for (int i = 0; i < k; ++i) {
    mp.binary[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
    mp.soft(order[static_cast<size_t>(i)]) = 1.0;
  }
  return mp;
}

Var apply_mask_tokens_t(Tape& tape, Var tokens, const MaskPair& mask, Var mask_token, Var pos) {
  const Eigen::Index n = tape.val(tokens).rows();
  if (static_cast<Eigen::Index>(mask.binary.size()) != n)
    throw NumericError("apply_mask_tokens: mask length " + std::to_string(mask.binary.size()) +
                       " vs " + std::to_string(n) + " tokens");
  VectorXd keep(n), drop(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    drop(i) = mask.binary[static_cast<size_t>(i)] ? 1.0 : 0.0;
    keep(i) = 1.0 - drop(i);
  }
  Var kept = tape.scale_rows_const(tokens, keep);
  Var broadcast = tape.matmul(tape.constant(MatrixXd::Ones(n, 1)), mask_token);
  Var replaced = tape.scale_rows_const(tape.add(broadcast, pos), drop);
  return tape.add(kept, replaced);
}

MatrixXd apply_mask_tokens(const MatrixXd& tokens, const MaskPair& mask,
                           const MatrixXd& mask_token, const MatrixXd& pos) {
  Tape tape(false);
  Var t = tape.constant(tokens);
  Var m = tape.constant(mask_token);
  Var p = tape.constant(pos);
  return tape.val(apply_mask_tokens_t(tape, t, mask, m, p));
}

}  // namespace fsr
