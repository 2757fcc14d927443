#include "fsr/cam.hpp"

namespace fsr {

Cam compute_cam(const MatrixXd& z, const MatrixXd& w, int grid_h, int grid_w) {
  if (z.cols() != w.cols())
    throw NumericError("compute_cam: token dim " + std::to_string(z.cols()) +
                       " vs classifier dim " + std::to_string(w.cols()));
  if (z.rows() != static_cast<Eigen::Index>(grid_h) * grid_w)
    throw NumericError("compute_cam: grid does not match token count");
  MatrixXd raw = (z * w.transpose()).cwiseMax(0.0);
  Cam cam;
  cam.grid_h = grid_h;
  cam.grid_w = grid_w;
  cam.scores = MatrixXd::Zero(raw.rows(), raw.cols());
  for (Eigen::Index c = 0; c < raw.cols(); ++c) {
    double lo = raw.col(c).minCoeff();
    double hi = raw.col(c).maxCoeff();
    double range = std::max(hi - lo, 1e-8);
    if (hi <= 0.0) continue;  // ReLU killed the channel
    cam.scores.col(c) = (raw.col(c).array() - lo) / range;
  }
  return cam;
}

Var pool_class_logits_t(Tape& tape, Var z, Var w) {
  Var per_token = tape.matmul_nt(z, w);  // N×C
  Var summed = tape.sum_rows(per_token);
  return tape.scale(summed, 1.0 / static_cast<double>(tape.val(z).rows()));
}

VectorXd pool_class_logits(const MatrixXd& z, const MatrixXd& w) {
  if (z.cols() != w.cols()) throw NumericError("pool_class_logits: dim mismatch");
  Tape tape(false);
  Var zv = tape.constant(z);
  Var wv = tape.constant(w);
  return tape.val(pool_class_logits_t(tape, zv, wv)).row(0).transpose();
}

PseudoLabel derive_pseudo_labels(const Cam& cam, const std::vector<int>& labels,
                                 double beta_low, double beta_high) {
  if (!(0.0 < beta_low && beta_low < beta_high && beta_high < 1.0))
    throw ConfigError("derive_pseudo_labels: need 0 < beta_low < beta_high < 1");
  if (static_cast<Eigen::Index>(labels.size()) != cam.scores.cols())
    throw NumericError("derive_pseudo_labels: label vector length mismatch");

  PseudoLabel out;
  out.grid_h = cam.grid_h;
  out.grid_w = cam.grid_w;
  out.labels.assign(static_cast<size_t>(cam.scores.rows()), 0);
  for (Eigen::Index i = 0; i < cam.scores.rows(); ++i) {
    double best = -1.0;
    int best_c = -1;
    for (Eigen::Index c = 0; c < cam.scores.cols(); ++c) {
      if (!labels[static_cast<size_t>(c)]) continue;  // absent classes are masked out
      if (cam.scores(i, c) > best) {
        best = cam.scores(i, c);
        best_c = static_cast<int>(c);
      }
    }
    if (best_c < 0) {
      out.labels[static_cast<size_t>(i)] = 0;  // no present class at all
    } else if (best >= beta_high) {
      out.labels[static_cast<size_t>(i)] = best_c + 1;  // class ids are 1-based
    } else if (best <= beta_low) {
      out.labels[static_cast<size_t>(i)] = 0;
    } else {
      out.labels[static_cast<size_t>(i)] = kIgnoreIndex;
    }
  }
  return out;
}

}  // namespace fsr
