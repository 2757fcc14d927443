#include "fsr/cam.hpp"

#include "test_util.hpp"

#include <doctest.h>

using namespace fsr;
using fsr::test::random_matrix;

TEST_SUITE_BEGIN("cam");

namespace {

// Straight-line CAM evaluation: raw scores via explicit loops, ReLU, then
// per-channel min-max. Independent of the module implementation.
MatrixXd cam_oracle(const MatrixXd& z, const MatrixXd& w) {
  const Eigen::Index n = z.rows(), c = w.rows(), d = z.cols();
  MatrixXd raw = MatrixXd::Zero(n, c);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < c; ++j) {
      double acc = 0.0;
      for (Eigen::Index k = 0; k < d; ++k) acc += z(i, k) * w(j, k);
      raw(i, j) = acc > 0.0 ? acc : 0.0;
    }
  MatrixXd out = MatrixXd::Zero(n, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    double lo = raw(0, j), hi = raw(0, j);
    for (Eigen::Index i = 1; i < n; ++i) {
      lo = std::min(lo, raw(i, j));
      hi = std::max(hi, raw(i, j));
    }
    if (hi <= 0.0) continue;
    double range = std::max(hi - lo, 1e-8);
    for (Eigen::Index i = 0; i < n; ++i) out(i, j) = (raw(i, j) - lo) / range;
  }
  return out;
}

}  // namespace

TEST_CASE("single channel [2,-1,4] normalizes to [0.5,0,1]") {
  MatrixXd z(3, 1);
  z << 2, -1, 4;
  MatrixXd w(1, 1);
  w << 1;
  Cam cam = compute_cam(z, w, 3, 1);
  CHECK(cam.scores(0, 0) == doctest::Approx(0.5));
  CHECK(cam.scores(1, 0) == doctest::Approx(0.0));
  CHECK(cam.scores(2, 0) == doctest::Approx(1.0));
}

TEST_CASE("all-negative channel stays all-zero") {
  MatrixXd z(4, 1);
  z << -1, -2, -3, -4;
  MatrixXd w(1, 1);
  w << 1;
  Cam cam = compute_cam(z, w, 2, 2);
  CHECK(cam.scores.col(0).norm() == 0.0);
}

TEST_CASE("random instance agrees with the straight-line oracle within 1e-6") {
  Rng rng = make_rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    MatrixXd z = random_matrix(rng, 16, 6);
    MatrixXd w = random_matrix(rng, 3, 6);
    Cam cam = compute_cam(z, w, 4, 4);
    MatrixXd oracle = cam_oracle(z, w);
    CHECK((cam.scores - oracle).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("cam bounds and per-channel extrema hold on 1000 random inputs") {
  Rng rng = make_rng(22);
  for (int trial = 0; trial < 1000; ++trial) {
    MatrixXd z = random_matrix(rng, 9, 4);
    MatrixXd w = random_matrix(rng, 2, 4);
    Cam cam = compute_cam(z, w, 3, 3);
    CHECK(cam.scores.minCoeff() >= 0.0);
    CHECK(cam.scores.maxCoeff() <= 1.0);
    MatrixXd raw = (z * w.transpose()).cwiseMax(0.0);
    for (int c = 0; c < 2; ++c) {
      if (raw.col(c).maxCoeff() > 0.0) {
        CHECK(cam.scores.col(c).maxCoeff() == doctest::Approx(1.0));
        CHECK(cam.scores.col(c).minCoeff() == doctest::Approx(0.0));
      } else {
        CHECK(cam.scores.col(c).norm() == 0.0);
      }
    }
  }
}

TEST_CASE("pool_class_logits: constants, single token, loop oracle") {
  MatrixXd z = MatrixXd::Ones(5, 3);
  MatrixXd w = MatrixXd::Ones(2, 3) * 2.0;
  VectorXd logits = pool_class_logits(z, w);
  CHECK(logits(0) == doctest::Approx(6.0));
  CHECK(logits(1) == doctest::Approx(6.0));

  Rng rng = make_rng(23);
  MatrixXd z1 = random_matrix(rng, 1, 4);
  MatrixXd w1 = random_matrix(rng, 3, 4);
  VectorXd single = pool_class_logits(z1, w1);
  CHECK((single.transpose() - (z1 * w1.transpose()).row(0)).norm() < 1e-12);

  MatrixXd z4 = random_matrix(rng, 4, 4);
  VectorXd pooled = pool_class_logits(z4, w1);
  for (int c = 0; c < 3; ++c) {
    double acc = 0.0;
    for (int i = 0; i < 4; ++i) acc += z4.row(i).dot(w1.row(c));
    CHECK(pooled(c) == doctest::Approx(acc / 4.0));
  }
}

TEST_CASE("pseudo labels follow the threshold rule at (0.2, 0.7)") {
  Cam cam;
  cam.grid_h = 1;
  cam.grid_w = 3;
  cam.scores = MatrixXd::Zero(3, 2);
  cam.scores(0, 0) = 0.75;  // foreground
  cam.scores(1, 0) = 0.10;  // background
  cam.scores(2, 0) = 0.50;  // uncertain band
  PseudoLabel pl = derive_pseudo_labels(cam, {1, 1}, 0.2, 0.7);
  CHECK(pl.labels[0] == 1);
  CHECK(pl.labels[1] == 0);
  CHECK(pl.labels[2] == kIgnoreIndex);
}

TEST_CASE("boundary scores: exactly beta_h is foreground, exactly beta_l is background") {
  Cam cam;
  cam.grid_h = 1;
  cam.grid_w = 2;
  cam.scores = MatrixXd::Zero(2, 1);
  cam.scores(0, 0) = 0.7;
  cam.scores(1, 0) = 0.2;
  PseudoLabel pl = derive_pseudo_labels(cam, {1}, 0.2, 0.7);
  CHECK(pl.labels[0] == 1);
  CHECK(pl.labels[1] == 0);
}

TEST_CASE("absent classes never appear in pseudo labels") {
  Rng rng = make_rng(24);
  for (int trial = 0; trial < 200; ++trial) {
    MatrixXd z = random_matrix(rng, 16, 5);
    MatrixXd w = random_matrix(rng, 3, 5);
    Cam cam = compute_cam(z, w, 4, 4);
    std::vector<int> present = {1, 0, 1};
    PseudoLabel pl = derive_pseudo_labels(cam, present, 0.2, 0.7);
    for (int l : pl.labels) CHECK(l != 2);  // class id 2 = absent class index 1
  }
}

TEST_CASE("monotonicity: raising a position's max score never sends it to background") {
  Rng rng = make_rng(25);
  for (int trial = 0; trial < 200; ++trial) {
    MatrixXd scores = MatrixXd::Zero(8, 2);
    for (int i = 0; i < 8; ++i)
      for (int c = 0; c < 2; ++c) scores(i, c) = uniform(rng, 0.0, 1.0);
    Cam cam;
    cam.grid_h = 2;
    cam.grid_w = 4;
    cam.scores = scores;
    PseudoLabel before = derive_pseudo_labels(cam, {1, 1}, 0.2, 0.7);

    int pos = uniform_int(rng, 0, 7);
    Eigen::Index arg;
    scores.row(pos).maxCoeff(&arg);
    double boost = uniform(rng, 0.0, 1.0 - scores(pos, arg));
    cam.scores(pos, arg) += boost;
    PseudoLabel after = derive_pseudo_labels(cam, {1, 1}, 0.2, 0.7);

    bool was_fg = before.labels[static_cast<size_t>(pos)] != 0 &&
                  before.labels[static_cast<size_t>(pos)] != kIgnoreIndex;
    bool now_bg = after.labels[static_cast<size_t>(pos)] == 0;
    CHECK_FALSE((was_fg && now_bg));
  }
}

TEST_CASE("derive_pseudo_labels validates thresholds") {
  Cam cam;
  cam.grid_h = cam.grid_w = 1;
  cam.scores = MatrixXd::Zero(1, 1);
  CHECK_THROWS_AS(derive_pseudo_labels(cam, {1}, 0.7, 0.2), ConfigError);
  CHECK_THROWS_AS(derive_pseudo_labels(cam, {1}, 0.0, 0.7), ConfigError);
}

TEST_SUITE_END();
