#include "fsr/tensor.hpp"

#include "test_util.hpp"

#include <doctest.h>

using namespace fsr;
using fsr::test::random_matrix;

TEST_SUITE_BEGIN("tensor");

namespace {

// Finite-difference check for a scalar-valued graph builder.
double graph_fd_error(const std::function<Var(Tape&, const std::vector<Var>&)>& build,
                      std::vector<MatrixXd> inputs, double h = 1e-6) {
  auto eval = [&]() {
    Tape t(false);
    std::vector<Var> vars;
    for (const auto& m : inputs) vars.push_back(t.leaf(m, false));
    return t.val(build(t, vars))(0, 0);
  };
  Tape t(true);
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(t.leaf(m, true));
  Var root = build(t, vars);
  t.backward(root);
  std::vector<MatrixXd> grads;
  for (Var v : vars) grads.push_back(t.grad(v));
  std::vector<std::pair<MatrixXd*, const MatrixXd*>> pairs;
  for (size_t i = 0; i < inputs.size(); ++i) pairs.emplace_back(&inputs[i], &grads[i]);
  return fsr::test::max_grad_rel_error(eval, pairs, h);
}

}  // namespace

TEST_CASE("matmul forward and gradients") {
  Rng rng = make_rng(1);
  MatrixXd a = random_matrix(rng, 3, 4);
  MatrixXd b = random_matrix(rng, 4, 5);
  Tape t;
  Var va = t.leaf(a), vb = t.leaf(b);
  Var c = t.matmul(va, vb);
  CHECK((t.val(c) - a * b).norm() == doctest::Approx(0.0));

  double err = graph_fd_error(
      [](Tape& t, const std::vector<Var>& v) { return t.mean_all(t.matmul(v[0], v[1])); },
      {a, b});
  CHECK(err < 1e-7);
}

TEST_CASE("elementwise ops gradients") {
  Rng rng = make_rng(2);
  MatrixXd a = random_matrix(rng, 4, 3);
  MatrixXd b = random_matrix(rng, 4, 3);
  b.array() += 2.5;  // keep divisors away from zero

  double err = graph_fd_error(
      [](Tape& t, const std::vector<Var>& v) {
        Var x = t.cmul(v[0], v[1]);
        Var y = t.cdiv(v[0], v[1]);
        Var z = t.sub(t.add(x, y), t.scale(v[0], 0.3));
        return t.mean_all(t.cmul(z, z));
      },
      {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("activations gradients") {
  Rng rng = make_rng(3);
  MatrixXd a = random_matrix(rng, 5, 4, 2.0);
  double err = graph_fd_error(
      [](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.add(t.gelu(v[0]), t.relu(v[0])));
      },
      {a});
  CHECK(err < 1e-5);
}

TEST_CASE("softmax rows sum to one and gradients match") {
  Rng rng = make_rng(4);
  MatrixXd a = random_matrix(rng, 6, 8, 3.0);
  Tape t;
  Var p = t.softmax_rows(t.leaf(a, false));
  for (Eigen::Index i = 0; i < 6; ++i)
    CHECK(t.val(p).row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));

  MatrixXd w = random_matrix(rng, 6, 8);
  double err = graph_fd_error(
      [&](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.cmul(t.softmax_rows(v[0]), t.constant(w)));
      },
      {a});
  CHECK(err < 1e-6);
}

TEST_CASE("masked softmax: excluded columns are exactly zero") {
  Rng rng = make_rng(5);
  MatrixXd a = random_matrix(rng, 3, 6, 2.0);
  std::vector<uint8_t> excluded = {0, 1, 0, 1, 1, 0};
  Tape t;
  Var p = t.softmax_rows_excluding(t.leaf(a, false), excluded);
  for (Eigen::Index i = 0; i < 3; ++i) {
    CHECK(t.val(p)(i, 1) == 0.0);
    CHECK(t.val(p)(i, 3) == 0.0);
    CHECK(t.val(p)(i, 4) == 0.0);
    CHECK(t.val(p).row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
  }

  std::vector<uint8_t> all(6, 1);
  CHECK_THROWS_AS(t.softmax_rows_excluding(t.leaf(a, false), all), NumericError);

  MatrixXd w = random_matrix(rng, 3, 6);
  double err = graph_fd_error(
      [&](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.cmul(t.softmax_rows_excluding(v[0], excluded), t.constant(w)));
      },
      {a});
  CHECK(err < 1e-6);
}

TEST_CASE("layernorm rows gradient") {
  Rng rng = make_rng(6);
  MatrixXd x = random_matrix(rng, 4, 6, 2.0);
  MatrixXd g = random_matrix(rng, 1, 6);
  MatrixXd b = random_matrix(rng, 1, 6);
  MatrixXd w = random_matrix(rng, 4, 6);
  double err = graph_fd_error(
      [&](Tape& t, const std::vector<Var>& v) {
        return t.mean_all(t.cmul(t.layernorm_rows(v[0], v[1], v[2]), t.constant(w)));
      },
      {x, g, b});
  CHECK(err < 1e-5);
}

TEST_CASE("linear, slicing, concat, reductions") {
  Rng rng = make_rng(7);
  MatrixXd x = random_matrix(rng, 5, 4);
  MatrixXd w = random_matrix(rng, 3, 4);
  MatrixXd b = random_matrix(rng, 1, 3);
  double err = graph_fd_error(
      [](Tape& t, const std::vector<Var>& v) {
        Var y = t.linear(v[0], v[1], v[2]);
        Var top = t.slice_rows(y, 0, 2);
        Var rest = t.slice_rows(y, 2, 3);
        Var cat = t.concat_rows(rest, top);
        Var gathered = t.gather_rows(cat, {0, 0, 4, 2});
        return t.sum_all(t.cmul(gathered, gathered));
      },
      {x, w, b});
  CHECK(err < 1e-6);
}

TEST_CASE("scale_rows / rows_l2norm / colwise_max gradients") {
  Rng rng = make_rng(8);
  MatrixXd x = random_matrix(rng, 4, 5, 1.5);
  x.array() += 3.0;  // keep norms well away from zero
  MatrixXd s = random_matrix(rng, 4, 1);
  s.array() += 2.0;
  double err = graph_fd_error(
      [](Tape& t, const std::vector<Var>& v) {
        Var scaled = t.scale_rows(v[0], v[1]);
        Var n = t.rows_l2norm(scaled);
        Var m = t.colwise_max_subset(scaled, {0, 2, 3});
        return t.add(t.sum_all(n), t.sum_all(m));
      },
      {x, s});
  CHECK(err < 1e-5);
}

TEST_CASE("mhsa matches single-head manual computation and gradients") {
  Rng rng = make_rng(9);
  MatrixXd q = random_matrix(rng, 4, 6);
  MatrixXd k = random_matrix(rng, 4, 6);
  MatrixXd v = random_matrix(rng, 4, 6);

  Tape t;
  Var out = t.mhsa(t.leaf(q, false), t.leaf(k, false), t.leaf(v, false), 1);
  MatrixXd s = q * k.transpose() / std::sqrt(6.0);
  MatrixXd p(4, 4);
  for (int i = 0; i < 4; ++i) {
    Eigen::ArrayXd e = (s.row(i).array() - s.row(i).maxCoeff()).exp();
    p.row(i) = e / e.sum();
  }
  CHECK((t.val(out) - p * v).norm() < 1e-12);

  MatrixXd w = random_matrix(rng, 4, 6);
  double err = graph_fd_error(
      [&](Tape& t, const std::vector<Var>& vars) {
        return t.mean_all(t.cmul(t.mhsa(vars[0], vars[1], vars[2], 2), t.constant(w)));
      },
      {q, k, v});
  CHECK(err < 1e-6);

  std::vector<MatrixXd> attn;
  Tape t2;
  t2.mhsa(t2.leaf(q, false), t2.leaf(k, false), t2.leaf(v, false), 2, &attn);
  REQUIRE(attn.size() == 2);
  for (const auto& a : attn)
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      CHECK(a.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("conv3x3_grid gradient and zero padding") {
  Rng rng = make_rng(10);
  const int H = 4, W = 5, cin = 3, cout = 2;
  MatrixXd x = random_matrix(rng, H * W, cin);
  MatrixXd w = random_matrix(rng, cout, cin * 9);
  MatrixXd b = random_matrix(rng, 1, cout);

  double err = graph_fd_error(
      [&](Tape& t, const std::vector<Var>& v) {
        Var y = t.conv3x3_grid(v[0], v[1], v[2], H, W, 2);
        return t.sum_all(t.cmul(y, y));
      },
      {x, w, b});
  CHECK(err < 1e-6);

  // zero weights -> bias everywhere
  Tape t;
  Var y = t.conv3x3_grid(t.leaf(x, false), t.constant(MatrixXd::Zero(cout, cin * 9)),
                         t.constant(b), H, W, 2);
  for (Eigen::Index i = 0; i < H * W; ++i) CHECK((t.val(y).row(i) - b.row(0)).norm() == 0.0);
}

TEST_CASE("loss ops: bce, indexed ce, soft ce, cosine pairs") {
  Rng rng = make_rng(11);

  MatrixXd logits = random_matrix(rng, 1, 4, 2.0);
  VectorXd targets(4);
  targets << 1, 0, 1, 0;
  double err = graph_fd_error(
      [&](Tape& t, const std::vector<Var>& v) { return t.bce_multilabel(v[0], targets); },
      {logits});
  CHECK(err < 1e-6);

  MatrixXd seg = random_matrix(rng, 6, 3, 2.0);
  std::vector<int> labels = {0, 2, 255, 1, 255, 0};
  err = graph_fd_error(
      [&](Tape& t, const std::vector<Var>& v) { return t.ce_indexed(v[0], labels, 255); },
      {seg});
  CHECK(err < 1e-6);

  MatrixXd x = random_matrix(rng, 5, 4, 1.0);
  MatrixXd tprob(5, 4);
  for (int i = 0; i < 5; ++i) {
    Eigen::ArrayXd e = random_matrix(rng, 1, 4).array().exp();
    tprob.row(i) = e / e.sum();
  }
  VectorXd wts(5);
  wts << 1, 0, 1, 1, 0;
  err = graph_fd_error(
      [&](Tape& t, const std::vector<Var>& v) {
        return t.ce_soft_rows(t.softmax_rows(v[0]), tprob, wts);
      },
      {x});
  CHECK(err < 1e-6);

  MatrixXd z = random_matrix(rng, 6, 5, 1.0);
  z.array() += 0.5;
  std::vector<AffinityPair> pairs = {{0, 1, 1.0}, {2, 3, 0.0}, {4, 5, 1.0}, {0, 5, 0.0}};
  err = graph_fd_error(
      [&](Tape& t, const std::vector<Var>& v) { return t.cosine_pair_loss(v[0], pairs); },
      {z});
  CHECK(err < 1e-5);
}

TEST_CASE("gradients accumulate across repeated use of one leaf") {
  MatrixXd a(1, 1);
  a << 2.0;
  Tape t;
  Var v = t.leaf(a);
  Var y = t.add(t.cmul(v, v), v);  // y = a^2 + a, dy/da = 2a + 1 = 5
  t.backward(t.sum_all(y));
  CHECK(t.grad(v)(0, 0) == doctest::Approx(5.0));
}

TEST_CASE("no-grad tape computes values only") {
  Tape t(false);
  Var v = t.leaf(MatrixXd::Ones(2, 2), true);
  Var y = t.sum_all(v);
  CHECK(t.val(y)(0, 0) == 4.0);
  CHECK_THROWS_AS(t.backward(y), NumericError);
}

TEST_SUITE_END();
