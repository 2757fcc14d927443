#include "fsr/encoder.hpp"

#include "test_util.hpp"

#include <doctest.h>

using namespace fsr;
using fsr::test::random_matrix;

TEST_SUITE_BEGIN("encoder");

namespace {

EncoderParams tiny_encoder(int image_size, int patch, int dim, int depth, int heads,
                           uint64_t seed = 1) {
  EncoderConfig cfg{image_size, patch, dim, depth, heads, dim * 2};
  Rng rng = make_rng(seed);
  return EncoderParams::init(cfg, rng);
}

void zero_all(EncoderParams& p) {
  p.visit("", [](const std::string&, MatrixXd& m) { m.setZero(); });
}

}  // namespace

TEST_CASE("patchify token counts: 448/16 -> 784, S=P -> 1") {
  std::vector<float> big(448 * 448 * 3, 0.25f);
  MatrixXd patches = patchify(big, 448, 16);
  CHECK(patches.rows() == 784);
  CHECK(patches.cols() == 16 * 16 * 3);

  std::vector<float> one(8 * 8 * 3, 0.5f);
  CHECK(patchify(one, 8, 8).rows() == 1);

  CHECK_THROWS_AS(patchify(one, 8, 3), NumericError);
}

TEST_CASE("zero image with zero embeddings yields all-zero tokens") {
  EncoderParams p = tiny_encoder(16, 8, 8, 1, 2);
  p.patch_proj.setZero();
  p.patch_bias.setZero();
  p.pos.setZero();
  std::vector<float> img(16 * 16 * 3, 0.0f);
  MatrixXd tokens = patchify_embed(img, p);
  CHECK(tokens.rows() == 4);
  CHECK(tokens.norm() == 0.0);
}

TEST_CASE("patchify_embed adds position embeddings linearly") {
  EncoderParams p = tiny_encoder(16, 8, 8, 1, 2, 3);
  std::vector<float> img(16 * 16 * 3, 0.0f);
  MatrixXd tokens = patchify_embed(img, p);
  MatrixXd expected = p.pos;  // zero pixels -> projection contributes bias only
  expected.rowwise() += p.patch_bias.row(0);
  CHECK((tokens - expected).norm() < 1e-12);
}

TEST_CASE("depth 0 forward is the identity") {
  EncoderParams p = tiny_encoder(16, 8, 8, 0, 2);
  Rng rng = make_rng(9);
  MatrixXd tokens = random_matrix(rng, 4, 8);
  MatrixXd z = transformer_forward(tokens, p);
  CHECK((z - tokens).norm() == 0.0);
}

TEST_CASE("residual identity: all weights zero -> forward is the identity") {
  EncoderParams p = tiny_encoder(16, 8, 8, 3, 2);
  zero_all(p);
  Rng rng = make_rng(10);
  MatrixXd tokens = random_matrix(rng, 4, 8);
  MatrixXd z = transformer_forward(tokens, p);
  CHECK((z - tokens).norm() == 0.0);
}

TEST_CASE("attention rows are probability vectors at every layer and head") {
  EncoderParams p = tiny_encoder(32, 8, 16, 3, 4, 11);
  Rng rng = make_rng(12);
  MatrixXd tokens = random_matrix(rng, 16, 16);
  AttentionCapture cap = capture_attention(tokens, p);
  REQUIRE(cap.layers.size() == 3);
  for (const auto& layer : cap.layers) {
    REQUIRE(layer.size() == 4);
    for (const auto& head : layer)
      for (Eigen::Index i = 0; i < head.rows(); ++i) {
        CHECK(head.row(i).minCoeff() >= 0.0);
        CHECK(head.row(i).sum() == doctest::Approx(1.0).epsilon(1e-6));
      }
  }
}

TEST_CASE("permutation equivariance on a 4-token instance") {
  EncoderParams p = tiny_encoder(16, 8, 8, 2, 2, 13);
  Rng rng = make_rng(14);
  MatrixXd tokens = random_matrix(rng, 4, 8);

  std::vector<int> perm = {2, 0, 3, 1};
  MatrixXd permuted(4, 8);
  for (int i = 0; i < 4; ++i) permuted.row(i) = tokens.row(perm[static_cast<size_t>(i)]);

  MatrixXd z = transformer_forward(tokens, p);
  MatrixXd zp = transformer_forward(permuted, p);
  for (int i = 0; i < 4; ++i)
    CHECK((zp.row(i) - z.row(perm[static_cast<size_t>(i)])).norm() < 1e-9);
}

TEST_CASE("non-finite activations raise a NumericError naming the layer") {
  EncoderParams p = tiny_encoder(16, 8, 8, 2, 2, 15);
  p.layers[1].ff2.array() = std::numeric_limits<double>::infinity();
  Rng rng = make_rng(16);
  MatrixXd tokens = random_matrix(rng, 4, 8);
  try {
    transformer_forward(tokens, p);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("init validates head divisibility and patch geometry") {
  Rng rng = make_rng(17);
  EncoderConfig bad{16, 8, 10, 1, 4, 20};  // 10 % 4 != 0
  CHECK_THROWS_AS(EncoderParams::init(bad, rng), ConfigError);
  EncoderConfig bad2{17, 8, 8, 1, 2, 16};
  CHECK_THROWS_AS(EncoderParams::init(bad2, rng), ConfigError);
}

TEST_CASE("visit order matches leaf order") {
  EncoderParams p = tiny_encoder(16, 8, 8, 2, 2, 18);
  Tape tape(false);
  size_t start = tape.size();
  leaf_encoder(tape, p, false);
  std::vector<std::string> names;
  std::vector<const MatrixXd*> mats;
  p.visit("", [&](const std::string& n, MatrixXd& m) {
    names.push_back(n);
    mats.push_back(&m);
  });
  REQUIRE(tape.size() - start == names.size());
  for (size_t i = 0; i < names.size(); ++i) {
    Var v{static_cast<int32_t>(start + i)};
    CHECK(tape.val(v).rows() == mats[i]->rows());
    CHECK(tape.val(v).cols() == mats[i]->cols());
    CHECK((tape.val(v) - *mats[i]).norm() == 0.0);
  }
}

TEST_SUITE_END();
