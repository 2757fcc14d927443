#include "fsr/synthdata.hpp"

#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace fsr;
using namespace fsr::synthdata;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("synthdata");

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("fsr_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<char>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

DatasetConfig small_config(const fs::path& root) {
  DatasetConfig cfg;
  cfg.root = root.string();
  cfg.train_images = 20;
  cfg.val_images = 5;
  cfg.seed = 77;
  return cfg;
}

}  // namespace

TEST_CASE("render_scene: circle-only image has labels [1,0,0]") {
  ShapeSpec circle;
  circle.cls = 1;
  circle.cx = 32;
  circle.cy = 32;
  circle.half = 10;
  LabeledImage img = render_scene(64, 3, {circle}, 42);
  CHECK(img.labels == std::vector<int>{1, 0, 0});
  for (float p : img.pixels) {
    CHECK(p >= 0.0f);
    CHECK(p <= 1.0f);
  }
}

TEST_CASE("render_scene: fully occluded shape drops out of the labels") {
  ShapeSpec small;
  small.cls = 1;
  small.cx = 32;
  small.cy = 32;
  small.half = 4;
  ShapeSpec big;
  big.cls = 2;
  big.cx = 32;
  big.cy = 32;
  big.half = 14;  // covers the circle completely
  LabeledImage img = render_scene(64, 3, {small, big}, 7);
  CHECK(img.labels == std::vector<int>{0, 1, 0});
}

TEST_CASE("generate_dataset is deterministic: same seed, byte-identical output") {
  fs::path a = temp_dir("gen_a");
  fs::path b = temp_dir("gen_b");
  generate_dataset(small_config(a));
  generate_dataset(small_config(b));

  for (const char* rel : {"train/labels.jsonl", "val/labels.jsonl", "meta.json",
                          "train/images/IMG_000000.bin", "train/masks/IMG_000007.bin",
                          "val/images/IMG_000003.bin"})
    CHECK(slurp(a / rel) == slurp(b / rel));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("generate_dataset: label file row count and at-least-one-class") {
  fs::path root = temp_dir("gen_rows");
  DatasetConfig cfg = small_config(root);
  cfg.train_images = 100;
  generate_dataset(cfg);

  std::ifstream f(root / "train" / "labels.jsonl");
  int rows = 0;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    ++rows;
    CHECK(line.find('1') != std::string::npos);
  }
  CHECK(rows == 100);
  fs::remove_all(root);
}

TEST_CASE("generate_dataset rejects bad geometry and zero classes") {
  DatasetConfig cfg = small_config("unused");
  cfg.image_size = 60;  // not a multiple of 8
  CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
  cfg.image_size = 64;
  cfg.num_classes = 0;
  CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
}

TEST_CASE("round-trip: load_dataset reproduces pixels bit-exactly with consistent labels") {
  fs::path root = temp_dir("roundtrip");
  DatasetConfig cfg = small_config(root);
  generate_dataset(cfg);
  auto imgs = load_dataset(root, "train");
  REQUIRE(static_cast<int>(imgs.size()) == cfg.train_images);

  for (const auto& img : imgs) {
    REQUIRE(img.pixels.size() == 64u * 64 * 3);
    REQUIRE(img.gt_mask.size() == 64u * 64);
    // labels are exactly the classes with nonzero mask area
    std::vector<int> derived(3, 0);
    for (uint8_t m : img.gt_mask)
      if (m > 0) derived[m - 1] = 1;
    CHECK(derived == img.labels);
  }

  auto raw = slurp(root / "train" / "images" / "IMG_000000.bin");
  REQUIRE(raw.size() == imgs[0].pixels.size() * sizeof(float));
  CHECK(std::memcmp(raw.data(), imgs[0].pixels.data(), raw.size()) == 0);
  fs::remove_all(root);
}

TEST_CASE("load_dataset reports the offending entry for malformed label files") {
  fs::path root = temp_dir("badlabels");
  generate_dataset(small_config(root));
  {
    std::ofstream f(root / "train" / "labels.jsonl", std::ios::app);
    f << "{\"id\": 99}\n";
  }
  try {
    load_dataset(root, "train");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 21") != std::string::npos);
  }
  fs::remove_all(root);
}

TEST_CASE("identity augmentation equals bilinear resize of the full image") {
  ShapeSpec sq;
  sq.cls = 2;
  sq.cx = 20;
  sq.cy = 40;
  sq.half = 9;
  LabeledImage img = render_scene(64, 3, {sq}, 3);

  AugmentConfig cfg;
  cfg.scale_min = cfg.scale_max = 1.0;
  cfg.ratio_min = cfg.ratio_max = 1.0;
  cfg.flip = false;
  cfg.color_jitter = false;
  Rng rng = make_rng(5);
  auto view = augment_view(img, cfg, rng);
  auto resized = resize_bilinear(img.pixels, 64, 64, 64);
  REQUIRE(view.size() == resized.size());
  CHECK(view == resized);
  // and a 64 -> 64 bilinear resize is the identity
  CHECK(view == img.pixels);
}

TEST_CASE("augment_two_views: deterministic for a fixed seed, labels unchanged") {
  ShapeSpec tri;
  tri.cls = 3;
  tri.cx = 30;
  tri.cy = 30;
  tri.half = 12;
  LabeledImage img = render_scene(64, 3, {tri}, 9);
  AugmentConfig cfg;

  Rng r1 = make_rng(123);
  Rng r2 = make_rng(123);
  ViewPair a = augment_two_views(img, cfg, r1);
  ViewPair b = augment_two_views(img, cfg, r2);
  CHECK(a.view1 == b.view1);
  CHECK(a.view2 == b.view2);
  CHECK(a.labels == img.labels);
}

TEST_CASE("flip frequency over 1000 draws lies in [0.45, 0.55]") {
  ShapeSpec sq;
  sq.cls = 2;
  sq.cx = 16;
  sq.cy = 32;
  sq.half = 8;  // asymmetric placement so flips are detectable
  LabeledImage img = render_scene(64, 3, {sq}, 11);

  AugmentConfig cfg;
  cfg.scale_min = cfg.scale_max = 1.0;
  cfg.ratio_min = cfg.ratio_max = 1.0;
  cfg.color_jitter = false;
  cfg.flip = true;

  Rng rng = make_rng(2024);
  int flips = 0;
  const int trials = 1000;
  for (int i = 0; i < trials; ++i) {
    auto view = augment_view(img, cfg, rng);
    flips += (view != img.pixels) ? 1 : 0;
  }
  double freq = static_cast<double>(flips) / trials;
  CHECK(freq >= 0.45);
  CHECK(freq <= 0.55);
}

TEST_CASE("epoch order is a seed-controlled permutation") {
  auto o1 = epoch_order(10, 5, 0);
  auto o2 = epoch_order(10, 5, 0);
  auto o3 = epoch_order(10, 5, 1);
  CHECK(o1 == o2);
  CHECK(o1 != o3);
  std::vector<int> sorted = o1;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 10; ++i) CHECK(sorted[static_cast<size_t>(i)] == i);
}

TEST_SUITE_END();
