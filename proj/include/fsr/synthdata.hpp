#pragma once

// Synthetic multi-object shapes dataset: textured-noise backgrounds with
// overlapping circle/square/triangle instances. Image-level labels drive
// training; pixel masks are written for evaluation only.

#include "fsr/common.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fsr::synthdata {

struct DatasetConfig {
  std::string root;
  int image_size = 64;
  int num_classes = 3;  // circle=1, square=2, triangle=3
  int train_images = 500;
  int val_images = 100;
  uint64_t seed = 1234;
  int patch_size = 8;  // image_size must be a multiple of this
};

struct LabeledImage {
  int id = 0;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;        // H*W*3, channel-minor, values in [0,1]
  std::vector<uint8_t> gt_mask;     // H*W, values in {0..C}; empty if not loaded
  std::vector<int> labels;          // length C multi-hot
};

struct ViewPair {
  int size = 0;                     // S
  std::vector<float> view1;         // S*S*3
  std::vector<float> view2;
  std::vector<int> labels;
};

struct AugmentConfig {
  double scale_min = 0.32;
  double scale_max = 1.0;
  double ratio_min = 0.75;
  double ratio_max = 4.0 / 3.0;
  bool flip = true;
  bool color_jitter = true;
  int out_size = 64;
};

struct ShapeSpec {
  int cls = 1;        // 1=circle, 2=square, 3=triangle
  double cx = 0.0;    // center, pixels
  double cy = 0.0;
  double half = 8.0;  // radius / half-extent
  float color[3] = {0.5f, 0.5f, 0.5f};
};

// Rasterizes background + shapes (draw order = occlusion order) and derives
// the label vector from the classes actually visible in the mask.
LabeledImage render_scene(int image_size, int num_classes, const std::vector<ShapeSpec>& shapes,
                          uint64_t background_seed);

void generate_dataset(const DatasetConfig& config);

std::vector<LabeledImage> load_dataset(const std::filesystem::path& root,
                                       const std::string& split);

// Seed-controlled shuffled index order for one training epoch.
std::vector<int> epoch_order(int count, uint64_t seed, int epoch);

ViewPair augment_two_views(const LabeledImage& img, const AugmentConfig& cfg, Rng& rng);

// Single augmented view; exposed for the flip-frequency and identity checks.
std::vector<float> augment_view(const LabeledImage& img, const AugmentConfig& cfg, Rng& rng);

// Bilinear resize of a H×W×3 buffer to S×S (half-pixel centers convention).
std::vector<float> resize_bilinear(const std::vector<float>& src, int h, int w, int out);

struct DatasetMeta {
  int image_size = 0;
  int num_classes = 0;
  std::vector<std::string> class_names;
  uint64_t seed = 0;
};

DatasetMeta load_meta(const std::filesystem::path& root);

}  // namespace fsr::synthdata
