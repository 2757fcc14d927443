#pragma once

// Flat JSON run configuration: dataset + training + eval options with CLI
// `--set key=value` overrides. Unknown keys are rejected with the offending
// name; every field is validated with an explicit message.

#include "fsr/synthdata.hpp"
#include "fsr/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace fsr {

struct RunConfig {
  // dataset
  std::string data_dir = "data";
  int image_size = 64;
  int patch_size = 8;
  int num_classes = 3;
  int train_images = 500;
  int val_images = 100;
  uint64_t dataset_seed = 1234;

  // model
  int embed_dim = 64;
  int depth = 4;
  int heads = 4;
  int ff_dim = 128;
  int agg_blocks = 2;
  int agg_ff_dim = 128;
  int proj_hidden = 256;
  int proj_bottleneck = 64;
  int proj_dim = 256;
  int decoder_channels = 64;

  // training
  int iterations = 3000;
  int batch_size = 8;
  double base_lr = 6e-5;
  int warmup_iters = 300;
  std::string lr_schedule = "cosine";  // or "polynomial"
  double weight_decay = 0.01;
  double lambda1 = 1.0, lambda2 = 0.2, lambda3 = 0.1, lambda4 = 0.1, lambda5 = 0.1;
  bool lambda45_decay = false;
  double mask_ratio = 0.4;
  double beta_low = 0.2;
  double beta_high = 0.7;
  double tau_student = 0.1;
  double tau_teacher = 0.04;
  double center_momentum = 0.9;
  double proj_momentum = 0.996;
  double enc_momentum = 0.0;
  std::string masking = "uncertain";     // uncertain | random | none
  std::string aggregation = "mca";       // mca | gap | gmp
  int max_affinity_pairs = 512;
  uint64_t seed = 0;
  int threads = 1;

  // outputs / eval
  std::string run_dir;  // empty -> derived under the run root
  std::string eval_split = "val";
  int analyze_images = 16;
  int checkpoint_every = 0;  // 0 = final checkpoint only

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);  // rejects unknown keys
  void validate() const;

  TrainConfig train_config() const;
  synthdata::DatasetConfig dataset_config() const;

  // Output root: $FSR_RUN_DIR when set, else "runs"; run_dir when relative is
  // placed under the root.
  std::filesystem::path resolved_run_dir() const;
};

RunConfig load_run_config(const std::filesystem::path& file,
                          const std::vector<std::string>& overrides);

// Applies one "key=value" override to the flat JSON object.
void apply_override(nlohmann::json& j, const std::string& keyval);

// FNV-1a hash (hex) of the canonical JSON dump.
std::string config_hash(const RunConfig& cfg);

}  // namespace fsr
