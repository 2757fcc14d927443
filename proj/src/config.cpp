#include "fsr/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace fsr {

namespace fs = std::filesystem;
using nlohmann::json;

json RunConfig::to_json() const {
  return json{{"data_dir", data_dir},
              {"image_size", image_size},
              {"patch_size", patch_size},
              {"num_classes", num_classes},
              {"train_images", train_images},
              {"val_images", val_images},
              {"dataset_seed", dataset_seed},
              {"embed_dim", embed_dim},
              {"depth", depth},
              {"heads", heads},
              {"ff_dim", ff_dim},
              {"agg_blocks", agg_blocks},
              {"agg_ff_dim", agg_ff_dim},
              {"proj_hidden", proj_hidden},
              {"proj_bottleneck", proj_bottleneck},
              {"proj_dim", proj_dim},
              {"decoder_channels", decoder_channels},
              {"iterations", iterations},
              {"batch_size", batch_size},
              {"base_lr", base_lr},
              {"warmup_iters", warmup_iters},
              {"lr_schedule", lr_schedule},
              {"weight_decay", weight_decay},
              {"lambda1", lambda1},
              {"lambda2", lambda2},
              {"lambda3", lambda3},
              {"lambda4", lambda4},
              {"lambda5", lambda5},
              {"lambda45_decay", lambda45_decay},
              {"mask_ratio", mask_ratio},
              {"beta_low", beta_low},
              {"beta_high", beta_high},
              {"tau_student", tau_student},
              {"tau_teacher", tau_teacher},
              {"center_momentum", center_momentum},
              {"proj_momentum", proj_momentum},
              {"enc_momentum", enc_momentum},
              {"masking", masking},
              {"aggregation", aggregation},
              {"max_affinity_pairs", max_affinity_pairs},
              {"seed", seed},
              {"threads", threads},
              {"run_dir", run_dir},
              {"eval_split", eval_split},
              {"analyze_images", analyze_images},
              {"checkpoint_every", checkpoint_every}};
}

namespace {

template <typename T>
void read_field(const json& j, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' has the wrong type");
  }
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  RunConfig cfg;
  const json known = cfg.to_json();
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key()))
      throw ConfigError("unknown config key '" + it.key() + "'");

  read_field(j, "data_dir", cfg.data_dir);
  read_field(j, "image_size", cfg.image_size);
  read_field(j, "patch_size", cfg.patch_size);
  read_field(j, "num_classes", cfg.num_classes);
  read_field(j, "train_images", cfg.train_images);
  read_field(j, "val_images", cfg.val_images);
  read_field(j, "dataset_seed", cfg.dataset_seed);
  read_field(j, "embed_dim", cfg.embed_dim);
  read_field(j, "depth", cfg.depth);
  read_field(j, "heads", cfg.heads);
  read_field(j, "ff_dim", cfg.ff_dim);
  read_field(j, "agg_blocks", cfg.agg_blocks);
  read_field(j, "agg_ff_dim", cfg.agg_ff_dim);
  read_field(j, "proj_hidden", cfg.proj_hidden);
  read_field(j, "proj_bottleneck", cfg.proj_bottleneck);
  read_field(j, "proj_dim", cfg.proj_dim);
  read_field(j, "decoder_channels", cfg.decoder_channels);
  read_field(j, "iterations", cfg.iterations);
  read_field(j, "batch_size", cfg.batch_size);
  read_field(j, "base_lr", cfg.base_lr);
  read_field(j, "warmup_iters", cfg.warmup_iters);
  read_field(j, "lr_schedule", cfg.lr_schedule);
  read_field(j, "weight_decay", cfg.weight_decay);
  read_field(j, "lambda1", cfg.lambda1);
  read_field(j, "lambda2", cfg.lambda2);
  read_field(j, "lambda3", cfg.lambda3);
  read_field(j, "lambda4", cfg.lambda4);
  read_field(j, "lambda5", cfg.lambda5);
  read_field(j, "lambda45_decay", cfg.lambda45_decay);
  read_field(j, "mask_ratio", cfg.mask_ratio);
  read_field(j, "beta_low", cfg.beta_low);
  read_field(j, "beta_high", cfg.beta_high);
  read_field(j, "tau_student", cfg.tau_student);
  read_field(j, "tau_teacher", cfg.tau_teacher);
  read_field(j, "center_momentum", cfg.center_momentum);
  read_field(j, "proj_momentum", cfg.proj_momentum);
  read_field(j, "enc_momentum", cfg.enc_momentum);
  read_field(j, "masking", cfg.masking);
  read_field(j, "aggregation", cfg.aggregation);
  read_field(j, "max_affinity_pairs", cfg.max_affinity_pairs);
  read_field(j, "seed", cfg.seed);
  read_field(j, "threads", cfg.threads);
  read_field(j, "run_dir", cfg.run_dir);
  read_field(j, "eval_split", cfg.eval_split);
  read_field(j, "analyze_images", cfg.analyze_images);
  read_field(j, "checkpoint_every", cfg.checkpoint_every);
  cfg.validate();
  return cfg;
}

void RunConfig::validate() const {
  if (data_dir.empty()) throw ConfigError("data_dir must not be empty");
  if (image_size < 8) throw ConfigError("image_size must be at least 8");
  if (patch_size < 1) throw ConfigError("patch_size must be positive");
  if (image_size % patch_size != 0)
    throw ConfigError("image_size " + std::to_string(image_size) +
                      " must be a multiple of patch_size " + std::to_string(patch_size));
  if (num_classes < 1) throw ConfigError("num_classes must be at least 1");
  if (train_images < 1 || val_images < 1)
    throw ConfigError("train_images and val_images must be positive");
  if (masking != "uncertain" && masking != "random" && masking != "none")
    throw ConfigError("masking must be one of: uncertain, random, none (got '" + masking + "')");
  if (aggregation != "mca" && aggregation != "gap" && aggregation != "gmp")
    throw ConfigError("aggregation must be one of: mca, gap, gmp (got '" + aggregation + "')");
  if (lr_schedule != "cosine" && lr_schedule != "polynomial")
    throw ConfigError("lr_schedule must be 'cosine' or 'polynomial' (got '" + lr_schedule + "')");
  if (eval_split != "train" && eval_split != "val")
    throw ConfigError("eval_split must be 'train' or 'val'");
  if (analyze_images < 1) throw ConfigError("analyze_images must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  train_config().validate();  // numeric training-field checks
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.iterations = iterations;
  t.batch_size = batch_size;
  t.base_lr = base_lr;
  t.warmup_iters = warmup_iters;
  t.lr_schedule = lr_schedule == "polynomial" ? LrScheduleKind::kPolynomial
                                              : LrScheduleKind::kCosine;
  t.weight_decay = weight_decay;
  t.lambdas = {lambda1, lambda2, lambda3, lambda4, lambda5};
  t.lambda45_cosine_decay = lambda45_decay;
  t.mask_ratio = mask_ratio;
  t.beta_low = beta_low;
  t.beta_high = beta_high;
  t.tau_student = tau_student;
  t.tau_teacher = tau_teacher;
  t.center_momentum = center_momentum;
  t.proj_momentum = proj_momentum;
  t.enc_momentum = enc_momentum;
  t.masking = masking == "random"  ? MaskingStrategy::kRandom
              : masking == "none"  ? MaskingStrategy::kNone
                                   : MaskingStrategy::kUncertain;
  t.aggregation = aggregation == "gap"   ? AggregationKind::kGap
                  : aggregation == "gmp" ? AggregationKind::kGmp
                                         : AggregationKind::kMca;
  t.max_affinity_pairs = max_affinity_pairs;
  t.num_classes = num_classes;
  t.encoder = EncoderConfig{image_size, patch_size, embed_dim, depth, heads, ff_dim};
  t.agg_blocks = agg_blocks;
  t.agg_ff_dim = agg_ff_dim;
  t.proj_hidden = proj_hidden;
  t.proj_bottleneck = proj_bottleneck;
  t.proj_dim = proj_dim;
  t.decoder_channels = decoder_channels;
  t.seed = seed;
  t.threads = threads;
  return t;
}

synthdata::DatasetConfig RunConfig::dataset_config() const {
  synthdata::DatasetConfig d;
  d.root = data_dir;
  d.image_size = image_size;
  d.num_classes = num_classes;
  d.train_images = train_images;
  d.val_images = val_images;
  d.seed = dataset_seed;
  d.patch_size = patch_size;
  return d;
}

fs::path RunConfig::resolved_run_dir() const {
  const char* env = std::getenv("FSR_RUN_DIR");
  fs::path root = env && *env ? fs::path(env) : fs::path("runs");
  if (run_dir.empty()) {
    char name[64];
    std::snprintf(name, sizeof(name), "run_seed%llu_%s",
                  static_cast<unsigned long long>(seed), config_hash(*this).substr(0, 8).c_str());
    return root / name;
  }
  fs::path rd(run_dir);
  return rd.is_absolute() ? rd : root / rd;
}

void apply_override(json& j, const std::string& keyval) {
  auto eq = keyval.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key=value (got '" + keyval + "')");
  const std::string key = keyval.substr(0, eq);
  const std::string value = keyval.substr(eq + 1);
  // Parse the value as JSON when possible (numbers, booleans), otherwise as a
  // bare string; dotted keys address nested objects.
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;

  json* target = &j;
  std::string remaining = key;
  size_t dot;
  while ((dot = remaining.find('.')) != std::string::npos) {
    std::string head = remaining.substr(0, dot);
    if (!target->contains(head)) throw ConfigError("unknown config key '" + key + "'");
    target = &(*target)[head];
    remaining = remaining.substr(dot + 1);
  }
  (*target)[remaining] = parsed;
}

RunConfig load_run_config(const fs::path& file, const std::vector<std::string>& overrides) {
  std::ifstream f(file);
  if (!f) throw ConfigError("cannot open config file: " + file.string());
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + file.string());
  for (const auto& o : overrides) apply_override(j, o);
  return RunConfig::from_json(j);
}

std::string config_hash(const RunConfig& cfg) {
  const std::string dump = cfg.to_json().dump();
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fsr
