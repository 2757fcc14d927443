#pragma once

// Checkpoint directory layout: manifest.json (list of {name, shape, dtype}),
// params.bin (concatenated little-endian float64 blobs in manifest order),
// rng.json (iteration, config hash, run seed, optimizer step counters).

#include "fsr/trainer.hpp"

#include <filesystem>
#include <string>

namespace fsr {

void save_checkpoint(const std::filesystem::path& dir, const TrainerState& state,
                     const std::string& config_hash);

// Rebuilds a TrainerState for cfg and overwrites every tensor from the
// checkpoint. When expected_hash is non-empty it must match the stored hash.
TrainerState load_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg,
                             const std::string& expected_hash = "");

}  // namespace fsr
