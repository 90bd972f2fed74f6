#pragma once

#include "maskdiff/config.hpp"
#include "maskdiff/trainer.hpp"

#include <string>

namespace maskdiff {

// Self-describing binary checkpoint: a JSON header (config, phase, step,
// named tensor table) followed by raw little-endian doubles per tensor.
void save_checkpoint(const std::string& path, const RunConfig& cfg, const TrainState& state);

struct LoadedCheckpoint {
  RunConfig config;
  TrainState state;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace maskdiff
