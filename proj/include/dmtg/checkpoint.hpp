#pragma once

// Training-state checkpoints.
//
// Layout: "DMTGCKPT", u32 version, then a sequence of length-prefixed
// little-endian fields: input dim, architecture, loss kinds, K, fixed
// partition, epoch, plateau state, noise RNG state, Adam hyperparameters and
// step count, every parameter tensor, S, both Adam moment sets, and the
// epoch history. Doubles are stored as raw bits, so loading is bit-exact.

#include <filesystem>
#include <stdexcept>

#include "dmtg/grouping.hpp"

namespace dmtg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

/// True when weights, S, optimizer moments, schedule, RNG and history are all bit-identical.
bool bit_identical(const TrainState& a, const TrainState& b);

}  // namespace dmtg
