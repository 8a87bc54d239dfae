#pragma once

#include <string>

#include "iomm/trainer.hpp"

// Checkpoint directory: manifest.json (format_version, step, config digest,
// rng cursors, tensor index name -> {dtype, shape, file, offset}) plus
// weights.bin with the little-endian tensor payload. Trainable weights and
// Adam moments are f32; the EMA shadow is f64. Loading restores the state
// exactly, including optimizer moments, EMA, and rng cursors.

namespace iomm {

constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(TrainState& state, const std::string& dir);

// Rebuilds the model from `cfg` and fills it from the checkpoint. Shape
// compatibility is checked tensor-by-tensor (the first mismatch is named);
// then the stored config digest must equal `expected_digest` unless
// `allow_digest_mismatch` is set (used for cross-recipe warm starts).
TrainState load_checkpoint(const std::string& dir, const ModelConfig& cfg,
                           const std::string& expected_digest,
                           bool allow_digest_mismatch = false);

int64_t checkpoint_step(const std::string& dir);  // peek without loading tensors

}  // namespace iomm
