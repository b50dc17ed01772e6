#pragma once

#include <string>

#include "evalnet/model.hpp"

namespace evalnet {

struct CheckpointMeta {
    int stage = 1;
    int epoch = 0;
    double validation_rmse_log = 0.0;
};

struct Checkpoint {
    Model model;
    CheckpointMeta meta;
};

// File layout: 8-byte magic "EVCKPT01", u32 little-endian manifest length,
// UTF-8 JSON manifest {format_version, stage, epoch, validation_rmse_log,
// config, tensors:[{name, shape, offset, len}]}, then concatenated float32
// little-endian parameter blobs; offsets are relative to the blob section.
void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace evalnet
