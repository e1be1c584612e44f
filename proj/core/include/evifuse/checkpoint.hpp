#pragma once

#include <cstdint>
#include <string>

#include "evifuse/model.hpp"

namespace evifuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary model file: magic "EVF1", version, a JSON metadata blob (network
// shape, partitions, parameter count), then every parameter tensor in
// store order as (name, shape, row-major little-endian doubles). Values
// survive save/load bit-exactly; saving a loaded model reproduces the file
// byte for byte.
void save_checkpoint(const EIFModel& model, const std::string& path);
void save_checkpoint(const BaselineModel& model, const std::string& path);

enum class CheckpointKind { kEif, kBaseline };

// Reads only the header; throws LoadError on anything unrecognizable.
CheckpointKind peek_checkpoint_kind(const std::string& path);

EIFModel load_eif_checkpoint(const std::string& path);
BaselineModel load_baseline_checkpoint(const std::string& path);

// Warm start: copies the feature-layer weights of one branch onto another
// (heads stay untouched). Widths must agree.
void copy_branch_backbone(const EIFModel& source, int source_branch, EIFModel& dest,
                          int dest_branch);

}  // namespace evifuse
