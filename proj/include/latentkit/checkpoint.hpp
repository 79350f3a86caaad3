#pragma once

#include <span>
#include <string>
#include <vector>

#include "latentkit/param.hpp"

namespace latentkit {

// Named-tensor container: magic + version, a JSON manifest with names, shapes
// and payload offsets, then raw little-endian 64-bit values. Byte layout is
// pinned, so files are bit-exact across platforms.
void save_checkpoint(const std::string& path, std::span<Param* const> params);

// Loads by name into the given params; shapes must match.
void load_checkpoint(const std::string& path, std::span<Param* const> params);

struct CheckpointEntry {
    std::string name;
    std::vector<int64_t> shape;
};

std::vector<CheckpointEntry> checkpoint_manifest(const std::string& path);

} // namespace latentkit
