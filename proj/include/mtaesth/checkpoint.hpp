#pragma once

#include <array>
#include <string>

#include "mtaesth/network.hpp"

namespace mtaesth {

/// Versioned binary parameter container: magic, version, checksummed
/// architecture echo (plus the preprocessing channel means), then the named
/// tensors in declaration order as 64-bit little-endian doubles.
void save_checkpoint(const std::string& path, const ArchitectureConfig& arch,
                     const std::array<double, 3>& channel_means,
                     const ParamStore& params);

struct Checkpoint {
  ArchitectureConfig arch;
  std::array<double, 3> channel_means{0.0, 0.0, 0.0};
  ParamStore params;  ///< tensors as stored; graph not built
};

Checkpoint load_checkpoint(const std::string& path);

/// Rebuilds the graph for the stored architecture and installs the stored
/// tensors. Throws checkpoint_error listing every mismatched tensor when
/// the checkpoint does not fit the architecture.
std::pair<LayerGraph, ParamStore> restore_graph(const Checkpoint& ckpt);

/// Copies stored tensor values into an existing store (same architecture).
void install_params(const Checkpoint& ckpt, ParamStore& into);

}  // namespace mtaesth
