#pragma once

#include <string>

#include "fpg/config.hpp"
#include "fpg/trainer.hpp"

namespace fpg {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kBlobName = "state.bin";

// Writes `dir`/manifest.json and `dir`/state.bin. The manifest lists every
// blob section (name, shape, offset) in order; the blob holds little-endian
// float64 values: network parameters and buffers, optimizer moments, α rows
// and fusion logits. Randomness is fully described by the seed and step.
void save_checkpoint(const Searcher& s, const std::string& dir);

// Config stored in a checkpoint manifest. Throws DataError when unreadable.
SearchConfig checkpoint_config(const std::string& dir);

// Restores a searcher built from checkpoint_config(dir). Throws DataError on
// any mismatch between the manifest, the blob and the searcher's layout.
void load_checkpoint(Searcher& s, const std::string& dir);

// Builds a searcher and restores it from `dir`.
Searcher resume_search(const std::string& dir);

// Gate state of a checkpoint, without rebuilding the network.
struct CheckpointGates {
  SearchConfig config;
  GateParams gates;
  double gamma = 1.0;  // DNAL sharpness at the saved step
  double tau = 1.0;    // Gumbel-Softmax temperature at the saved step
};
CheckpointGates load_checkpoint_gates(const std::string& dir);

}  // namespace fpg
