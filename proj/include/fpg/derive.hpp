#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpg/flops.hpp"
#include "fpg/gating.hpp"
#include "fpg/searchspace.hpp"

namespace fpg {

inline constexpr int kGenomeVersion = 1;

struct GenomeMeta {
  std::string strategy = "fpg";
  std::uint64_t seed = 0;
  double theta = 0.5;
  bool operator==(const GenomeMeta&) const = default;
};

// A discrete architecture: the candidates kept in every layer and one fusion.
struct ArchGenome {
  Profile profile = Profile::desk;
  int input_h = 64, input_w = 64, keypoints = 4;
  std::vector<std::vector<int>> layers;  // sorted, non-empty, < kCandidates
  int fusion = 0;
  GenomeMeta meta;

  bool operator==(const ArchGenome&) const = default;
  int layer_count() const { return static_cast<int>(layers.size()); }
  // Total number of kept candidates.
  int kept() const;
};

// Throws UsageError naming the first broken invariant.
void validate_genome(const ArchGenome& g, int expected_layers = -1);

MacroArch genome_macro(const ArchGenome& g);

struct DiscretizeOptions {
  Strategy strategy = Strategy::fpg;
  double theta = 0.5;
  double gamma = 1.0;  // final DNAL sharpness
};

// Per-layer weights used for discretization: polarized gates at the final ε
// (fpg), softmax rows (darts) or sigmoid(γα) (dnal).
std::vector<std::vector<double>> selection_weights(const GateParams& gates,
                                                   const DiscretizeOptions& o);

// Keeps {i : weight >= theta}; empty layers fall back to the argmax. DARTS
// always keeps the argmax alone. Ties resolve to the lowest index.
ArchGenome discretize(const GateParams& gates, const MacroArch& macro,
                      const DiscretizeOptions& o);

Flops genome_flops_exact(const ArchGenome& g, const FlopsTable& table);

// Network holding exactly the genome's candidates and fusion variant.
Network build_derived(const ArchGenome& g, std::uint64_t seed);

// Canonical JSON: sorted keys, compact, explicit version.
std::string export_genome(const ArchGenome& g);
// Throws DataError with the byte offset or JSON path of the first problem.
ArchGenome import_genome(const std::string& text);
std::string genome_hash(const ArchGenome& g);

// Uniform non-empty subsets per layer and a uniform fusion choice, resampled
// until the exact cost fits the budget. Throws ConfigError if the budget is
// below the cheapest genome or `max_tries` draws all fail.
ArchGenome random_genome(double budget_flops, const MacroArch& macro,
                         const FlopsTable& table, std::uint64_t seed,
                         int max_tries = 100000);

// The cheapest genome: per-layer lowest-cost candidate, cheapest fusion.
ArchGenome cheapest_genome(const MacroArch& macro, const FlopsTable& table);

}  // namespace fpg
