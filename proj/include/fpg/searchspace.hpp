#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "fpg/nnops.hpp"

namespace fpg {

inline constexpr int kCandidates = 19;

struct CandidateSpec {
  enum class Kind { block, skip };
  Kind kind = Kind::block;
  int kernel = 0;
  int expansion = 0;
  int k_ghost = 0;
  int index = 0;
  bool is_skip() const { return kind == Kind::skip; }
  std::string label() const;
};

// K in {3,5,7} (major), then e in {1,3,6}, then K_ghost in {3,5}; skip last.
const std::vector<CandidateSpec>& enumerate_candidates();

enum class Profile { paper, desk };
const char* profile_name(Profile p);
Profile parse_profile(const std::string& s);

struct LayerSpec {
  int index = 0;
  int c_in = 0, c_out = 0, stride = 1;
  int stage = 0;  // row of the stage table this layer belongs to
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  bool shape_preserving() const { return stride == 1 && c_in == c_out; }
};

struct FusionTap {
  int layer = 0;  // backbone layer whose output is tapped
  int channels = 0;
  int h = 0, w = 0;
};

struct MacroArch {
  Profile profile = Profile::desk;
  int in_h = 0, in_w = 0;
  int stem_channels = 0;
  int stem_h = 0, stem_w = 0;
  std::vector<LayerSpec> layers;
  std::vector<FusionTap> taps;
  int fusion_channels = 0;
  int fusion_h = 0, fusion_w = 0;
  int keypoints = 0;
  int num_layers() const { return static_cast<int>(layers.size()); }
};

inline constexpr int kStageGroups = 7;

// Stage table: output channels, repeats and stride of each group of
// searchable layers. The first layer of a group carries the stride.
struct StageRow {
  int channels, repeats, stride;
};
const std::array<StageRow, kStageGroups>& paper_stage_table();

// Throws ConfigError unless input_h/input_w are positive multiples of 32.
MacroArch build_macro(Profile profile, int input_h, int input_w, int keypoints,
                      std::optional<std::array<int, kStageGroups>> repeats =
                          std::nullopt);

using CandidateModule = std::variant<Block, Skip>;

struct NetworkLayer {
  std::vector<int> candidates;  // candidate indices, ascending
  std::vector<CandidateModule> modules;
};

// Stem, searchable layers holding any subset of candidates, fusion variants
// and head. The supernet holds all 19 candidates per layer and all 4 fusions.
struct Network {
  MacroArch macro;
  ParamStore params;
  Stem stem;
  std::vector<NetworkLayer> layers;
  std::vector<int> fusion_variants;
  std::vector<Fusion> fusions;
  Head head;
};

Network build_network(const MacroArch& macro,
                      const std::vector<std::vector<int>>& layer_candidates,
                      const std::vector<int>& fusion_variants,
                      std::uint64_t seed);
Network build_supernet(const MacroArch& macro, std::uint64_t seed);

Tensor candidate_forward(ForwardContext& ctx, const CandidateModule& m,
                         const Tensor& x);

// Per-layer mixing weights, shape (1, layer candidate count, 1, 1), and
// fusion weights of shape (1, fusion count, 1, 1). Absent mixing means an
// unweighted sum.
struct Mixing {
  std::vector<Tensor> layers;
  std::optional<Tensor> fusion;
};

struct ForwardTrace {
  std::vector<Tensor> layer_outputs;
};

Tensor network_forward(ForwardContext& ctx, const Network& net, const Tensor& x,
                       const Mixing* mixing = nullptr,
                       ForwardTrace* trace = nullptr);

// Gated supernet forward: x_{l+1} = Σ_i g_{l,i} b_{l,i}(x_l). Validates gate
// dimensions and fusion weights (nonnegative, sum <= 1 + 1e-9).
Tensor supernet_forward(ForwardContext& ctx, const Network& net,
                        const Tensor& x, const std::vector<Tensor>& gates,
                        const Tensor& fusion_weights,
                        ForwardTrace* trace = nullptr);

// Copies every parameter of `to` whose name also exists in `from`.
std::size_t copy_matching_params(const ParamStore& from, ParamStore& to);

using BigInt = boost::multiprecision::cpp_int;

// fusions * (2^candidates - 1)^layers.
BigInt space_cardinality(int layers, int candidates, int fusions);

}  // namespace fpg
