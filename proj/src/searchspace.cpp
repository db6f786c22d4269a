#include "fpg/searchspace.hpp"

#include <algorithm>
#include <sstream>

namespace fpg {

std::string CandidateSpec::label() const {
  if (is_skip()) return "skip";
  std::ostringstream os;
  os << "K" << kernel << "_e" << expansion << "_g" << k_ghost;
  return os.str();
}

const std::vector<CandidateSpec>& enumerate_candidates() {
  static const std::vector<CandidateSpec> specs = [] {
    std::vector<CandidateSpec> v;
    for (int k : {3, 5, 7})
      for (int e : {1, 3, 6})
        for (int g : {3, 5})
          v.push_back({CandidateSpec::Kind::block, k, e, g,
                       static_cast<int>(v.size())});
    v.push_back({CandidateSpec::Kind::skip, 0, 0, 0, static_cast<int>(v.size())});
    return v;
  }();
  return specs;
}

const char* profile_name(Profile p) {
  return p == Profile::paper ? "paper" : "desk";
}

Profile parse_profile(const std::string& s) {
  if (s == "paper") return Profile::paper;
  if (s == "desk") return Profile::desk;
  throw ConfigError("unknown macro profile '" + s + "' (expected paper|desk)");
}

const std::array<StageRow, kStageGroups>& paper_stage_table() {
  static const std::array<StageRow, kStageGroups> rows{{{16, 1, 1},
                                                        {24, 1, 2},
                                                        {40, 2, 2},
                                                        {80, 2, 2},
                                                        {112, 3, 1},
                                                        {192, 3, 2},
                                                        {320, 4, 1}}};
  return rows;
}

namespace {

constexpr int kPaperStem = 32;
constexpr int kPaperFusion = 64;
// Stage groups whose last layer feeds the fusion module.
constexpr std::array<int, 4> kTapGroups = {1, 2, 4, 6};

int desk_channels(int c) { return std::max(4, c / 4); }

}  // namespace

MacroArch build_macro(Profile profile, int input_h, int input_w, int keypoints,
                      std::optional<std::array<int, kStageGroups>> repeats) {
  if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0)
    throw ConfigError("input resolution " + std::to_string(input_h) + "x" +
                      std::to_string(input_w) + " must be a multiple of 32");
  if (keypoints < 1) throw ConfigError("keypoint count must be >= 1");
  const auto scale = [profile](int c) {
    return profile == Profile::desk ? desk_channels(c) : c;
  };
  MacroArch m;
  m.profile = profile;
  m.in_h = input_h;
  m.in_w = input_w;
  m.keypoints = keypoints;
  m.stem_channels = scale(kPaperStem);
  m.stem_h = input_h / 2;
  m.stem_w = input_w / 2;
  m.fusion_channels = scale(kPaperFusion);
  m.fusion_h = input_h / 4;
  m.fusion_w = input_w / 4;

  int c = m.stem_channels, h = m.stem_h, w = m.stem_w;
  std::array<int, kStageGroups> last_layer{};
  const auto& table = paper_stage_table();
  for (int g = 0; g < kStageGroups; ++g) {
    const int reps = repeats ? (*repeats)[g] : table[g].repeats;
    if (reps < 1) throw ConfigError("every stage group needs >= 1 layer");
    for (int r = 0; r < reps; ++r) {
      LayerSpec l;
      l.index = static_cast<int>(m.layers.size());
      l.stage = g;
      l.c_in = c;
      l.c_out = scale(table[g].channels);
      l.stride = r == 0 ? table[g].stride : 1;
      l.in_h = h;
      l.in_w = w;
      l.out_h = h / l.stride;
      l.out_w = w / l.stride;
      m.layers.push_back(l);
      c = l.c_out;
      h = l.out_h;
      w = l.out_w;
    }
    last_layer[g] = static_cast<int>(m.layers.size()) - 1;
  }
  for (int g : kTapGroups) {
    const LayerSpec& l = m.layers[last_layer[g]];
    m.taps.push_back({l.index, l.c_out, l.out_h, l.out_w});
  }
  return m;
}

Network build_network(const MacroArch& macro,
                      const std::vector<std::vector<int>>& layer_candidates,
                      const std::vector<int>& fusion_variants,
                      std::uint64_t seed) {
  if (static_cast<int>(layer_candidates.size()) != macro.num_layers())
    throw UsageError("network needs candidate lists for " +
                     std::to_string(macro.num_layers()) + " layers, got " +
                     std::to_string(layer_candidates.size()));
  if (fusion_variants.empty()) throw UsageError("network needs a fusion variant");
  Network net;
  net.macro = macro;
  Rng rng = Rng::substream(seed, "init");
  net.stem = make_stem(net.params, rng, "stem", 3, macro.stem_channels);
  const auto& specs = enumerate_candidates();
  for (const LayerSpec& l : macro.layers) {
    const auto& chosen = layer_candidates[l.index];
    if (chosen.empty())
      throw UsageError("layer " + std::to_string(l.index) + " has no candidates");
    NetworkLayer layer;
    layer.candidates = chosen;
    for (int idx : chosen) {
      if (idx < 0 || idx >= kCandidates)
        throw UsageError("candidate index " + std::to_string(idx) + " out of range");
      const CandidateSpec& cs = specs[idx];
      const std::string name =
          "layer" + std::to_string(l.index) + ".cand" + std::to_string(idx);
      if (cs.is_skip())
        layer.modules.emplace_back(
            make_skip(net.params, rng, name, l.c_in, l.c_out, l.stride));
      else
        layer.modules.emplace_back(make_block(net.params, rng, name, l.c_in,
                                              l.c_out, cs.kernel, cs.expansion,
                                              cs.k_ghost, l.stride));
    }
    net.layers.push_back(std::move(layer));
  }
  std::vector<int> tap_channels;
  for (const auto& t : macro.taps) tap_channels.push_back(t.channels);
  for (int v : fusion_variants) {
    if (v < 0 || v >= kFusionVariants)
      throw UsageError("fusion variant " + std::to_string(v) + " out of range");
    const auto variant = static_cast<FusionVariant>(v);
    net.fusions.push_back(make_fusion(net.params, rng,
                                      std::string("fusion.") + fusion_name(variant),
                                      variant, tap_channels, macro.fusion_channels,
                                      macro.fusion_h, macro.fusion_w));
  }
  net.fusion_variants = fusion_variants;
  net.head = make_head(net.params, rng, "head", macro.fusion_channels, macro.keypoints);
  return net;
}

Network build_supernet(const MacroArch& macro, std::uint64_t seed) {
  std::vector<int> all(kCandidates);
  for (int i = 0; i < kCandidates; ++i) all[i] = i;
  std::vector<std::vector<int>> layers(macro.num_layers(), all);
  return build_network(macro, layers, {0, 1, 2, 3}, seed);
}

Tensor candidate_forward(ForwardContext& ctx, const CandidateModule& m,
                         const Tensor& x) {
  if (const auto* b = std::get_if<Block>(&m)) return block_forward(ctx, *b, x);
  return skip_forward(ctx, std::get<Skip>(m), x);
}

Tensor network_forward(ForwardContext& ctx, const Network& net, const Tensor& x,
                       const Mixing* mixing, ForwardTrace* trace) {
  if (x.shape().h != net.macro.in_h || x.shape().w != net.macro.in_w)
    throw ShapeError("network input " + x.shape().str() + " does not match " +
                     std::to_string(net.macro.in_h) + "x" +
                     std::to_string(net.macro.in_w));
  Tensor h = stem_forward(ctx, net.stem, x);
  std::vector<Tensor> outputs;
  outputs.reserve(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const NetworkLayer& layer = net.layers[l];
    std::vector<Tensor> parts;
    parts.reserve(layer.modules.size());
    for (const auto& m : layer.modules) parts.push_back(candidate_forward(ctx, m, h));
    h = mixing ? weighted_sum(parts, mixing->layers[l]) : sum_of(parts);
    outputs.push_back(h);
  }
  std::vector<Tensor> taps;
  for (const auto& t : net.macro.taps) taps.push_back(outputs[t.layer]);
  std::vector<Tensor> fused;
  for (const auto& f : net.fusions) fused.push_back(fusion_forward(ctx, f, taps));
  const Tensor merged = (mixing && mixing->fusion)
                            ? weighted_sum(fused, *mixing->fusion)
                            : sum_of(fused);
  if (trace) trace->layer_outputs = std::move(outputs);
  return head_forward(ctx, net.head, merged);
}

Tensor supernet_forward(ForwardContext& ctx, const Network& net,
                        const Tensor& x, const std::vector<Tensor>& gates,
                        const Tensor& fusion_weights, ForwardTrace* trace) {
  if (gates.size() != net.layers.size())
    throw UsageError("gate matrix has " + std::to_string(gates.size()) +
                     " rows, network has " + std::to_string(net.layers.size()) +
                     " layers");
  for (std::size_t l = 0; l < gates.size(); ++l) {
    const Shape want{1, static_cast<int>(net.layers[l].modules.size()), 1, 1};
    if (gates[l].shape() != want)
      throw UsageError("gate row " + std::to_string(l) + " has shape " +
                       gates[l].shape().str() + ", expected " + want.str());
  }
  const Shape fw{1, static_cast<int>(net.fusions.size()), 1, 1};
  if (fusion_weights.shape() != fw)
    throw UsageError("fusion weights have shape " + fusion_weights.shape().str() +
                     ", expected " + fw.str());
  double total = 0;
  for (double v : fusion_weights.data()) {
    if (!(v >= 0)) throw UsageError("fusion weights must be nonnegative");
    total += v;
  }
  if (total > 1 + 1e-9) throw UsageError("fusion weights sum above 1");
  Mixing mix{gates, fusion_weights};
  return network_forward(ctx, net, x, &mix, trace);
}

std::size_t copy_matching_params(const ParamStore& from, ParamStore& to) {
  std::size_t copied = 0;
  for (ParamId i = 0; i < to.size(); ++i) {
    const auto src = from.find(to[i].name);
    if (!src) continue;
    to.set(i, *from[*src].value);
    ++copied;
  }
  return copied;
}

BigInt space_cardinality(int layers, int candidates, int fusions) {
  if (layers < 1 || candidates < 1 || fusions < 1)
    throw UsageError("space_cardinality needs layers, candidates, fusions >= 1");
  const BigInt per_layer = (BigInt(1) << candidates) - 1;
  return BigInt(fusions) * boost::multiprecision::pow(per_layer, layers);
}

}  // namespace fpg
