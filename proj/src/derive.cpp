#include "fpg/derive.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include <json.hpp>

namespace fpg {

using nlohmann::json;

int ArchGenome::kept() const {
  int n = 0;
  for (const auto& l : layers) n += static_cast<int>(l.size());
  return n;
}

void validate_genome(const ArchGenome& g, int expected_layers) {
  if (g.layers.empty()) throw UsageError("genome has no layers");
  if (expected_layers >= 0 && g.layer_count() != expected_layers)
    throw UsageError("genome has " + std::to_string(g.layer_count()) +
                     " layers, expected " + std::to_string(expected_layers));
  for (int l = 0; l < g.layer_count(); ++l) {
    const auto& row = g.layers[l];
    if (row.empty())
      throw UsageError("genome layer " + std::to_string(l) + " is empty");
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (row[k] < 0 || row[k] >= kCandidates)
        throw UsageError("genome layer " + std::to_string(l) +
                         ": candidate index " + std::to_string(row[k]) +
                         " out of range");
      if (k > 0 && row[k] <= row[k - 1])
        throw UsageError("genome layer " + std::to_string(l) +
                         " is not strictly ascending");
    }
  }
  if (g.fusion < 0 || g.fusion >= kFusionVariants)
    throw UsageError("genome fusion choice " + std::to_string(g.fusion) +
                     " out of range");
}

MacroArch genome_macro(const ArchGenome& g) {
  return build_macro(g.profile, g.input_h, g.input_w, g.keypoints);
}

namespace {

int argmax_lowest(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace

std::vector<std::vector<double>> selection_weights(const GateParams& gates,
                                                   const DiscretizeOptions& o) {
  std::vector<std::vector<double>> out;
  for (const auto& row : gates.alpha)
    out.push_back(candidate_weights(o.strategy, row, gates.epsilon, o.gamma));
  return out;
}

ArchGenome discretize(const GateParams& gates, const MacroArch& macro,
                      const DiscretizeOptions& o) {
  if (!(o.theta > 0 && o.theta < 1))
    throw ConfigError("discretize: theta must lie in (0, 1)");
  if (gates.layers() != macro.num_layers())
    throw UsageError("discretize: gate rows do not match the macro layers");
  if (static_cast<int>(gates.fusion_logits.size()) != kFusionVariants)
    throw UsageError("discretize: expected 4 fusion logits");
  ArchGenome g;
  g.profile = macro.profile;
  g.input_h = macro.in_h;
  g.input_w = macro.in_w;
  g.keypoints = macro.keypoints;
  g.meta.strategy = strategy_name(o.strategy);
  g.meta.theta = o.theta;
  for (const auto& w : selection_weights(gates, o)) {
    std::vector<int> keep;
    if (o.strategy != Strategy::darts)
      for (int i = 0; i < static_cast<int>(w.size()); ++i)
        if (w[i] >= o.theta) keep.push_back(i);
    if (keep.empty()) keep.push_back(argmax_lowest(w));
    g.layers.push_back(std::move(keep));
  }
  g.fusion = argmax_lowest(gates.fusion_logits);
  return g;
}

Flops genome_flops_exact(const ArchGenome& g, const FlopsTable& table) {
  validate_genome(g, table.layers());
  Flops total = table.stem_head + table.fusion[g.fusion];
  for (int l = 0; l < g.layer_count(); ++l)
    for (int i : g.layers[l]) total += table.backbone[l][i];
  return total;
}

Network build_derived(const ArchGenome& g, std::uint64_t seed) {
  const MacroArch macro = genome_macro(g);
  validate_genome(g, macro.num_layers());
  return build_network(macro, g.layers, {g.fusion}, seed);
}

std::string export_genome(const ArchGenome& g) {
  validate_genome(g);
  json j;
  j["version"] = kGenomeVersion;
  j["profile"] = profile_name(g.profile);
  j["input"] = {g.input_h, g.input_w};
  j["keypoints"] = g.keypoints;
  j["layers"] = g.layers;
  j["fusion"] = g.fusion;
  j["meta"] = {{"strategy", g.meta.strategy},
               {"seed", g.meta.seed},
               {"theta", g.meta.theta}};
  return j.dump();
}

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw DataError("genome " + path + ": " + what);
}

const json& field(const json& obj, const std::string& key, const std::string& path) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(path, "missing key '" + key + "'");
  return *it;
}

int as_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) fail(path, "expected an integer");
  return v.get<int>();
}

}  // namespace

ArchGenome import_genome(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError("genome parse error at byte " + std::to_string(e.byte) +
                    ": " + e.what());
  }
  if (!j.is_object()) fail("/", "expected an object");
  static const std::set<std::string> known{"version", "profile", "input",
                                           "keypoints", "layers", "fusion",
                                           "meta"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) fail("/" + k, "unknown key");
  const int version = as_int(field(j, "version", "/"), "/version");
  if (version != kGenomeVersion)
    fail("/version", "unsupported version " + std::to_string(version));

  ArchGenome g;
  const json& prof = field(j, "profile", "/");
  if (!prof.is_string()) fail("/profile", "expected a string");
  try {
    g.profile = parse_profile(prof.get<std::string>());
  } catch (const ConfigError& e) {
    fail("/profile", e.what());
  }
  const json& input = field(j, "input", "/");
  if (!input.is_array() || input.size() != 2) fail("/input", "expected [h, w]");
  g.input_h = as_int(input[0], "/input/0");
  g.input_w = as_int(input[1], "/input/1");
  g.keypoints = as_int(field(j, "keypoints", "/"), "/keypoints");
  g.fusion = as_int(field(j, "fusion", "/"), "/fusion");
  if (g.fusion < 0 || g.fusion >= kFusionVariants)
    fail("/fusion", "choice " + std::to_string(g.fusion) + " out of range");

  const json& layers = field(j, "layers", "/");
  if (!layers.is_array() || layers.empty()) fail("/layers", "expected a non-empty array");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string lp = "/layers/" + std::to_string(l);
    if (!layers[l].is_array() || layers[l].empty())
      fail(lp, "expected a non-empty candidate list");
    std::vector<int> row;
    for (std::size_t k = 0; k < layers[l].size(); ++k) {
      const std::string kp = lp + "/" + std::to_string(k);
      const int c = as_int(layers[l][k], kp);
      if (c < 0 || c >= kCandidates)
        fail(kp, "candidate index " + std::to_string(c) + " out of range");
      if (!row.empty() && c <= row.back()) fail(kp, "indices must be strictly ascending");
      row.push_back(c);
    }
    g.layers.push_back(std::move(row));
  }

  if (auto it = j.find("meta"); it != j.end()) {
    const json& m = *it;
    if (!m.is_object()) fail("/meta", "expected an object");
    for (const auto& [k, v] : m.items()) {
      const std::string p = "/meta/" + k;
      if (k == "strategy") {
        if (!v.is_string()) fail(p, "expected a string");
        g.meta.strategy = v.get<std::string>();
      } else if (k == "seed") {
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
          fail(p, "expected a non-negative integer");
        g.meta.seed = v.get<std::uint64_t>();
      } else if (k == "theta") {
        if (!v.is_number()) fail(p, "expected a number");
        g.meta.theta = v.get<double>();
      } else {
        fail(p, "unknown key");
      }
    }
  }
  return g;
}

std::string genome_hash(const ArchGenome& g) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : export_genome(g)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ArchGenome cheapest_genome(const MacroArch& macro, const FlopsTable& table) {
  ArchGenome g;
  g.profile = macro.profile;
  g.input_h = macro.in_h;
  g.input_w = macro.in_w;
  g.keypoints = macro.keypoints;
  g.meta.strategy = "cheapest";
  for (const auto& row : table.backbone)
    g.layers.push_back(
        {static_cast<int>(std::min_element(row.begin(), row.end()) - row.begin())});
  g.fusion = static_cast<int>(
      std::min_element(table.fusion.begin(), table.fusion.end()) - table.fusion.begin());
  return g;
}

ArchGenome random_genome(double budget_flops, const MacroArch& macro,
                         const FlopsTable& table, std::uint64_t seed,
                         int max_tries) {
  const ArchGenome floor = cheapest_genome(macro, table);
  const Flops min_cost = genome_flops_exact(floor, table);
  if (budget_flops < static_cast<double>(min_cost))
    throw ConfigError("random_genome: budget " + std::to_string(budget_flops) +
                      " is below the cheapest genome cost " +
                      std::to_string(min_cost));
  Rng rng = Rng::substream(seed, "random_genome");
  const std::uint64_t subsets = (std::uint64_t{1} << kCandidates) - 1;
  ArchGenome g = floor;
  g.meta = {"random", seed, 0.0};
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    for (auto& row : g.layers) {
      const std::uint64_t mask = rng.below(subsets) + 1;
      row.clear();
      for (int i = 0; i < kCandidates; ++i)
        if (mask >> i & 1) row.push_back(i);
    }
    g.fusion = static_cast<int>(rng.below(kFusionVariants));
    if (static_cast<double>(genome_flops_exact(g, table)) <= budget_flops) return g;
  }
  throw ConfigError("random_genome: no genome within budget after " +
                    std::to_string(max_tries) + " draws (cheapest costs " +
                    std::to_string(min_cost) + ")");
}

}  // namespace fpg
