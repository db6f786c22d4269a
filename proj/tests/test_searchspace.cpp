#include <gtest/gtest.h>

#include <set>

#include "fpg/searchspace.hpp"

namespace fpg {
namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = -1, double hi = 1) {
  std::vector<double> v(s.numel());
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(s, v);
}

TEST(SearchSpace, CandidateGrid) {
  const auto& c = enumerate_candidates();
  ASSERT_EQ(c.size(), 19u);
  EXPECT_EQ(c[0].kernel, 3);
  EXPECT_EQ(c[0].expansion, 1);
  EXPECT_EQ(c[0].k_ghost, 3);
  EXPECT_TRUE(c.back().is_skip());
  std::set<int> idx;
  for (std::size_t i = 0; i < c.size(); ++i) {
    idx.insert(c[i].index);
    EXPECT_EQ(c[i].index, static_cast<int>(i));
  }
  EXPECT_EQ(idx.size(), 19u);
  // K-major, then e, then K_ghost.
  int i = 0;
  for (int k : {3, 5, 7})
    for (int e : {1, 3, 6})
      for (int g : {3, 5}) {
        EXPECT_FALSE(c[i].is_skip());
        EXPECT_EQ(c[i].kernel, k);
        EXPECT_EQ(c[i].expansion, e);
        EXPECT_EQ(c[i].k_ghost, g);
        ++i;
      }
}

// Transcription of the macro-architecture table (channels and strides per layer).
TEST(SearchSpace, PaperMacroGolden) {
  const MacroArch m = build_macro(Profile::paper, 64, 64, 4);
  const int channels[] = {16, 24, 40, 40, 80, 80, 112, 112, 112, 192, 192, 192, 320, 320, 320, 320};
  const int strides[] = {1, 2, 2, 1, 2, 1, 1, 1, 1, 2, 1, 1, 1, 1, 1, 1};
  ASSERT_EQ(m.num_layers(), 16);
  EXPECT_EQ(m.stem_channels, 32);
  EXPECT_EQ(m.stem_h, 32);
  EXPECT_EQ(m.fusion_channels, 64);
  int c_in = 32;
  for (int l = 0; l < 16; ++l) {
    EXPECT_EQ(m.layers[l].c_out, channels[l]) << l;
    EXPECT_EQ(m.layers[l].stride, strides[l]) << l;
    EXPECT_EQ(m.layers[l].c_in, c_in) << l;
    c_in = m.layers[l].c_out;
  }
  EXPECT_EQ(m.layers.back().out_h, 2);
  EXPECT_EQ(m.layers.back().out_w, 2);
  EXPECT_EQ(m.layers.back().c_out, 320);
  int repeats = 0;
  for (const auto& row : paper_stage_table()) repeats += row.repeats;
  EXPECT_EQ(repeats, 16);
  const int tap_c[] = {24, 40, 112, 320}, tap_h[] = {16, 8, 4, 2};
  ASSERT_EQ(m.taps.size(), 4u);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(m.taps[k].channels, tap_c[k]);
    EXPECT_EQ(m.taps[k].h, tap_h[k]);
  }
}

TEST(SearchSpace, DeskMacro) {
  const MacroArch m = build_macro(Profile::desk, 64, 64, 4);
  const int channels[] = {4, 6, 10, 10, 20, 20, 28, 28, 28, 48, 48, 48, 80, 80, 80, 80};
  ASSERT_EQ(m.num_layers(), 16);
  for (int l = 0; l < 16; ++l) EXPECT_EQ(m.layers[l].c_out, channels[l]);
  EXPECT_EQ(m.fusion_h, 16);
  EXPECT_THROW(build_macro(Profile::desk, 48, 64, 4), ConfigError);
  EXPECT_THROW(build_macro(Profile::desk, 64, 64, 0), ConfigError);
}

// Independent parameter count by walking the layer shapes.
std::size_t ghost_params(int cin, int cout, int kg) {
  const int m = (cout + 1) / 2, cheap = cout - m;
  return static_cast<std::size_t>(m) * cin + 2 * m + (cheap ? cheap * kg * kg + 2 * cheap : 0);
}
std::size_t se_params(int c) {
  const int r = std::max(1, static_cast<int>(std::lround(c / 4.0)));
  return 2 * static_cast<std::size_t>(r) * c;
}
std::size_t candidate_params(const CandidateSpec& s, const LayerSpec& l) {
  if (s.is_skip())
    return l.shape_preserving() ? 0 : static_cast<std::size_t>(l.c_in) * l.c_out + 2 * l.c_out;
  const int hidden = l.c_in * s.expansion;
  return ghost_params(l.c_in, hidden, s.k_ghost) + hidden * s.kernel * s.kernel + 2 * hidden +
         se_params(hidden) + ghost_params(hidden, l.c_out, s.k_ghost);
}

TEST(SearchSpace, SupernetParameterCount) {
  const MacroArch m = build_macro(Profile::desk, 64, 64, 4);
  const Network net = build_supernet(m, 0);
  ASSERT_EQ(net.layers.size(), 16u);
  std::size_t expect = 27 * m.stem_channels + 2 * m.stem_channels;
  for (const auto& l : m.layers) {
    EXPECT_EQ(net.layers[l.index].modules.size(), 19u);
    for (const auto& s : enumerate_candidates()) expect += candidate_params(s, l);
  }
  const int f = m.fusion_channels;
  std::size_t proj = 0;
  for (const auto& t : m.taps) proj += static_cast<std::size_t>(f) * t.channels + 2 * f;
  expect += 4 * proj;                    // every variant has its own projections
  expect += f * f * 9 + 2 * f;           // dilated 3x3
  expect += se_params(f);                // SE
  expect += 2 * 49;                      // attention mask conv
  expect += f * 9 + m.keypoints * f;     // head
  EXPECT_EQ(net.params.trainable_scalars(), expect);
}

TEST(SearchSpace, SupernetBuildIsDeterministic) {
  const MacroArch m = build_macro(Profile::desk, 32, 32, 2);
  const Network a = build_supernet(m, 5), b = build_supernet(m, 5), c = build_supernet(m, 6);
  ASSERT_EQ(a.params.size(), b.params.size());
  bool differs = false;
  for (ParamId i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(*a.params[i].value, *b.params[i].value);
    differs = differs || *a.params[i].value != *c.params[i].value;
  }
  EXPECT_TRUE(differs);
}

struct GateSetup {
  MacroArch macro = build_macro(Profile::desk, 32, 32, 2);
  Network net = build_supernet(macro, 1);
  Tensor x;
  GateSetup() {
    Rng rng(2);
    x = random_tensor(rng, {2, 3, 32, 32});
  }
};

std::vector<Tensor> one_hot_rows(const std::vector<int>& pick) {
  std::vector<Tensor> rows;
  for (int p : pick) {
    std::vector<double> r(kCandidates, 0.0);
    r[p] = 1.0;
    rows.push_back(Tensor(Shape{1, kCandidates, 1, 1}, r));
  }
  return rows;
}

TEST(SearchSpace, OneHotGatesMatchDerivedNetwork) {
  GateSetup s;
  std::vector<int> pick;
  for (int l = 0; l < s.macro.num_layers(); ++l) pick.push_back((l * 5) % kCandidates);
  const int fusion = 2;
  std::vector<double> fw(kFusionVariants, 0.0);
  fw[fusion] = 1.0;
  ForwardContext c1(s.net.params, BnMode::train);
  const Tensor a = supernet_forward(c1, s.net, s.x, one_hot_rows(pick),
                                    Tensor(Shape{1, kFusionVariants, 1, 1}, fw));

  std::vector<std::vector<int>> layers;
  for (int p : pick) layers.push_back({p});
  Network derived = build_network(s.macro, layers, {fusion}, 99);
  EXPECT_EQ(copy_matching_params(s.net.params, derived.params), derived.params.size());
  ForwardContext c2(derived.params, BnMode::train);
  const Tensor b = network_forward(c2, derived, s.x);
  ASSERT_EQ(a.shape(), (Shape{2, 2, 8, 8}));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(SearchSpace, GateLinearityAndZeroLayer) {
  GateSetup s;
  const std::vector<double> fw(kFusionVariants, 0.25);
  const Tensor fwt(Shape{1, kFusionVariants, 1, 1}, fw);
  std::vector<int> pick(s.macro.num_layers(), 3);
  auto rows = one_hot_rows(pick);
  auto run = [&](const std::vector<Tensor>& r) {
    ForwardContext ctx(s.net.params, BnMode::eval);
    ForwardTrace trace;
    supernet_forward(ctx, s.net, s.x, r, fwt, &trace);
    return trace.layer_outputs;
  };
  const int l = 2;
  std::vector<double> half(kCandidates, 0.0);
  half[3] = 0.5;
  auto r1 = rows;
  r1[l] = Tensor(Shape{1, kCandidates, 1, 1}, half);
  const auto o1 = run(r1), o2 = run(rows);
  for (std::size_t i = 0; i < o1[l].numel(); ++i) EXPECT_NEAR(2 * o1[l][i], o2[l][i], 1e-9);

  auto r0 = rows;
  r0[l] = Tensor::zeros({1, kCandidates, 1, 1});
  const auto z = run(r0);
  for (std::size_t i = 0; i < z[l].numel(); ++i) EXPECT_EQ(z[l][i], 0.0);
}

TEST(SearchSpace, SupernetForwardValidatesInputs) {
  GateSetup s;
  ForwardContext ctx(s.net.params, BnMode::train);
  auto rows = one_hot_rows(std::vector<int>(s.macro.num_layers(), 0));
  const Tensor ok(Shape{1, 4, 1, 1}, {0.25, 0.25, 0.25, 0.25});
  auto short_rows = rows;
  short_rows.pop_back();
  EXPECT_THROW(supernet_forward(ctx, s.net, s.x, short_rows, ok), UsageError);
  auto bad_row = rows;
  bad_row[0] = Tensor::zeros({1, 18, 1, 1});
  EXPECT_THROW(supernet_forward(ctx, s.net, s.x, bad_row, ok), UsageError);
  EXPECT_THROW(supernet_forward(ctx, s.net, s.x, rows, Tensor(Shape{1, 4, 1, 1}, {0.5, 0.5, 0.5, 0})),
               UsageError);
  EXPECT_THROW(supernet_forward(ctx, s.net, s.x, rows, Tensor(Shape{1, 4, 1, 1}, {-0.1, 0.5, 0.5, 0})),
               UsageError);
}

// Counts (layer subsets, fusion choice) tuples by explicit enumeration.
std::uint64_t brute_force(int layers, int candidates, int fusions) {
  std::uint64_t count = 0;
  const std::uint64_t per_layer = std::uint64_t{1} << candidates;
  std::uint64_t total = 1;
  for (int l = 0; l < layers; ++l) total *= per_layer;
  for (std::uint64_t code = 0; code < total; ++code) {
    bool ok = true;
    std::uint64_t c = code;
    for (int l = 0; l < layers && ok; ++l) {
      ok = (c % per_layer) != 0;
      c /= per_layer;
    }
    if (ok) count += static_cast<std::uint64_t>(fusions);
  }
  return count;
}

TEST(SearchSpace, CardinalityMatchesEnumeration) {
  for (int n = 1; n <= 4; ++n)
    for (int l = 1; l <= 3; ++l)
      for (int f = 1; f <= 4; ++f)
        EXPECT_EQ(space_cardinality(l, n, f), BigInt(brute_force(l, n, f)))
            << l << " " << n << " " << f;
  EXPECT_EQ(space_cardinality(2, 2, 4), 36);
  EXPECT_EQ(space_cardinality(1, 1, 1), 1);
}

TEST(SearchSpace, PaperCardinality) {
  const BigInt n = space_cardinality(16, 19, 4);
  const std::string s = n.str();
  EXPECT_EQ(s.size(), 93u);
  EXPECT_EQ(s.substr(0, 3), "130");
  BigInt expect = 4;
  for (int i = 0; i < 16; ++i) expect *= BigInt(524287);
  EXPECT_EQ(n, expect);
}

}  // namespace
}  // namespace fpg
