#include <gtest/gtest.h>

#include <cmath>

#include "fpg/trainer.hpp"

namespace fpg {
namespace {

TEST(Losses, MseExamplesAndGradient) {
  const Tensor t(Shape{1, 2, 1, 2}, {0.1, -0.4, 2.0, 0.0});
  EXPECT_EQ(mse_loss(t, t).item(), 0.0);
  EXPECT_NEAR(mse_loss(affine(t, 1.0, 1.0), t).item(), 1.0, 1e-15);
  Tape tape;
  const Tensor p = tape.leaf(Tensor(Shape{1, 2, 1, 2}, {1, 0, 0, 3}));
  const Gradients g = tape.backward(mse_loss(p, t));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(g.of(p)[i], 2 * (p[i] - t[i]) / 4, 1e-15);
  EXPECT_THROW(mse_loss(t, Tensor::zeros({1, 1, 2, 2})), ShapeError);
}

TEST(Losses, KlHandValue) {
  const Tensor logits(Shape{1, 1, 1, 2}, {0.0, std::log(3.0)});
  const Tensor target(Shape{1, 1, 1, 2}, {1.0, 1.0});
  EXPECT_NEAR(kl_loss(logits, target).item(), 0.5 * std::log(4.0 / 3.0), 1e-12);
  // Matching logits give zero.
  const Tensor q(Shape{1, 1, 1, 2}, {0.25, 0.75});
  EXPECT_NEAR(kl_loss(logits, q).item(), 0.0, 1e-12);
  EXPECT_THROW(kl_loss(logits, Tensor::zeros({1, 1, 1, 2})), DomainError);
  EXPECT_THROW(kl_loss(logits, Tensor(Shape{1, 1, 1, 2}, {-1, 2})), DomainError);
}

TEST(Losses, NonnegativeOnRandomInputs) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(2 * 3 * 4 * 4), b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = rng.uniform(-3, 3);
      b[i] = rng.uniform(0, 1);
    }
    const Tensor x(Shape{2, 3, 4, 4}, a), y(Shape{2, 3, 4, 4}, b);
    EXPECT_GE(kl_loss(x, y).item(), 0.0);
    EXPECT_GE(mse_loss(x, y).item(), 0.0);
  }
}

TEST(Losses, KlGradient) {
  Rng rng(2);
  std::vector<double> t(2 * 2 * 3 * 3);
  for (double& v : t) v = rng.uniform(0, 1);
  const Tensor target(Shape{2, 2, 3, 3}, t);
  std::vector<double> l(t.size());
  for (double& v : l) v = rng.uniform(-2, 2);
  EXPECT_LE(grad_check([&](const Tensor& x) { return kl_loss(x, target); },
                       Tensor(Shape{2, 2, 3, 3}, l)),
            1e-6);
}

TEST(Schedules, CosineLearningRate) {
  EXPECT_NEAR(cosine_lr(0, 320), 1e-2, 1e-12);
  EXPECT_NEAR(cosine_lr(320, 320), 1e-4, 1e-12);
  EXPECT_NEAR(cosine_lr(160, 320), 5.05e-3, 1e-12);
  for (long t = 1; t <= 320; ++t) EXPECT_LT(cosine_lr(t, 320), cosine_lr(t - 1, 320));
  EXPECT_THROW(cosine_lr(321, 320), UsageError);
  EXPECT_THROW(cosine_lr(-1, 320), UsageError);
  EXPECT_THROW(cosine_lr(0, 0), ConfigError);
}

TEST(Clip, Examples) {
  std::vector<double> a{3, 4};
  std::vector<std::span<double>> g{a};
  EXPECT_NEAR(clip_grad_norm(g, 1.0), 5.0, 1e-15);
  EXPECT_NEAR(a[0], 0.6, 1e-15);
  EXPECT_NEAR(a[1], 0.8, 1e-15);
  std::vector<double> b{0.3, 0.4};
  std::vector<std::span<double>> h{b};
  clip_grad_norm(h, 1.0);
  EXPECT_EQ(b, (std::vector<double>{0.3, 0.4}));
}

TEST(Clip, GlobalNormAcrossGroups) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<double>> bufs(3, std::vector<double>(7));
    for (auto& v : bufs)
      for (double& x : v) x = rng.uniform(-5, 5);
    std::vector<std::span<double>> spans(bufs.begin(), bufs.end());
    clip_grad_norm(spans, 1.0);
    double n2 = 0;
    for (auto& v : bufs)
      for (double x : v) n2 += x * x;
    EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-9);
  }
}

TEST(AdamW, ZeroGradients) {
  AdamW opt;
  std::vector<double> p{1.0, -2.0}, g{0, 0};
  for (int i = 0; i < 5; ++i) {
    opt.begin_step();
    opt.update(0, p, g, 1e-3, 0.0);
  }
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
  std::vector<double> q{1.0, -2.0};
  AdamW decay;
  for (int i = 0; i < 5; ++i) {
    decay.begin_step();
    decay.update(0, q, g, 0.1, 0.5);
  }
  EXPECT_NEAR(q[0], std::pow(0.95, 5), 1e-15);
  EXPECT_NEAR(q[1], -2 * std::pow(0.95, 5), 1e-15);
}

TEST(AdamW, ConstantGradientStepsBySignTimesLr) {
  AdamW opt;
  std::vector<double> p{0.0, 0.0};
  const std::vector<double> g{0.3, -7.0};
  double prev0 = 0, prev1 = 0;
  for (int i = 0; i < 200; ++i) {
    opt.begin_step();
    opt.update(0, p, g, 1e-3, 0.0);
    EXPECT_NEAR(p[0] - prev0, -1e-3, 1e-9);
    EXPECT_NEAR(p[1] - prev1, 1e-3, 1e-9);
    prev0 = p[0];
    prev1 = p[1];
  }
  EXPECT_EQ(opt.steps(), 200);
  EXPECT_EQ(opt.slots(), 1u);
}

TEST(Pck, MatchingHeatmapsScoreOne) {
  const Dataset d = synth_dataset(0, "test", 6, 64, 64, 4);
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
  const Batch b = make_batch(d, idx);
  Rng rng(1);
  EXPECT_EQ(pck_metric(b.targets, b.keypoints, 4.0, rng), 1.0);
  EXPECT_THROW(pck_metric(b.targets, b.keypoints, 0.0, rng), ConfigError);
}

TEST(Pck, UniformHeatmapsMatchAreaRatio) {
  const int n = 4000;
  const Tensor flat = Tensor::zeros({n, 1, 16, 16});
  std::vector<std::vector<Keypoint>> kps;
  Rng where(3), tie(4);
  for (int i = 0; i < n; ++i) kps.push_back({{where.uniform(12, 52), where.uniform(12, 52)}});
  const double expect = M_PI * 16 / (64.0 * 64.0);
  EXPECT_NEAR(pck_metric(flat, kps, 4.0, tie), expect, 0.005);
}

TEST(Pck, TinyRadiusNeedsExactCell) {
  std::vector<double> hm(16, 0.0);
  hm[1 * 4 + 2] = 1.0;  // cell (x=2, y=1) -> pixel (8, 4)
  const Tensor t(Shape{1, 1, 4, 4}, hm);
  Rng rng(0);
  EXPECT_EQ(pck_metric(t, {{{8, 4}}}, 1e-9, rng), 1.0);
  EXPECT_EQ(pck_metric(t, {{{8.5, 4}}}, 1e-9, rng), 0.0);
}

SearchConfig tiny_config(std::uint64_t seed = 0) {
  SearchConfig c;
  c.input = 32;
  c.keypoints = 2;
  c.epochs = 2;
  c.batch_size = 4;
  c.seed = seed;
  c.train_samples = 8;
  c.val_samples = 8;
  c.test_samples = 4;
  c.validate();
  return c;
}

bool same_params(const Network& a, const Network& b) {
  for (ParamId i = 0; i < a.params.size(); ++i)
    if (*a.params[i].value != *b.params[i].value) return false;
  return true;
}

TEST(Searcher, SeededStepIsBitReproducible) {
  Searcher a(tiny_config()), b(tiny_config());
  const StepMetrics ma = a.search_step(), mb = b.search_step();
  EXPECT_EQ(ma.train_loss, mb.train_loss);
  EXPECT_EQ(ma.val_loss, mb.val_loss);
  EXPECT_EQ(ma.penalty, mb.penalty);
  EXPECT_TRUE(same_params(a.network(), b.network()));
  EXPECT_EQ(a.gates().alpha, b.gates().alpha);
  EXPECT_EQ(a.gates().fusion_logits, b.gates().fusion_logits);
  EXPECT_EQ(a.step(), 1);
  EXPECT_EQ(a.gates().epsilon, epsilon_schedule(a.schedules(), 1));
}

TEST(Searcher, FreezeAlphaLeavesArchitectureUntouched) {
  for (Bilevel mode : {Bilevel::alternating, Bilevel::joint}) {
    SearchConfig c = tiny_config();
    c.freeze_alpha = true;
    c.bilevel = mode;
    Searcher s(c);
    const GateParams before = s.gates();
    s.search_step();
    EXPECT_EQ(s.gates().alpha, before.alpha);
    EXPECT_EQ(s.gates().fusion_logits, before.fusion_logits);
  }
}

TEST(Searcher, UnderBudgetArchitectureStepIgnoresPenalty) {
  SearchConfig c = tiny_config();
  c.budget_flops = 1e15;
  Searcher s(c);
  const StepMetrics m = s.search_step();
  EXPECT_EQ(m.penalty, 0.0);
  EXPECT_LT(m.expected_flops, 1e15);
}

TEST(Searcher, BudgetDefaultsToFractionOfAllActive) {
  Searcher s(tiny_config());
  const std::vector<double> uniform(kFusionVariants, 0.25);
  EXPECT_DOUBLE_EQ(s.budget().flops, 0.6 * s.table().all_active(uniform));
  EXPECT_EQ(s.budget().unit, 1e9);
  EXPECT_EQ(s.total_steps(), 4);
}

TEST(Searcher, HistoryHasOneRecordPerEpoch) {
  SearchConfig c = tiny_config();
  c.strategy = Strategy::darts;
  Searcher s(c);
  s.run();
  ASSERT_EQ(s.history().size(), 2u);
  EXPECT_TRUE(s.finished());
  EXPECT_EQ(s.history()[1].step, 4);
  for (const auto& row : s.layer_weights()) {
    double sum = 0;
    for (double w : row) sum += w;
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  const ArchGenome g = s.derive();
  for (const auto& l : g.layers) EXPECT_EQ(l.size(), 1u);
  Searcher stepped(c);
  while (!stepped.finished()) stepped.search_step();
  ASSERT_EQ(stepped.history().size(), 2u);
  EXPECT_EQ(history_line(stepped.history()[1]), history_line(s.history()[1]));
  const std::string line = history_line(s.history()[0]);
  EXPECT_NE(line.find("\"expected_flops\""), std::string::npos);
}

// One-hot frozen gates turn the search into plain supervised training, whose
// smoothed loss (3-epoch moving average) should fall over the first epochs.
// Gumbel-sampled fusion weights keep single epochs noisy.
TEST(Searcher, FrozenOneHotGatesReduceTrainingLoss) {
  for (std::uint64_t seed : {0, 1, 2}) {
    SearchConfig c = tiny_config(seed);
    c.epochs = 5;
    c.batch_size = 8;
    c.train_samples = 128;
    c.freeze_alpha = true;
    Searcher s(c);
    for (int l = 0; l < s.gates().layers(); ++l) {
      auto& row = s.gates().alpha[l];
      std::fill(row.begin(), row.end(), 0.0);
      row[static_cast<std::size_t>(l % 6) * 2] = 1.0;
    }
    s.run();
    const auto& h = s.history();
    ASSERT_EQ(h.size(), 5u);
    std::vector<double> smooth;
    for (std::size_t e = 2; e < h.size(); ++e)
      smooth.push_back((h[e - 2].train_loss + h[e - 1].train_loss + h[e].train_loss) / 3);
    for (std::size_t e = 1; e < smooth.size(); ++e)
      EXPECT_LT(smooth[e], smooth[e - 1]) << "seed " << seed << " epoch " << e;
  }
}

ArchGenome small_genome(const SearchConfig& c) {
  ArchGenome g;
  g.input_h = g.input_w = c.input;
  g.keypoints = c.keypoints;
  for (int l = 0; l < 16; ++l) g.layers.push_back(l % 2 ? std::vector<int>{0} : std::vector<int>{1, 18});
  g.fusion = 1;
  return g;
}

TEST(Retrain, DeterministicAndShaped) {
  SearchConfig c = tiny_config();
  c.epochs = 1;
  const ArchGenome g = small_genome(c);
  const RetrainResult a = retrain_derived(g, c), b = retrain_derived(g, c);
  EXPECT_EQ(a.final_loss, b.final_loss);
  EXPECT_EQ(a.pck, b.pck);
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
  EXPECT_EQ(a.epoch_losses.size(), 1u);
  EXPECT_GE(a.pck, 0.0);
  EXPECT_LE(a.pck, 1.0);

  Network net = build_derived(g, 0);
  ForwardContext ctx(net.params, BnMode::eval);
  const Tensor y = network_forward(ctx, net, Tensor::zeros({3, 3, 32, 32}));
  EXPECT_EQ(y.shape(), (Shape{3, 2, 8, 8}));

  ArchGenome bad = g;
  bad.layers[3].clear();
  EXPECT_THROW(retrain_derived(bad, c), UsageError);
}

TEST(Retrain, DerivedNetworkCostMatchesGenome) {
  SearchConfig c = tiny_config();
  const ArchGenome g = small_genome(c);
  Network net = build_derived(g, 0);
  const Flops counted = instrumented_count(
      [&](const Tensor& x) {
        ForwardContext ctx(net.params, BnMode::train);
        network_forward(ctx, net, x);
      },
      Tensor::zeros({1, 3, 32, 32}));
  EXPECT_EQ(counted, genome_flops_exact(g, build_flops_table(genome_macro(g))));
}

}  // namespace
}  // namespace fpg
