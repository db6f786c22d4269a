#include "fpg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fpg/flops.hpp"
#include "fpg/gating.hpp"
#include "fpg/searchspace.hpp"
#include "fpg/trainer.hpp"

namespace fpg {

const char* grad_scope_name(GradScope s) {
  switch (s) {
    case GradScope::gate: return "gate";
    case GradScope::ops: return "ops";
    case GradScope::block: return "block";
    case GradScope::fusion: return "fusion";
    case GradScope::supernet: return "supernet";
  }
  return "?";
}

GradScope parse_grad_scope(const std::string& s) {
  for (GradScope g : {GradScope::gate, GradScope::ops, GradScope::block,
                      GradScope::fusion, GradScope::supernet})
    if (s == grad_scope_name(g)) return g;
  throw ConfigError("unknown gradcheck scope '" + s +
                    "' (expected gate|ops|block|fusion|supernet)");
}

namespace {

double rel_error(double a, double n) {
  return std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n));
}

Tensor random_tensor(Rng& rng, Shape s, double lo = -1, double hi = 1) {
  std::vector<double> v(s.numel());
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(s, std::move(v));
}

// Scalar probe Σ y ⊙ R with a fixed random R, so every output entry matters.
Tensor project(const Tensor& y, std::uint64_t salt) {
  Rng rng = Rng::substream(salt, "gradcheck.projection");
  return sum_all(mul(y, random_tensor(rng, y.shape())));
}

}  // namespace

double gate_grad_error(std::uint64_t seed, int pairs) {
  Rng rng = Rng::substream(seed, "gradcheck.gate");
  double worst = 0;
  for (int i = 0; i < pairs; ++i) {
    const double a = rng.uniform(-3, 3);
    const double eps = std::exp(rng.uniform(std::log(1e-3), std::log(1.0)));
    // Richardson-extrapolated central differences with a step proportional
    // to the transition width: O(h⁴) truncation and little cancellation in
    // the saturated tails.
    const double h = 1e-3 * std::sqrt(a * a + eps);
    auto central = [&](double s) { return (gate(a + s, eps) - gate(a - s, eps)) / (2 * s); };
    const double numeric = (4 * central(h / 2) - central(h)) / 3;
    worst = std::max(worst, rel_error(gate_grad(a, eps), numeric));
  }
  return worst;
}

double param_grad_check(ParamStore& store, ParamId id,
                        const std::function<Tensor(ForwardContext&)>& loss,
                        std::size_t max_entries, double h) {
  std::vector<double> analytic;
  {
    Tape tape;
    ForwardContext ctx(store, BnMode::train, &tape, true);
    ctx.set_update_running_stats(false);
    const Tensor y = loss(ctx);
    const Gradients g = tape.backward(y);
    for (const auto& [pid, leaf] : ctx.tracked())
      if (pid == id) {
        const Tensor gt = g.of(leaf);
        analytic.assign(gt.data().begin(), gt.data().end());
      }
  }
  const std::vector<double> orig(*store[id].value);
  if (analytic.empty()) analytic.assign(orig.size(), 0.0);
  auto eval = [&](const std::vector<double>& v) {
    store.set(id, v);
    ForwardContext ctx(store, BnMode::train);
    ctx.set_update_running_stats(false);
    return loss(ctx).item();
  };
  const std::size_t n = orig.size();
  const std::size_t stride = std::max<std::size_t>(1, n / max_entries);
  double worst = 0;
  std::vector<double> probe = orig;
  for (std::size_t i = 0; i < n; i += stride) {
    probe[i] = orig[i] + h;
    const double fp = eval(probe);
    probe[i] = orig[i] - h;
    const double fm = eval(probe);
    probe[i] = orig[i];
    worst = std::max(worst, rel_error(analytic[i], (fp - fm) / (2 * h)));
  }
  store.set(id, orig);
  return worst;
}

namespace {

using Results = std::vector<GradCheckResult>;

void add(Results& out, std::string name, double err, double tol) {
  out.push_back({std::move(name), err, tol});
}

void check_ops(Results& out, std::uint64_t seed) {
  Rng rng = Rng::substream(seed, "gradcheck.ops");
  const Shape s{2, 3, 4, 5};
  const Tensor x = random_tensor(rng, s);
  const Tensor pos = random_tensor(rng, s, 0.5, 2.0);
  const struct {
    const char* name;
    UnaryKind kind;
    bool smooth;
  } unaries[] = {{"silu", UnaryKind::silu, true},
                 {"sigmoid", UnaryKind::sigmoid, true},
                 {"relu", UnaryKind::relu, false},
                 {"square", UnaryKind::square, true},
                 {"log", UnaryKind::log, true}};
  for (const auto& u : unaries) {
    const Tensor& in = u.kind == UnaryKind::log ? pos : x;
    add(out, std::string("unary.") + u.name,
        grad_check([&](const Tensor& t) { return project(unary(t, u.kind), 1); }, in),
        u.smooth ? kSmoothTolerance : kKinkTolerance);
  }

  const Tensor other = random_tensor(rng, s);
  const Shape bshapes[] = {s, {1, 3, 1, 1}, {2, 3, 1, 1}, {2, 1, 4, 5}};
  for (BinaryKind k : {BinaryKind::add, BinaryKind::mul, BinaryKind::sub}) {
    for (const Shape& bs : bshapes) {
      const Tensor b = random_tensor(rng, bs);
      const std::string tag = "binary." + std::to_string(static_cast<int>(k)) + "." + bs.str();
      add(out, tag + ".a",
          grad_check([&](const Tensor& t) { return project(binary(t, b, k), 2); }, x),
          kSmoothTolerance);
      add(out, tag + ".b",
          grad_check([&](const Tensor& t) { return project(binary(x, t, k), 2); }, b),
          kSmoothTolerance);
    }
  }
  add(out, "affine",
      grad_check([&](const Tensor& t) { return project(affine(t, 1.7, -0.3), 3); }, x),
      kSmoothTolerance);

  const struct {
    int c_in, c_out, k;
    ConvSpec spec;
  } convs[] = {{3, 4, 3, {1, 1, 1, 1}}, {3, 4, 3, {2, 1, 1, 1}}, {4, 4, 5, {1, 2, 1, 4}},
               {4, 4, 3, {1, 2, 2, 4}}, {3, 6, 1, {1, 0, 1, 1}}, {4, 2, 1, {2, 0, 1, 1}},
               {4, 4, 7, {1, 3, 1, 4}}};
  for (const auto& c : convs) {
    const Tensor cx = random_tensor(rng, {2, c.c_in, 6, 7});
    const Tensor w = random_tensor(rng, {c.c_out, c.c_in / c.spec.groups, c.k, c.k});
    const std::string tag = "conv2d.k" + std::to_string(c.k) + ".s" +
                            std::to_string(c.spec.stride) + ".d" +
                            std::to_string(c.spec.dilation) + ".g" +
                            std::to_string(c.spec.groups);
    add(out, tag + ".x",
        grad_check([&](const Tensor& t) { return project(conv2d(t, w, c.spec), 4); }, cx),
        kSmoothTolerance);
    add(out, tag + ".w",
        grad_check([&](const Tensor& t) { return project(conv2d(cx, t, c.spec), 4); }, w),
        kSmoothTolerance);
  }

  const Tensor gamma = random_tensor(rng, {1, 3, 1, 1}, 0.5, 1.5);
  const Tensor beta = random_tensor(rng, {1, 3, 1, 1});
  BatchNormStats running{{0.1, -0.2, 0.3}, {1.2, 0.8, 1.5}};
  auto bn = [&](BnMode mode, const Tensor& a, const Tensor& g, const Tensor& b) {
    return project(batchnorm2d(a, g, b, mode, &running, nullptr), 5);
  };
  for (BnMode mode : {BnMode::train, BnMode::eval}) {
    const std::string tag = mode == BnMode::train ? "batchnorm.train" : "batchnorm.eval";
    add(out, tag + ".x",
        grad_check([&](const Tensor& t) { return bn(mode, t, gamma, beta); }, x),
        kSmoothTolerance);
    add(out, tag + ".gamma",
        grad_check([&](const Tensor& t) { return bn(mode, x, t, beta); }, gamma),
        kSmoothTolerance);
    add(out, tag + ".beta",
        grad_check([&](const Tensor& t) { return bn(mode, x, gamma, t); }, beta),
        kSmoothTolerance);
  }

  add(out, "global_avg_pool",
      grad_check([&](const Tensor& t) { return project(global_avg_pool(t), 6); }, x),
      kSmoothTolerance);
  for (auto [oh, ow] : {std::pair{8, 10}, std::pair{2, 3}, std::pair{7, 4}})
    add(out, "resize_bilinear." + std::to_string(oh) + "x" + std::to_string(ow),
        grad_check([&, oh = oh, ow = ow](const Tensor& t) {
          return project(resize_bilinear(t, oh, ow), 7);
        }, x),
        kSmoothTolerance);
  const Tensor y2 = random_tensor(rng, {2, 2, 4, 5});
  add(out, "concat_channels",
      grad_check([&](const Tensor& t) {
        const Tensor parts[] = {y2, t, y2};
        return project(concat_channels(parts), 8);
      }, x),
      kSmoothTolerance);
  add(out, "slice_channels",
      grad_check([&](const Tensor& t) { return project(slice_channels(t, 1, 2), 9); }, x),
      kSmoothTolerance);
  for (ReduceKind k : {ReduceKind::sum, ReduceKind::mean, ReduceKind::max})
    for (ReduceAxes a : {ReduceAxes::spatial, ReduceAxes::channel, ReduceAxes::all})
      add(out, "reduce." + std::to_string(static_cast<int>(k)) + "." +
                   std::to_string(static_cast<int>(a)),
          grad_check([&](const Tensor& t) { return project(reduce(t, k, a), 10); }, x),
          k == ReduceKind::max ? kKinkTolerance : kSmoothTolerance);
  for (SoftmaxAxis a : {SoftmaxAxis::channel, SoftmaxAxis::spatial})
    add(out, std::string("softmax.") + (a == SoftmaxAxis::channel ? "channel" : "spatial"),
        grad_check([&](const Tensor& t) { return project(softmax(t, a), 11); }, x),
        kSmoothTolerance);

  const Tensor ws = random_tensor(rng, {1, 3, 1, 1});
  add(out, "weighted_sum.parts",
      grad_check([&](const Tensor& t) {
        const Tensor parts[] = {t, other, affine(t, 2, 0)};
        return project(weighted_sum(parts, ws), 12);
      }, x),
      kSmoothTolerance);
  add(out, "weighted_sum.weights",
      grad_check([&](const Tensor& t) {
        const Tensor parts[] = {x, other, pos};
        return project(weighted_sum(parts, t), 12);
      }, ws),
      kSmoothTolerance);
  add(out, "sum_of",
      grad_check([&](const Tensor& t) {
        const Tensor parts[] = {t, other, t};
        return project(sum_of(parts), 13);
      }, x),
      kSmoothTolerance);

  const Tensor row = random_tensor(rng, {1, kCandidates, 1, 1}, -1.5, 1.5);
  for (Strategy st : {Strategy::fpg, Strategy::darts, Strategy::dnal})
    add(out, std::string("candidate_weights.") + strategy_name(st),
        grad_check([&](const Tensor& t) {
          return project(candidate_weights(st, t, 0.05, 3.0), 14);
        }, row),
        kSmoothTolerance);
  Rng noise_rng = Rng::substream(seed, "gradcheck.gumbel");
  const auto noise = gumbel_noise(noise_rng, kFusionVariants);
  const Tensor logits = random_tensor(rng, {1, kFusionVariants, 1, 1});
  add(out, "gumbel_softmax",
      grad_check([&](const Tensor& t) { return project(gumbel_softmax(t, 1.3, noise), 15); },
                 logits),
      kSmoothTolerance);

  const Tensor target = random_tensor(rng, s, 0.0, 1.0);
  add(out, "kl_loss",
      grad_check([&](const Tensor& t) { return kl_loss(t, target); }, x), kSmoothTolerance);
  add(out, "mse_loss",
      grad_check([&](const Tensor& t) { return mse_loss(t, target); }, x), kSmoothTolerance);

  // Expected FLOPs and the budget penalty, on the desk table scaled to
  // billions so the finite differences stay well conditioned.
  const FlopsTable table = build_flops_table(build_macro(Profile::desk, 64, 64, 4));
  const std::vector<double> fw_values(kFusionVariants, 0.25);
  std::vector<Tensor> rows;
  for (int l = 0; l < table.layers(); ++l)
    rows.push_back(random_tensor(rng, {1, kCandidates, 1, 1}, 0.0, 1.0));
  const Tensor fw(Shape{1, kFusionVariants, 1, 1}, fw_values);
  add(out, "total_expected_flops.gates",
      grad_check([&](const Tensor& t) {
        auto r = rows;
        r[3] = t;
        return affine(total_expected_flops(table, r, fw), 1e-9, 0);
      }, rows[3]),
      kSmoothTolerance);
  add(out, "total_expected_flops.fusion",
      grad_check([&](const Tensor& t) {
        return affine(total_expected_flops(table, rows, t), 1e-9, 0);
      }, fw),
      kSmoothTolerance);
  const Budget budget{5e7, 1e9};
  for (double total : {4e7, 9e7}) {
    const Tensor ft = Tensor::scalar(total);
    add(out, total < budget.flops ? "budget_penalty.under" : "budget_penalty.over",
        grad_check([&](const Tensor& t) {
          return affine(budget_penalty(t, budget, 0.7), 1e6, 0);
        }, ft, 1.0),
        kKinkTolerance);
  }
}

MacroArch tiny_macro() {
  return build_macro(Profile::desk, 32, 32, 2, std::array<int, kStageGroups>{1, 1, 1, 1, 1, 1, 1});
}

void check_block(Results& out, std::uint64_t seed) {
  Rng rng = Rng::substream(seed, "gradcheck.block");
  // Expanded residual block with SE and a strided variant.
  const struct {
    int c_in, c_out, k, e, kg, stride;
  } cases[] = {{4, 4, 3, 3, 3, 1}, {4, 6, 5, 6, 5, 2}, {4, 4, 7, 1, 3, 1}};
  for (const auto& c : cases) {
    ParamStore ps;
    Rng init = Rng::substream(seed, "gradcheck.block.init");
    const Block b = make_block(ps, init, "b", c.c_in, c.c_out, c.k, c.e, c.kg, c.stride);
    const Tensor x = random_tensor(rng, {2, c.c_in, 6, 6});
    const std::string tag = "block.k" + std::to_string(c.k) + ".e" + std::to_string(c.e) +
                            ".s" + std::to_string(c.stride);
    add(out, tag + ".x", grad_check([&](const Tensor& t) {
          ForwardContext ctx(ps, BnMode::train);
          ctx.set_update_running_stats(false);
          return project(block_forward(ctx, b, t), 20);
        }, x),
        kKinkTolerance);
    auto loss = [&](ForwardContext& ctx) { return project(block_forward(ctx, b, x), 20); };
    for (ParamId id : {b.expand.primary.weight, b.dw.weight, b.se.reduce.weight,
                       b.project.cheap.weight, b.dw_bn.gamma})
      add(out, tag + "." + ps[id].name, param_grad_check(ps, id, loss), kKinkTolerance);
  }
  ParamStore ps;
  Rng init = Rng::substream(seed, "gradcheck.skip.init");
  const Skip sk = make_skip(ps, init, "skip", 4, 6, 2);
  const Tensor x = random_tensor(rng, {2, 4, 6, 6});
  add(out, "skip.projection.x", grad_check([&](const Tensor& t) {
        ForwardContext ctx(ps, BnMode::train);
        ctx.set_update_running_stats(false);
        return project(skip_forward(ctx, sk, t), 21);
      }, x),
      kKinkTolerance);
}

void check_fusion(Results& out, std::uint64_t seed) {
  Rng rng = Rng::substream(seed, "gradcheck.fusion");
  const int taps_c[] = {3, 4, 5, 6};
  std::vector<Tensor> taps;
  // The coarsest tap keeps 2x2 cells so batch norm sees 8 values per channel.
  for (int i = 0; i < 4; ++i)
    taps.push_back(random_tensor(rng, {2, taps_c[i], 16 >> i, 16 >> i}));
  for (int v = 0; v < kFusionVariants; ++v) {
    ParamStore ps;
    Rng init = Rng::substream(seed, "gradcheck.fusion.init", v);
    const Fusion f = make_fusion(ps, init, "f", static_cast<FusionVariant>(v), taps_c, 4, 8, 8);
    const std::string tag = std::string("fusion.") + fusion_name(f.variant);
    for (int i : {0, 3})
      add(out, tag + ".tap" + std::to_string(i), grad_check([&](const Tensor& t) {
            ForwardContext ctx(ps, BnMode::train);
            ctx.set_update_running_stats(false);
            auto in = taps;
            in[i] = t;
            return project(fusion_forward(ctx, f, in), 30);
          }, taps[i]),
          kKinkTolerance);
    auto loss = [&](ForwardContext& ctx) { return project(fusion_forward(ctx, f, taps), 30); };
    std::vector<ParamId> ids{f.proj[0].weight, f.proj[3].weight};
    if (f.variant == FusionVariant::dilated || f.variant == FusionVariant::attention)
      ids.push_back(f.extra.weight);
    if (f.variant == FusionVariant::se) ids.push_back(f.se.expand.weight);
    for (ParamId id : ids)
      add(out, tag + "." + ps[id].name, param_grad_check(ps, id, loss), kKinkTolerance);
  }
}

void check_supernet(Results& out, std::uint64_t seed) {
  Rng rng = Rng::substream(seed, "gradcheck.supernet");
  // Two gated layers over a handful of candidates each, then a KL loss.
  ParamStore ps;
  Rng init = Rng::substream(seed, "gradcheck.supernet.init");
  const auto& specs = enumerate_candidates();
  const int picks[] = {0, 7, 13, kCandidates - 1};
  std::vector<std::vector<CandidateModule>> layers(2);
  const int cin[] = {4, 4}, cout[] = {4, 6}, stride[] = {1, 2};
  for (int l = 0; l < 2; ++l)
    for (int idx : picks) {
      const CandidateSpec& cs = specs[idx];
      const std::string name = "l" + std::to_string(l) + "." + std::to_string(idx);
      if (cs.is_skip())
        layers[l].push_back(make_skip(ps, init, name, cin[l], cout[l], stride[l]));
      else
        layers[l].push_back(make_block(ps, init, name, cin[l], cout[l], cs.kernel,
                                       cs.expansion, cs.k_ghost, stride[l]));
    }
  const Tensor x = random_tensor(rng, {2, 4, 8, 8});
  const Tensor target = random_tensor(rng, {2, 6, 4, 4}, 0.0, 1.0);
  std::vector<Tensor> alpha{random_tensor(rng, {1, 4, 1, 1}, -1, 1),
                            random_tensor(rng, {1, 4, 1, 1}, -1, 1)};
  const double eps = 0.3;
  auto forward = [&](ForwardContext& ctx, const std::vector<Tensor>& a, const Tensor& in) {
    Tensor h = in;
    for (int l = 0; l < 2; ++l) {
      std::vector<Tensor> outs;
      for (const auto& m : layers[l]) outs.push_back(candidate_forward(ctx, m, h));
      h = weighted_sum(outs, polarized_gate(a[l], eps));
    }
    return kl_loss(h, target);
  };
  for (int l = 0; l < 2; ++l)
    add(out, "supernet.alpha" + std::to_string(l), grad_check([&](const Tensor& t) {
          ForwardContext ctx(ps, BnMode::train);
          ctx.set_update_running_stats(false);
          auto a = alpha;
          a[l] = t;
          return forward(ctx, a, x);
        }, alpha[l]),
        kKinkTolerance);
  add(out, "supernet.x", grad_check([&](const Tensor& t) {
        ForwardContext ctx(ps, BnMode::train);
        ctx.set_update_running_stats(false);
        return forward(ctx, alpha, t);
      }, x),
      kKinkTolerance);
  auto loss = [&](ForwardContext& ctx) { return forward(ctx, alpha, x); };
  for (const char* name : {"l0.0.expand.primary.w", "l1.7.dw.w", "l1.18.proj.w"})
    if (auto id = ps.find(name))
      add(out, std::string("supernet.") + name, param_grad_check(ps, *id, loss), kKinkTolerance);

  // Architecture gradient of the full gated network on a small macro.
  const MacroArch macro = tiny_macro();
  Network net = build_supernet(macro, seed);
  const Tensor img = random_tensor(rng, {1, 3, 32, 32});
  const Tensor tgt = random_tensor(rng, {1, 2, 8, 8}, 0.0, 1.0);
  std::vector<Tensor> rows;
  for (int l = 0; l < macro.num_layers(); ++l)
    rows.push_back(random_tensor(rng, {1, kCandidates, 1, 1}, 0.3, 1.2));
  const Tensor fw(Shape{1, kFusionVariants, 1, 1}, std::vector<double>(4, 0.25));
  add(out, "supernet.full.alpha", grad_check([&](const Tensor& t) {
        ForwardContext ctx(net.params, BnMode::train);
        ctx.set_update_running_stats(false);
        std::vector<Tensor> gates;
        for (int l = 0; l < macro.num_layers(); ++l)
          gates.push_back(polarized_gate(l == 5 ? t : rows[l], eps));
        return kl_loss(supernet_forward(ctx, net, img, gates, fw), tgt);
      }, rows[5]),
      kKinkTolerance);
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(GradScope scope, std::uint64_t seed) {
  Results out;
  switch (scope) {
    case GradScope::gate:
      add(out, "gate_grad", gate_grad_error(seed, 10000), kGateTolerance);
      break;
    case GradScope::ops:
      check_ops(out, seed);
      break;
    case GradScope::block:
      check_block(out, seed);
      break;
    case GradScope::fusion:
      check_fusion(out, seed);
      break;
    case GradScope::supernet:
      check_supernet(out, seed);
      break;
  }
  return out;
}

}  // namespace fpg
