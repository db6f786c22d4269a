#include "fpg/gating.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace fpg {

double gate(double alpha, double epsilon) {
  if (!(epsilon > 0)) throw ConfigError("gate: epsilon must be > 0");
  const double a2 = alpha * alpha;
  return a2 / (a2 + epsilon);
}

double gate_grad(double alpha, double epsilon) {
  if (!(epsilon > 0)) throw ConfigError("gate_grad: epsilon must be > 0");
  const double d = alpha * alpha + epsilon;
  return 2.0 * alpha * epsilon / (d * d);
}

Tensor polarized_gate(const Tensor& alpha, double epsilon) {
  if (!(epsilon > 0)) throw ConfigError("polarized_gate: epsilon must be > 0");
  const auto av = alpha.data();
  auto out = std::make_shared<std::vector<double>>(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) (*out)[i] = gate(av[i], epsilon);
  if (!alpha.grad_tracked())
    return Tensor(alpha.shape(), std::shared_ptr<const std::vector<double>>(out));
  auto src = alpha.storage();
  return alpha.tape()->record(
      alpha.shape(), out, {alpha},
      [src, epsilon](std::span<const double> g, const GradSink& in) {
        auto ga = in[0];
        for (std::size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * gate_grad((*src)[i], epsilon);
      });
}

void Schedules::validate() const {
  if (total_steps < 1) throw ConfigError("schedule needs total_steps >= 1");
  for (double v : {eps_start, eps_end, tau_start, tau_end, lambda_start,
                   lambda_end, gamma_start, gamma_end})
    if (!(v > 0)) throw ConfigError("schedule endpoints must be positive");
}

double geometric_schedule(double start, double end, long t, long total) {
  if (t <= 0) return start;
  if (t >= total) return end;
  return start * std::pow(end / start, static_cast<double>(t) / total);
}

double epsilon_schedule(const Schedules& s, long t) {
  return geometric_schedule(s.eps_start, s.eps_end, t, s.total_steps);
}

double tau_schedule(const Schedules& s, long t) {
  return geometric_schedule(s.tau_start, s.tau_end, t, s.total_steps);
}

double dnal_gamma_schedule(const Schedules& s, long t) {
  return geometric_schedule(s.gamma_start, s.gamma_end, t, s.total_steps);
}

GateParams GateParams::initial(int layers, int candidates, int fusions) {
  GateParams g;
  g.alpha.assign(layers, std::vector<double>(candidates, 1.0));
  g.fusion_logits.assign(fusions, 0.0);
  g.epsilon = 0.1;
  g.step = 0;
  return g;
}

std::vector<double> gumbel_noise(Rng& rng, std::size_t n) {
  std::vector<double> g(n);
  for (double& v : g) v = -std::log(-std::log(rng.uniform_open()));
  return g;
}

std::vector<double> gumbel_softmax(std::span<const double> logits, double tau,
                                   std::span<const double> noise) {
  if (!(tau > 0)) throw ConfigError("gumbel_softmax: tau must be > 0");
  if (noise.size() != logits.size())
    throw UsageError("gumbel_softmax: noise length mismatch");
  std::vector<double> z(logits.size());
  double mx = -INFINITY;
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = (logits[i] + noise[i]) / tau;
    mx = std::max(mx, z[i]);
  }
  double total = 0;
  for (double& v : z) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : z) v /= total;
  return z;
}

std::vector<double> gumbel_softmax(std::span<const double> logits, double tau,
                                   Rng& rng) {
  const auto noise = gumbel_noise(rng, logits.size());
  return gumbel_softmax(logits, tau, noise);
}

Tensor gumbel_softmax(const Tensor& logits, double tau,
                      std::span<const double> noise) {
  if (!(tau > 0)) throw ConfigError("gumbel_softmax: tau must be > 0");
  if (noise.size() != logits.numel())
    throw UsageError("gumbel_softmax: noise length mismatch");
  const Tensor g(logits.shape(), std::vector<double>(noise.begin(), noise.end()));
  return softmax(affine(add(logits, g), 1.0 / tau, 0.0), SoftmaxAxis::channel);
}

std::vector<double> darts_weights(std::span<const double> alpha_row) {
  const Tensor row({1, static_cast<int>(alpha_row.size()), 1, 1},
                   std::vector<double>(alpha_row.begin(), alpha_row.end()));
  const Tensor w = softmax(row, SoftmaxAxis::channel);
  return {w.data().begin(), w.data().end()};
}

double dnal_gate(double alpha, double gamma) {
  if (!(gamma > 0)) throw ConfigError("dnal_gate: gamma must be > 0");
  const double z = gamma * alpha;
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::fpg:
      return "fpg";
    case Strategy::darts:
      return "darts";
    case Strategy::dnal:
      return "dnal";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  if (s == "fpg") return Strategy::fpg;
  if (s == "darts") return Strategy::darts;
  if (s == "dnal") return Strategy::dnal;
  throw ConfigError("unknown strategy '" + s + "' (expected fpg|darts|dnal)");
}

Tensor candidate_weights(Strategy s, const Tensor& alpha_row, double epsilon,
                         double gamma) {
  switch (s) {
    case Strategy::fpg:
      return polarized_gate(alpha_row, epsilon);
    case Strategy::darts:
      return softmax(alpha_row, SoftmaxAxis::channel);
    case Strategy::dnal:
      if (!(gamma > 0)) throw ConfigError("dnal: gamma must be > 0");
      return sigmoid(affine(alpha_row, gamma, 0.0));
  }
  return alpha_row;
}

std::vector<double> candidate_weights(Strategy s,
                                      std::span<const double> alpha_row,
                                      double epsilon, double gamma) {
  std::vector<double> w(alpha_row.size());
  switch (s) {
    case Strategy::fpg:
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = gate(alpha_row[i], epsilon);
      break;
    case Strategy::darts:
      w = darts_weights(alpha_row);
      break;
    case Strategy::dnal:
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = dnal_gate(alpha_row[i], gamma);
      break;
  }
  return w;
}

}  // namespace fpg
