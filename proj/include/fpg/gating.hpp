#pragma once

#include <span>
#include <string>
#include <vector>

#include "fpg/rng.hpp"
#include "fpg/tensor.hpp"

namespace fpg {

// Polarized gate g(α) = α² / (α² + ε). Throws ConfigError for ε <= 0.
double gate(double alpha, double epsilon);

// dg/dα = 2αε / (α² + ε)².
double gate_grad(double alpha, double epsilon);

// Elementwise polarized gate as a differentiable op.
Tensor polarized_gate(const Tensor& alpha, double epsilon);

// Endpoint pairs of every per-step schedule used during search.
struct Schedules {
  long total_steps = 1;
  double eps_start = 0.1, eps_end = 1e-3;
  double tau_start = 5.0, tau_end = 0.5;
  double lambda_start = 0.1, lambda_end = 1.0;
  double gamma_start = 1.0, gamma_end = 100.0;
  void validate() const;
};

// Geometric interpolation start * (end/start)^(t/T).
double geometric_schedule(double start, double end, long t, long total);

double epsilon_schedule(const Schedules& s, long t);
double tau_schedule(const Schedules& s, long t);
double dnal_gamma_schedule(const Schedules& s, long t);

// Architecture parameters of a search: one α row per backbone layer and
// one logit per fusion variant.
struct GateParams {
  std::vector<std::vector<double>> alpha;
  std::vector<double> fusion_logits;
  double epsilon = 0.1;
  long step = 0;

  // α = 1 everywhere, fusion logits 0, ε = 0.1.
  static GateParams initial(int layers, int candidates, int fusions);
  int layers() const { return static_cast<int>(alpha.size()); }
};

std::vector<double> gumbel_noise(Rng& rng, std::size_t n);

// Soft Gumbel-Softmax weights softmax((logits + G) / τ) for given noise G.
std::vector<double> gumbel_softmax(std::span<const double> logits, double tau,
                                   std::span<const double> noise);
std::vector<double> gumbel_softmax(std::span<const double> logits, double tau,
                                   Rng& rng);
// Differentiable w.r.t. `logits` (shape (1,F,1,1)) with the noise held fixed.
Tensor gumbel_softmax(const Tensor& logits, double tau,
                      std::span<const double> noise);

std::vector<double> darts_weights(std::span<const double> alpha_row);

double dnal_gate(double alpha, double gamma);

enum class Strategy { fpg, darts, dnal };
const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& s);

// Per-candidate weights of one layer under a weighting strategy:
// polarized gates (fpg), softmax (darts) or sigmoid(γα) (dnal).
Tensor candidate_weights(Strategy s, const Tensor& alpha_row, double epsilon,
                         double gamma);
std::vector<double> candidate_weights(Strategy s,
                                      std::span<const double> alpha_row,
                                      double epsilon, double gamma);

}  // namespace fpg
