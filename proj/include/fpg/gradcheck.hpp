#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpg/nnops.hpp"

namespace fpg {

// Finite-difference suites: the gate law, every catalog op, a candidate
// block, each fusion variant and a two-layer gated supernet.
enum class GradScope { gate, ops, block, fusion, supernet };

const char* grad_scope_name(GradScope s);
GradScope parse_grad_scope(const std::string& s);

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  bool passed() const { return max_rel_error <= tolerance; }
};

inline constexpr double kSmoothTolerance = 1e-6;
inline constexpr double kKinkTolerance = 1e-3;
inline constexpr double kGateTolerance = 1e-8;

// gate_grad against central differences over `pairs` random (α, ε) draws.
double gate_grad_error(std::uint64_t seed, int pairs);

// Tape gradient of `loss` w.r.t. parameter `id` against central differences
// on up to `max_entries` evenly spaced entries.
double param_grad_check(ParamStore& store, ParamId id,
                        const std::function<Tensor(ForwardContext&)>& loss,
                        std::size_t max_entries = 24, double h = 1e-4);

std::vector<GradCheckResult> run_gradcheck(GradScope scope, std::uint64_t seed = 0);

}  // namespace fpg
