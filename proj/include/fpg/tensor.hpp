#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fpg/errors.hpp"

namespace fpg {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class Tape;

// Dense NCHW float64 tensor. Values are immutable once constructed; a tensor
// produced by an op on tracked inputs carries the id of its tape node.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);
  Tensor(Shape shape, std::shared_ptr<const std::vector<double>> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return shape_.numel(); }
  std::span<const double> data() const {
    return data_ ? std::span<const double>(*data_) : std::span<const double>();
  }
  const std::shared_ptr<const std::vector<double>>& storage() const {
    return data_;
  }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(int n, int c, int h, int w) const;
  // Value of a (1,1,1,1) tensor.
  double item() const;

  bool grad_tracked() const { return node_ >= 0; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  Tensor detach() const { return Tensor(shape_, data_); }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Gradient buffers handed to an op's backward rule. Slot k refers to the k-th
// input the op was recorded with; an empty span means that input is untracked.
class GradSink {
 public:
  std::span<double> operator[](std::size_t slot) const { return slots_[slot]; }
  bool wants(std::size_t slot) const { return !slots_[slot].empty(); }

 private:
  friend class Tape;
  std::vector<std::span<double>> slots_;
};

using BackwardFn =
    std::function<void(std::span<const double> grad_out, const GradSink& in)>;

class Gradients;

// Append-only record of tracked operations. Single writer; node ids are
// assigned in execution order so the list is already topologically sorted.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `value` as a differentiable leaf.
  Tensor leaf(const Tensor& value);

  // Records an op output. Inputs that are untracked are kept as placeholders
  // so slot numbering in `fn` matches the argument order.
  Tensor record(Shape shape, std::shared_ptr<const std::vector<double>> out,
                std::vector<Tensor> inputs, BackwardFn fn);

  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar root. Gradient accumulation follows tape order.
  Gradients backward(const Tensor& root) const;

 private:
  struct Node {
    Shape shape;
    std::vector<int> inputs;  // -1 for untracked inputs
    BackwardFn fn;            // empty for leaves
  };
  std::vector<Node> nodes_;
};

class Gradients {
 public:
  // Gradient of the root w.r.t. a tracked tensor; zeros if it did not
  // contribute.
  Tensor of(const Tensor& t) const;
  std::span<const double> raw(const Tensor& t) const;
  bool has(const Tensor& t) const;

 private:
  friend class Tape;
  std::vector<std::vector<double>> by_node_;
};

// Returns the tape shared by all tracked inputs, or nullptr when none is
// tracked. Mixing tapes is a usage error.
Tape* common_tape(std::span<const Tensor* const> inputs);

// ---------------------------------------------------------------------------
// Operator catalog
// ---------------------------------------------------------------------------

enum class UnaryKind { silu, sigmoid, relu, square, log };
enum class BinaryKind { add, mul, sub };
enum class ReduceKind { sum, mean, max };
enum class ReduceAxes { spatial, channel, all };
enum class SoftmaxAxis { channel, spatial };
enum class BnMode { train, eval };

Tensor unary(const Tensor& x, UnaryKind kind);
inline Tensor silu(const Tensor& x) { return unary(x, UnaryKind::silu); }
inline Tensor sigmoid(const Tensor& x) { return unary(x, UnaryKind::sigmoid); }
inline Tensor relu(const Tensor& x) { return unary(x, UnaryKind::relu); }
inline Tensor square(const Tensor& x) { return unary(x, UnaryKind::square); }
inline Tensor log(const Tensor& x) { return unary(x, UnaryKind::log); }

// `b` broadcasts onto `a` along every axis where b's extent is 1.
Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind);
inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, BinaryKind::add);
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, BinaryKind::mul);
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, BinaryKind::sub);
}

// scale * x + shift, with constant coefficients.
Tensor affine(const Tensor& x, double scale, double shift);

struct ConvSpec {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

// Output extent along one spatial axis; throws ShapeError when < 1.
int conv_out_extent(int in, int kernel, const ConvSpec& spec);

// Bias-free 2-D convolution; w has shape (C_out, C_in/groups, K, K).
Tensor conv2d(const Tensor& x, const Tensor& w, const ConvSpec& spec);

struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;
};

inline constexpr double kBnMomentum = 0.1;
inline constexpr double kBnEps = 1e-5;

// Per-channel batch normalization. In train mode `stats` (if given) receives
// the updated running statistics; eval mode reads them and requires non-null.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BnMode mode, const BatchNormStats* running,
                   BatchNormStats* updated, double momentum = kBnMomentum,
                   double eps = kBnEps);

Tensor global_avg_pool(const Tensor& x);

// Half-pixel-centre bilinear resampling (no corner alignment).
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);

Tensor concat_channels(std::span<const Tensor> parts);
Tensor slice_channels(const Tensor& x, int start, int count);

Tensor reduce(const Tensor& x, ReduceKind kind, ReduceAxes axes);
inline Tensor sum_all(const Tensor& x) {
  return reduce(x, ReduceKind::sum, ReduceAxes::all);
}
inline Tensor mean_all(const Tensor& x) {
  return reduce(x, ReduceKind::mean, ReduceAxes::all);
}

Tensor softmax(const Tensor& x, SoftmaxAxis axis);

// Σ_k weights[k] * parts[k]; weights has shape (1, parts.size(), 1, 1).
Tensor weighted_sum(std::span<const Tensor> parts, const Tensor& weights);

// Σ_k parts[k], accumulated in order.
Tensor sum_of(std::span<const Tensor> parts);

// Scalar-valued function of one tensor, re-evaluated on a fresh tape per call.
using ScalarFn = std::function<Tensor(const Tensor& x)>;

// Max entrywise relative error |a-n| / max(1e-8, |a|+|n|) between the tape
// gradient and central differences with step h.
double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-4);

// Multiply-accumulate counter used by the FLOPs oracle. While a scope is
// alive on the current thread, conv2d runs an unoptimised reference kernel
// that counts every MAC it executes (zero-padded taps included).
class MacCounterScope {
 public:
  MacCounterScope();
  ~MacCounterScope();
  MacCounterScope(const MacCounterScope&) = delete;
  MacCounterScope& operator=(const MacCounterScope&) = delete;
  std::uint64_t macs() const;

 private:
  MacCounterScope* previous_;
  std::uint64_t macs_ = 0;
  friend void count_macs(std::uint64_t);
  friend bool mac_counting_active();
};

bool mac_counting_active();
void count_macs(std::uint64_t n);

}  // namespace fpg
