#include "fpg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fpg {

namespace {

using Buffer = std::vector<double>;
using BufferPtr = std::shared_ptr<const Buffer>;

std::shared_ptr<Buffer> alloc(std::size_t n, double fill = 0.0) {
  return std::make_shared<Buffer>(n, fill);
}

// Records the op on the inputs' tape when any input is tracked.
Tensor finish(Shape shape, std::shared_ptr<Buffer> out,
              std::vector<Tensor> inputs, BackwardFn fn) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(inputs.size());
  for (const auto& t : inputs) ptrs.push_back(&t);
  Tape* tape = common_tape(ptrs);
  if (tape == nullptr) return Tensor(shape, BufferPtr(std::move(out)));
  return tape->record(shape, std::move(out), std::move(inputs), std::move(fn));
}

double sigmoid_of(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(shape), data_(std::make_shared<const Buffer>(std::move(values))) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1)
    throw ShapeError("tensor extents must be positive, got " + shape.str());
  if (data_->size() != shape.numel())
    throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                     " does not match shape " + shape.str());
}

Tensor::Tensor(Shape shape, std::shared_ptr<const std::vector<double>> values)
    : shape_(shape), data_(std::move(values)) {
  if (!data_ || data_->size() != shape.numel())
    throw ShapeError("tensor storage does not match shape " + shape.str());
}

Tensor Tensor::zeros(Shape shape) { return full(shape, 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  return Tensor(shape, Buffer(shape.numel(), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1, 1, 1}, {value}); }

double Tensor::at(int n, int c, int h, int w) const {
  const std::size_t idx =
      ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w +
      w;
  return (*data_)[idx];
}

double Tensor::item() const {
  if (numel() != 1)
    throw UsageError("item() on non-scalar tensor " + shape_.str());
  return (*data_)[0];
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::leaf(const Tensor& value) {
  Tensor t = value.detach();
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{value.shape(), {}, {}});
  return t;
}

Tensor Tape::record(Shape shape, std::shared_ptr<const std::vector<double>> out,
                    std::vector<Tensor> inputs, BackwardFn fn) {
  Node node{shape, {}, std::move(fn)};
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs)
    node.inputs.push_back(in.tape_ == this ? in.node_ : -1);
  Tensor t(shape, std::move(out));
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return t;
}

Gradients Tape::backward(const Tensor& root) const {
  if (root.shape() != Shape{1, 1, 1, 1})
    throw UsageError("backward root must be a scalar, got " +
                     root.shape().str());
  if (root.tape() != this || !root.grad_tracked())
    throw UsageError("backward root is not recorded on this tape");

  Gradients g;
  g.by_node_.resize(nodes_.size());
  g.by_node_[root.node()] = {1.0};
  for (int i = root.node(); i >= 0; --i) {
    const Node& node = nodes_[i];
    if (g.by_node_[i].empty() || !node.fn) continue;
    GradSink sink;
    sink.slots_.reserve(node.inputs.size());
    for (int in : node.inputs) {
      if (in < 0) {
        sink.slots_.emplace_back();
        continue;
      }
      auto& buf = g.by_node_[in];
      if (buf.empty()) buf.assign(nodes_[in].shape.numel(), 0.0);
      sink.slots_.emplace_back(buf);
    }
    node.fn(g.by_node_[i], sink);
    // Interior gradients are not needed once propagated.
    std::vector<double>().swap(g.by_node_[i]);
  }
  return g;
}

Tape* common_tape(std::span<const Tensor* const> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->grad_tracked()) continue;
    if (tape != nullptr && tape != t->tape())
      throw UsageError("op inputs are recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

Tensor Gradients::of(const Tensor& t) const {
  auto r = raw(t);
  if (r.empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), std::vector<double>(r.begin(), r.end()));
}

std::span<const double> Gradients::raw(const Tensor& t) const {
  if (!t.grad_tracked() || t.node() >= static_cast<int>(by_node_.size()))
    return {};
  return by_node_[t.node()];
}

bool Gradients::has(const Tensor& t) const { return !raw(t).empty(); }

// ---------------------------------------------------------------------------
// Elementwise

Tensor unary(const Tensor& x, UnaryKind kind) {
  const auto xs = x.data();
  const std::size_t n = xs.size();
  auto out = alloc(n);
  Buffer& y = *out;
  switch (kind) {
    case UnaryKind::silu:
      for (std::size_t i = 0; i < n; ++i) y[i] = xs[i] * sigmoid_of(xs[i]);
      break;
    case UnaryKind::sigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = sigmoid_of(xs[i]);
      break;
    case UnaryKind::relu:
      for (std::size_t i = 0; i < n; ++i) y[i] = xs[i] > 0 ? xs[i] : 0.0;
      break;
    case UnaryKind::square:
      for (std::size_t i = 0; i < n; ++i) y[i] = xs[i] * xs[i];
      break;
    case UnaryKind::log:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(xs[i] > 0))
          throw DomainError("log: non-positive input " + std::to_string(xs[i]) +
                            " at index " + std::to_string(i));
        y[i] = std::log(xs[i]);
      }
      break;
  }
  if (!x.grad_tracked()) return Tensor(x.shape(), BufferPtr(std::move(out)));
  BufferPtr xin = x.storage();
  BufferPtr yout = out;
  return finish(x.shape(), std::move(out), {x},
                [kind, xin, yout](std::span<const double> g,
                                  const GradSink& in) {
                  auto gx = in[0];
                  const Buffer& xv = *xin;
                  const Buffer& yv = *yout;
                  const std::size_t n = g.size();
                  switch (kind) {
                    case UnaryKind::silu:
                      for (std::size_t i = 0; i < n; ++i) {
                        const double s = sigmoid_of(xv[i]);
                        gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
                      }
                      break;
                    case UnaryKind::sigmoid:
                      for (std::size_t i = 0; i < n; ++i)
                        gx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                      break;
                    case UnaryKind::relu:
                      for (std::size_t i = 0; i < n; ++i)
                        if (xv[i] > 0) gx[i] += g[i];
                      break;
                    case UnaryKind::square:
                      for (std::size_t i = 0; i < n; ++i)
                        gx[i] += 2.0 * xv[i] * g[i];
                      break;
                    case UnaryKind::log:
                      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / xv[i];
                      break;
                  }
                });
}

namespace {

struct BroadcastPlan {
  std::size_t sn, sc, sh, sw;  // strides of b expressed against a's index
  bool same;
  bool per_plane_scalar;  // b is constant over each (n, c) plane
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  auto ok = [](int ea, int eb) { return eb == ea || eb == 1; };
  if (!ok(a.n, b.n) || !ok(a.c, b.c) || !ok(a.h, b.h) || !ok(a.w, b.w))
    throw ShapeError("cannot broadcast " + b.str() + " onto " + a.str());
  BroadcastPlan p{};
  p.same = a == b;
  p.sw = b.w == 1 ? 0 : 1;
  p.sh = b.h == 1 ? 0 : static_cast<std::size_t>(b.w);
  p.sc = b.c == 1 ? 0 : b.plane();
  p.sn = b.n == 1 ? 0 : static_cast<std::size_t>(b.c) * b.plane();
  p.per_plane_scalar = b.h == 1 && b.w == 1;
  return p;
}

// Calls fn(i_a, i_b) for every element of a in NCHW order.
template <typename Fn>
void for_each_broadcast(const Shape& a, const BroadcastPlan& p, Fn&& fn) {
  std::size_t ia = 0;
  for (int n = 0; n < a.n; ++n)
    for (int c = 0; c < a.c; ++c) {
      const std::size_t base = n * p.sn + c * p.sc;
      for (int h = 0; h < a.h; ++h)
        for (int w = 0; w < a.w; ++w, ++ia) fn(ia, base + h * p.sh + w * p.sw);
    }
}

}  // namespace

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
  const BroadcastPlan plan = plan_broadcast(a.shape(), b.shape());
  const auto av = a.data();
  const auto bv = b.data();
  auto out = alloc(a.numel());
  Buffer& y = *out;
  auto apply = [kind](double x, double z) {
    switch (kind) {
      case BinaryKind::add:
        return x + z;
      case BinaryKind::mul:
        return x * z;
      case BinaryKind::sub:
        return x - z;
    }
    return 0.0;
  };
  if (plan.same) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = apply(av[i], bv[i]);
  } else if (plan.per_plane_scalar) {
    const std::size_t hw = a.shape().plane();
    std::size_t i = 0;
    for (int n = 0; n < a.shape().n; ++n)
      for (int c = 0; c < a.shape().c; ++c) {
        const double z = bv[n * plan.sn + c * plan.sc];
        for (std::size_t k = 0; k < hw; ++k, ++i) y[i] = apply(av[i], z);
      }
  } else {
    for_each_broadcast(a.shape(), plan, [&](std::size_t ia, std::size_t ib) {
      y[ia] = apply(av[ia], bv[ib]);
    });
  }
  if (!a.grad_tracked() && !b.grad_tracked())
    return Tensor(a.shape(), BufferPtr(std::move(out)));
  BufferPtr ain = a.storage();
  BufferPtr bin = b.storage();
  const Shape as = a.shape();
  return finish(as, std::move(out), {a, b},
                [kind, plan, as, ain, bin](std::span<const double> g,
                                           const GradSink& in) {
                  auto ga = in[0];
                  auto gb = in[1];
                  const Buffer& A = *ain;
                  const Buffer& B = *bin;
                  if (!ga.empty()) {
                    if (kind == BinaryKind::mul) {
                      for_each_broadcast(as, plan,
                                         [&](std::size_t ia, std::size_t ib) {
                                           ga[ia] += g[ia] * B[ib];
                                         });
                    } else {
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    }
                  }
                  if (!gb.empty()) {
                    for_each_broadcast(as, plan,
                                       [&](std::size_t ia, std::size_t ib) {
                                         switch (kind) {
                                           case BinaryKind::add:
                                             gb[ib] += g[ia];
                                             break;
                                           case BinaryKind::sub:
                                             gb[ib] -= g[ia];
                                             break;
                                           case BinaryKind::mul:
                                             gb[ib] += g[ia] * A[ia];
                                             break;
                                         }
                                       });
                  }
                });
}

Tensor affine(const Tensor& x, double scale, double shift) {
  const auto xv = x.data();
  auto out = alloc(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i)
    (*out)[i] = scale * xv[i] + shift;
  return finish(x.shape(), std::move(out), {x},
                [scale](std::span<const double> g, const GradSink& in) {
                  auto gx = in[0];
                  for (std::size_t i = 0; i < g.size(); ++i)
                    gx[i] += scale * g[i];
                });
}

// ---------------------------------------------------------------------------
// Normalization and pooling

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BnMode mode, const BatchNormStats* running,
                   BatchNormStats* updated, double momentum, double eps) {
  const Shape s = x.shape();
  const int C = s.c;
  if (static_cast<int>(gamma.numel()) != C ||
      static_cast<int>(beta.numel()) != C)
    throw ShapeError("batchnorm2d: gamma/beta length must equal C=" +
                     std::to_string(C) + " of input " + s.str());
  if (mode == BnMode::eval &&
      (running == nullptr || static_cast<int>(running->mean.size()) != C ||
       static_cast<int>(running->var.size()) != C))
    throw ShapeError("batchnorm2d: eval mode needs running stats of length " +
                     std::to_string(C));

  const std::size_t hw = s.plane();
  const std::size_t count = static_cast<std::size_t>(s.n) * hw;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto mean = std::make_shared<Buffer>(C);
  auto inv_std = std::make_shared<Buffer>(C);
  Buffer batch_var(C);
  for (int c = 0; c < C; ++c) {
    if (mode == BnMode::train) {
      double sum = 0;
      for (int n = 0; n < s.n; ++n) {
        const double* p = xv.data() + (static_cast<std::size_t>(n) * C + c) * hw;
        for (std::size_t k = 0; k < hw; ++k) sum += p[k];
      }
      const double m = sum / static_cast<double>(count);
      double sq = 0;
      for (int n = 0; n < s.n; ++n) {
        const double* p = xv.data() + (static_cast<std::size_t>(n) * C + c) * hw;
        for (std::size_t k = 0; k < hw; ++k) sq += (p[k] - m) * (p[k] - m);
      }
      batch_var[c] = sq / static_cast<double>(count);
      (*mean)[c] = m;
      (*inv_std)[c] = 1.0 / std::sqrt(batch_var[c] + eps);
    } else {
      (*mean)[c] = running->mean[c];
      (*inv_std)[c] = 1.0 / std::sqrt(running->var[c] + eps);
    }
  }
  if (mode == BnMode::train && updated != nullptr) {
    updated->mean.resize(C);
    updated->var.resize(C);
    const double unbias =
        count > 1 ? static_cast<double>(count) / (count - 1) : 1.0;
    for (int c = 0; c < C; ++c) {
      const double rm = running ? running->mean[c] : 0.0;
      const double rv = running ? running->var[c] : 1.0;
      updated->mean[c] = (1 - momentum) * rm + momentum * (*mean)[c];
      updated->var[c] = (1 - momentum) * rv + momentum * batch_var[c] * unbias;
    }
  }

  auto xhat = std::make_shared<Buffer>(xv.size());
  auto out = alloc(xv.size());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
      const double m = (*mean)[c], is = (*inv_std)[c], ga = gv[c], be = bv[c];
      for (std::size_t k = 0; k < hw; ++k) {
        const double h = (xv[off + k] - m) * is;
        (*xhat)[off + k] = h;
        (*out)[off + k] = ga * h + be;
      }
    }
  if (!x.grad_tracked() && !gamma.grad_tracked() && !beta.grad_tracked())
    return Tensor(s, BufferPtr(std::move(out)));

  BufferPtr gamma_v = gamma.storage();
  return finish(
      s, std::move(out), {x, gamma, beta},
      [s, mode, xhat, inv_std, gamma_v, hw, count](std::span<const double> g,
                                                   const GradSink& in) {
        auto gx = in[0];
        auto ggamma = in[1];
        auto gbeta = in[2];
        const int C = s.c;
        for (int c = 0; c < C; ++c) {
          double sum_g = 0, sum_gh = 0;
          for (int n = 0; n < s.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
            for (std::size_t k = 0; k < hw; ++k) {
              sum_g += g[off + k];
              sum_gh += g[off + k] * (*xhat)[off + k];
            }
          }
          if (!ggamma.empty()) ggamma[c] += sum_gh;
          if (!gbeta.empty()) gbeta[c] += sum_g;
          if (gx.empty()) continue;
          const double ga = (*gamma_v)[c];
          const double is = (*inv_std)[c];
          if (mode == BnMode::eval) {
            for (int n = 0; n < s.n; ++n) {
              const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
              for (std::size_t k = 0; k < hw; ++k)
                gx[off + k] += g[off + k] * ga * is;
            }
            continue;
          }
          const double inv_m = 1.0 / static_cast<double>(count);
          for (int n = 0; n < s.n; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
            for (std::size_t k = 0; k < hw; ++k)
              gx[off + k] += ga * is * inv_m *
                             (static_cast<double>(count) * g[off + k] -
                              sum_g - (*xhat)[off + k] * sum_gh);
          }
        }
      });
}

Tensor global_avg_pool(const Tensor& x) {
  return reduce(x, ReduceKind::mean, ReduceAxes::spatial);
}

Tensor reduce(const Tensor& x, ReduceKind kind, ReduceAxes axes) {
  const Shape s = x.shape();
  Shape os = s;
  switch (axes) {
    case ReduceAxes::spatial:
      os.h = os.w = 1;
      break;
    case ReduceAxes::channel:
      os.c = 1;
      break;
    case ReduceAxes::all:
      os = {1, 1, 1, 1};
      break;
  }
  const auto xv = x.data();
  const std::size_t hw = s.plane();
  // Map each input index to its output index.
  auto out_index = [&](int n, int c, std::size_t k) -> std::size_t {
    switch (axes) {
      case ReduceAxes::spatial:
        return static_cast<std::size_t>(n) * s.c + c;
      case ReduceAxes::channel:
        return static_cast<std::size_t>(n) * hw + k;
      case ReduceAxes::all:
        return 0;
    }
    return 0;
  };
  const std::size_t group = s.numel() / os.numel();
  auto out = alloc(os.numel(), kind == ReduceKind::max ? -INFINITY : 0.0);
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (kind == ReduceKind::max) argmax->assign(os.numel(), 0);
  std::size_t i = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (std::size_t k = 0; k < hw; ++k, ++i) {
        const std::size_t o = out_index(n, c, k);
        if (kind == ReduceKind::max) {
          if (xv[i] > (*out)[o]) {
            (*out)[o] = xv[i];
            (*argmax)[o] = i;
          }
        } else {
          (*out)[o] += xv[i];
        }
      }
  if (kind == ReduceKind::mean)
    for (double& v : *out) v /= static_cast<double>(group);
  if (!x.grad_tracked()) return Tensor(os, BufferPtr(std::move(out)));
  return finish(os, std::move(out), {x},
                [s, kind, axes, group, argmax](std::span<const double> g,
                                               const GradSink& in) {
                  auto gx = in[0];
                  if (kind == ReduceKind::max) {
                    for (std::size_t o = 0; o < g.size(); ++o)
                      gx[(*argmax)[o]] += g[o];
                    return;
                  }
                  const double scale =
                      kind == ReduceKind::mean ? 1.0 / group : 1.0;
                  const std::size_t hw = s.plane();
                  std::size_t i = 0;
                  for (int n = 0; n < s.n; ++n)
                    for (int c = 0; c < s.c; ++c)
                      for (std::size_t k = 0; k < hw; ++k, ++i) {
                        std::size_t o = 0;
                        if (axes == ReduceAxes::spatial)
                          o = static_cast<std::size_t>(n) * s.c + c;
                        else if (axes == ReduceAxes::channel)
                          o = static_cast<std::size_t>(n) * hw + k;
                        gx[i] += g[o] * scale;
                      }
                });
}

// ---------------------------------------------------------------------------
// Resampling and channel plumbing

namespace {

struct Taps {
  int i0, i1;
  double w0, w1;
};

std::vector<Taps> bilinear_taps(int in, int out) {
  std::vector<Taps> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    const double l = src - i0;
    taps[o] = {i0, i1, 1.0 - l, l};
  }
  return taps;
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1)
    throw ShapeError("resize_bilinear: output extents must be >= 1");
  const Shape s = x.shape();
  const Shape os{s.n, s.c, out_h, out_w};
  if (out_h == s.h && out_w == s.w) {
    auto out = std::make_shared<Buffer>(x.data().begin(), x.data().end());
    return finish(os, std::move(out), {x},
                  [](std::span<const double> g, const GradSink& in) {
                    auto gx = in[0];
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                  });
  }
  const auto ty = std::make_shared<std::vector<Taps>>(bilinear_taps(s.h, out_h));
  const auto tx = std::make_shared<std::vector<Taps>>(bilinear_taps(s.w, out_w));
  const auto xv = x.data();
  auto out = alloc(os.numel());
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xv.data() + p * s.plane();
    double* dst = out->data() + p * os.plane();
    for (int oy = 0; oy < out_h; ++oy) {
      const Taps& a = (*ty)[oy];
      for (int ox = 0; ox < out_w; ++ox) {
        const Taps& b = (*tx)[ox];
        const double top = b.w0 * src[a.i0 * s.w + b.i0] + b.w1 * src[a.i0 * s.w + b.i1];
        const double bot = b.w0 * src[a.i1 * s.w + b.i0] + b.w1 * src[a.i1 * s.w + b.i1];
        dst[oy * out_w + ox] = a.w0 * top + a.w1 * bot;
      }
    }
  }
  if (!x.grad_tracked()) return Tensor(os, BufferPtr(std::move(out)));
  return finish(os, std::move(out), {x},
                [s, os, ty, tx, planes](std::span<const double> g,
                                        const GradSink& in) {
                  auto gx = in[0];
                  for (std::size_t p = 0; p < planes; ++p) {
                    double* dst = gx.data() + p * s.plane();
                    const double* src = g.data() + p * os.plane();
                    for (int oy = 0; oy < os.h; ++oy) {
                      const Taps& a = (*ty)[oy];
                      for (int ox = 0; ox < os.w; ++ox) {
                        const Taps& b = (*tx)[ox];
                        const double v = src[oy * os.w + ox];
                        dst[a.i0 * s.w + b.i0] += v * a.w0 * b.w0;
                        dst[a.i0 * s.w + b.i1] += v * a.w0 * b.w1;
                        dst[a.i1 * s.w + b.i0] += v * a.w1 * b.w0;
                        dst[a.i1 * s.w + b.i1] += v * a.w1 * b.w1;
                      }
                    }
                  }
                });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no parts");
  const Shape first = parts[0].shape();
  int total_c = 0;
  for (const auto& p : parts) {
    const Shape ps = p.shape();
    if (ps.n != first.n || ps.h != first.h || ps.w != first.w)
      throw ShapeError("concat_channels: spatial mismatch " + ps.str() +
                       " vs " + first.str());
    total_c += ps.c;
  }
  const Shape os{first.n, total_c, first.h, first.w};
  const std::size_t hw = first.plane();
  auto out = alloc(os.numel());
  std::vector<int> offsets;
  int c0 = 0;
  for (const auto& p : parts) {
    offsets.push_back(c0);
    const int pc = p.shape().c;
    const auto pv = p.data();
    for (int n = 0; n < first.n; ++n)
      std::copy_n(pv.data() + static_cast<std::size_t>(n) * pc * hw, pc * hw,
                  out->data() + (static_cast<std::size_t>(n) * total_c + c0) * hw);
    c0 += pc;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<int> widths;
  for (const auto& p : parts) widths.push_back(p.shape().c);
  return finish(os, std::move(out), std::move(inputs),
                [os, hw, offsets, widths](std::span<const double> g,
                                          const GradSink& in) {
                  for (std::size_t k = 0; k < widths.size(); ++k) {
                    auto gp = in[k];
                    if (gp.empty()) continue;
                    const int pc = widths[k];
                    for (int n = 0; n < os.n; ++n) {
                      const double* src =
                          g.data() +
                          (static_cast<std::size_t>(n) * os.c + offsets[k]) * hw;
                      double* dst = gp.data() + static_cast<std::size_t>(n) * pc * hw;
                      for (std::size_t i = 0; i < pc * hw; ++i) dst[i] += src[i];
                    }
                  }
                });
}

Tensor slice_channels(const Tensor& x, int start, int count) {
  const Shape s = x.shape();
  if (start < 0 || count < 1 || start + count > s.c)
    throw ShapeError("slice_channels: [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " + s.str());
  const Shape os{s.n, count, s.h, s.w};
  const std::size_t hw = s.plane();
  auto out = alloc(os.numel());
  const auto xv = x.data();
  for (int n = 0; n < s.n; ++n)
    std::copy_n(xv.data() + (static_cast<std::size_t>(n) * s.c + start) * hw,
                count * hw, out->data() + static_cast<std::size_t>(n) * count * hw);
  return finish(os, std::move(out), {x},
                [s, start, count, hw](std::span<const double> g,
                                      const GradSink& in) {
                  auto gx = in[0];
                  for (int n = 0; n < s.n; ++n) {
                    const double* src = g.data() + static_cast<std::size_t>(n) * count * hw;
                    double* dst =
                        gx.data() + (static_cast<std::size_t>(n) * s.c + start) * hw;
                    for (std::size_t i = 0; i < count * hw; ++i) dst[i] += src[i];
                  }
                });
}

// ---------------------------------------------------------------------------
// Softmax and sums

Tensor softmax(const Tensor& x, SoftmaxAxis axis) {
  const Shape s = x.shape();
  const std::size_t hw = s.plane();
  // Each softmax group: `len` elements spaced `stride` apart from `start`.
  std::size_t groups, len, stride;
  if (axis == SoftmaxAxis::channel) {
    groups = static_cast<std::size_t>(s.n) * hw;
    len = s.c;
    stride = hw;
  } else {
    groups = static_cast<std::size_t>(s.n) * s.c;
    len = hw;
    stride = 1;
  }
  auto start_of = [=](std::size_t gi) -> std::size_t {
    if (axis == SoftmaxAxis::channel)
      return (gi / hw) * s.c * hw + gi % hw;
    return gi * hw;
  };
  const auto xv = x.data();
  auto out = alloc(x.numel());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t b = start_of(gi);
    double mx = -INFINITY;
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xv[b + k * stride]);
    double z = 0;
    for (std::size_t k = 0; k < len; ++k) {
      const double e = std::exp(xv[b + k * stride] - mx);
      (*out)[b + k * stride] = e;
      z += e;
    }
    for (std::size_t k = 0; k < len; ++k) (*out)[b + k * stride] /= z;
  }
  if (!x.grad_tracked()) return Tensor(s, BufferPtr(std::move(out)));
  BufferPtr y = out;
  return finish(s, std::move(out), {x},
                [y, groups, len, stride, start_of](std::span<const double> g,
                                                   const GradSink& in) {
                  auto gx = in[0];
                  const Buffer& Y = *y;
                  for (std::size_t gi = 0; gi < groups; ++gi) {
                    const std::size_t b = start_of(gi);
                    double dot = 0;
                    for (std::size_t k = 0; k < len; ++k)
                      dot += g[b + k * stride] * Y[b + k * stride];
                    for (std::size_t k = 0; k < len; ++k) {
                      const std::size_t i = b + k * stride;
                      gx[i] += Y[i] * (g[i] - dot);
                    }
                  }
                });
}

Tensor weighted_sum(std::span<const Tensor> parts, const Tensor& weights) {
  if (parts.empty()) throw ShapeError("weighted_sum: no parts");
  if (weights.shape() != Shape{1, static_cast<int>(parts.size()), 1, 1})
    throw ShapeError("weighted_sum: weights " + weights.shape().str() +
                     " do not match " + std::to_string(parts.size()) + " parts");
  const Shape s = parts[0].shape();
  for (const auto& p : parts)
    if (p.shape() != s)
      throw ShapeError("weighted_sum: part " + p.shape().str() + " vs " + s.str());
  const auto wv = weights.data();
  auto out = alloc(s.numel());
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    const double wk = wv[k];
    for (std::size_t i = 0; i < pv.size(); ++i) (*out)[i] += wk * pv[i];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  inputs.push_back(weights);
  std::vector<BufferPtr> values;
  for (const auto& p : parts) values.push_back(p.storage());
  BufferPtr wstore = weights.storage();
  return finish(s, std::move(out), std::move(inputs),
                [values, wstore](std::span<const double> g, const GradSink& in) {
                  const std::size_t P = values.size();
                  auto gw = in[P];
                  for (std::size_t k = 0; k < P; ++k) {
                    const Buffer& pv = *values[k];
                    if (in.wants(k)) {
                      auto gp = in[k];
                      const double wk = (*wstore)[k];
                      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += wk * g[i];
                    }
                    if (!gw.empty()) {
                      double acc = 0;
                      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * pv[i];
                      gw[k] += acc;
                    }
                  }
                });
}

Tensor sum_of(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("sum_of: no parts");
  const Shape s = parts[0].shape();
  auto out = std::make_shared<Buffer>(parts[0].data().begin(),
                                      parts[0].data().end());
  for (std::size_t k = 1; k < parts.size(); ++k) {
    if (parts[k].shape() != s)
      throw ShapeError("sum_of: part " + parts[k].shape().str() + " vs " + s.str());
    const auto pv = parts[k].data();
    for (std::size_t i = 0; i < pv.size(); ++i) (*out)[i] += pv[i];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  const std::size_t P = parts.size();
  return finish(s, std::move(out), std::move(inputs),
                [P](std::span<const double> g, const GradSink& in) {
                  for (std::size_t k = 0; k < P; ++k) {
                    auto gp = in[k];
                    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[i];
                  }
                });
}

// ---------------------------------------------------------------------------
// Finite-difference check

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
  Tape tape;
  const Tensor xl = tape.leaf(x);
  const Tensor y = f(xl);
  const Gradients grads = tape.backward(y);
  const Tensor analytic = grads.of(xl);

  const auto base = x.data();
  double worst = 0;
  std::vector<double> probe(base.begin(), base.end());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig - h;
    const double fm = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig;
    const double numeric = (fp - fm) / (2 * h);
    const double a = analytic[i];
    const double rel =
        std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// MAC counting

namespace {
thread_local MacCounterScope* g_active_counter = nullptr;
}

MacCounterScope::MacCounterScope() : previous_(g_active_counter) {
  g_active_counter = this;
}

MacCounterScope::~MacCounterScope() { g_active_counter = previous_; }

std::uint64_t MacCounterScope::macs() const { return macs_; }

bool mac_counting_active() { return g_active_counter != nullptr; }

void count_macs(std::uint64_t n) {
  if (g_active_counter != nullptr) g_active_counter->macs_ += n;
}

}  // namespace fpg
