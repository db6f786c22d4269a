#include <algorithm>
#include <cstdint>
#include <cstring>
#include <memory>
#include <string>

#include <Eigen/Core>

#include "fpg/tensor.hpp"

namespace fpg {

namespace {

using Buffer = std::vector<double>;

struct Geometry {
  Shape x, w, y;
  ConvSpec spec;
  int k;
  int cin_g, cout_g;
};

Geometry make_geometry(const Shape& xs, const Shape& ws, const ConvSpec& spec) {
  if (spec.stride < 1 || spec.dilation < 1 || spec.padding < 0 ||
      spec.groups < 1)
    throw ShapeError("conv2d: invalid stride/padding/dilation/groups");
  if (ws.h != ws.w) throw ShapeError("conv2d: kernel must be square, got " + ws.str());
  if (xs.c % spec.groups != 0 || ws.n % spec.groups != 0)
    throw ShapeError("conv2d: channels " + std::to_string(xs.c) + "->" +
                     std::to_string(ws.n) + " not divisible by groups " +
                     std::to_string(spec.groups));
  if (ws.c != xs.c / spec.groups)
    throw ShapeError("conv2d: weight " + ws.str() + " does not match input " +
                     xs.str() + " with groups " + std::to_string(spec.groups));
  Geometry g;
  g.x = xs;
  g.w = ws;
  g.spec = spec;
  g.k = ws.h;
  g.cin_g = ws.c;
  g.cout_g = ws.n / spec.groups;
  g.y = {xs.n, ws.n, conv_out_extent(xs.h, g.k, spec),
         conv_out_extent(xs.w, g.k, spec)};
  return g;
}

std::size_t plane_index(int n, int c, int channels) {
  return static_cast<std::size_t>(n) * channels + c;
}

bool is_pointwise(const Geometry& g) {
  return g.k == 1 && g.spec.padding == 0 && g.spec.groups == 1;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

// Dense 1x1 convolutions run as one matrix product over a (C, N*H*W)
// packing of the batch. Strided variants sample the input while packing.
RowMat pack_input(const Geometry& g, const double* x) {
  const int st = g.spec.stride;
  const std::size_t hw = g.y.plane();
  RowMat m(g.x.c, static_cast<Eigen::Index>(g.x.n * hw));
  for (int n = 0; n < g.x.n; ++n)
    for (int c = 0; c < g.x.c; ++c) {
      const double* src = x + plane_index(n, c, g.x.c) * g.x.plane();
      double* dst = m.data() + static_cast<std::size_t>(c) * m.cols() + n * hw;
      if (st == 1) {
        std::copy_n(src, hw, dst);
        continue;
      }
      for (int oy = 0; oy < g.y.h; ++oy)
        for (int ox = 0; ox < g.y.w; ++ox)
          dst[oy * g.y.w + ox] = src[static_cast<std::size_t>(oy) * st * g.x.w + ox * st];
    }
  return m;
}

RowMat pack_output(const Geometry& g, const double* y) {
  const std::size_t hw = g.y.plane();
  RowMat m(g.y.c, static_cast<Eigen::Index>(g.y.n * hw));
  for (int n = 0; n < g.y.n; ++n)
    for (int c = 0; c < g.y.c; ++c)
      std::copy_n(y + plane_index(n, c, g.y.c) * hw, hw,
                  m.data() + static_cast<std::size_t>(c) * m.cols() + n * hw);
  return m;
}

void pointwise_forward(const Geometry& g, const double* x, const double* w,
                       double* y) {
  const RowMat xp = pack_input(g, x);
  const RowMat yp = ConstMap(w, g.y.c, g.x.c) * xp;
  const std::size_t hw = g.y.plane();
  for (int n = 0; n < g.y.n; ++n)
    for (int c = 0; c < g.y.c; ++c)
      std::copy_n(yp.data() + static_cast<std::size_t>(c) * yp.cols() + n * hw, hw,
                  y + plane_index(n, c, g.y.c) * hw);
}

void pointwise_backward_input(const Geometry& g, const double* gy,
                              const double* w, double* gx) {
  const RowMat gxp = ConstMap(w, g.y.c, g.x.c).transpose() * pack_output(g, gy);
  const int st = g.spec.stride;
  const std::size_t hw = g.y.plane();
  for (int n = 0; n < g.x.n; ++n)
    for (int c = 0; c < g.x.c; ++c) {
      const double* src = gxp.data() + static_cast<std::size_t>(c) * gxp.cols() + n * hw;
      double* dst = gx + plane_index(n, c, g.x.c) * g.x.plane();
      for (int oy = 0; oy < g.y.h; ++oy)
        for (int ox = 0; ox < g.y.w; ++ox)
          dst[static_cast<std::size_t>(oy) * st * g.x.w + ox * st] += src[oy * g.y.w + ox];
    }
}

void pointwise_backward_weight(const Geometry& g, const double* gy,
                               const double* x, double* gw) {
  Eigen::Map<RowMat> out(gw, g.y.c, g.x.c);
  out.noalias() += pack_output(g, gy) * pack_input(g, x).transpose();
}

// Four doubles in one register; loads and stores go through memcpy so
// unaligned addresses are fine.
using V4 = double __attribute__((vector_size(32)));

inline V4 load4(const double* p) {
  V4 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store4(double* p, V4 v) { std::memcpy(p, &v, sizeof v); }

// Multi-accumulator dot product; fixed summation order keeps it deterministic.
double dot(const double* a, const double* b, std::size_t n) {
  V4 s0 = {0, 0, 0, 0}, s1 = s0;
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 += load4(a + i) * load4(b + i);
    s1 += load4(a + i + 4) * load4(b + i + 4);
  }
  const V4 s = s0 + s1;
  double tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return (s[0] + s[2]) + (s[1] + s[3]) + tail;
}

// dst[i] += Σ_t w[t] * src[i + off[t]] for i in [0, len).
void correlate(const double* src, const std::ptrdiff_t* off, const double* w,
               int taps, double* dst, std::size_t len) {
  std::size_t i = 0;
  for (; i + 16 <= len; i += 16) {
    V4 a0 = load4(dst + i), a1 = load4(dst + i + 4);
    V4 a2 = load4(dst + i + 8), a3 = load4(dst + i + 12);
    for (int t = 0; t < taps; ++t) {
      const double wv = w[t];
      const double* s = src + off[t] + i;
      a0 += wv * load4(s);
      a1 += wv * load4(s + 4);
      a2 += wv * load4(s + 8);
      a3 += wv * load4(s + 12);
    }
    store4(dst + i, a0);
    store4(dst + i + 4, a1);
    store4(dst + i + 8, a2);
    store4(dst + i + 12, a3);
  }
  for (; i + 4 <= len; i += 4) {
    V4 a0 = load4(dst + i);
    for (int t = 0; t < taps; ++t) a0 += w[t] * load4(src + off[t] + i);
    store4(dst + i, a0);
  }
  for (; i < len; ++i) {
    double acc = dst[i];
    for (int t = 0; t < taps; ++t) acc += w[t] * src[off[t] + i];
    dst[i] = acc;
  }
}

// Copies every (n, c) plane of `x` into a zero border of width `pad_y`/`pad_x`.
Buffer pad_planes(const double* x, int planes, int h, int w, int pad_y, int pad_x,
                  int out_h, int out_w) {
  Buffer p(static_cast<std::size_t>(planes) * out_h * out_w, 0.0);
  for (int q = 0; q < planes; ++q)
    for (int y = 0; y < h; ++y) {
      const double* src = x + (static_cast<std::size_t>(q) * h + y) * w;
      double* dst = p.data() + (static_cast<std::size_t>(q) * out_h + y + pad_y) * out_w + pad_x;
      std::copy(src, src + w, dst);
    }
  return p;
}

struct Padded {
  int ph, pw;  // padded input extent
  std::size_t len;  // flattened output span for stride 1
  // Taps that can reach real input; the rest only ever read zero padding.
  std::vector<int> taps;
  std::vector<std::ptrdiff_t> off;  // offsets of `taps` inside a padded plane
};

// True when some output position reads a real (unpadded) input row/column
// through kernel offset `k`.
bool tap_reaches_input(int k, int in, int out, const ConvSpec& s) {
  const int lo = k * s.dilation - s.padding;
  const int hi = (out - 1) * s.stride + lo;
  return hi >= 0 && lo <= in - 1;
}

Padded padded_layout(const Geometry& g) {
  Padded p;
  const auto& s = g.spec;
  p.ph = g.x.h + 2 * s.padding;
  p.pw = g.x.w + 2 * s.padding;
  p.len = static_cast<std::size_t>(g.y.h - 1) * p.pw + g.y.w;
  for (int ky = 0; ky < g.k; ++ky) {
    if (!tap_reaches_input(ky, g.x.h, g.y.h, s)) continue;
    for (int kx = 0; kx < g.k; ++kx) {
      if (!tap_reaches_input(kx, g.x.w, g.y.w, s)) continue;
      p.taps.push_back(ky * g.k + kx);
      p.off.push_back(static_cast<std::ptrdiff_t>(ky) * s.dilation * p.pw +
                      static_cast<std::ptrdiff_t>(kx) * s.dilation);
    }
  }
  return p;
}

// Kernel weights of the taps listed in `L`.
void gather_taps(const Padded& L, const double* wk, double* out) {
  for (std::size_t j = 0; j < L.taps.size(); ++j) out[j] = wk[L.taps[j]];
}

void forward_fast(const Geometry& g, const double* x, const double* w, double* y) {
  if (is_pointwise(g)) {
    pointwise_forward(g, x, w, y);
    return;
  }
  const auto& s = g.spec;
  const int K = g.k, KK = K * K;
  const Padded L = padded_layout(g);
  const std::size_t pplane = static_cast<std::size_t>(L.ph) * L.pw;
  const Buffer xp = pad_planes(x, g.x.n * g.x.c, g.x.h, g.x.w, s.padding,
                               s.padding, L.ph, L.pw);
  const int T = static_cast<int>(L.taps.size());
  Buffer acc(s.stride == 1 ? L.len : 0);
  std::vector<double> wf(T);
  for (int n = 0; n < g.x.n; ++n)
    for (int co = 0; co < g.y.c; ++co) {
      const int grp = co / g.cout_g;
      double* yo = y + plane_index(n, co, g.y.c) * g.y.plane();
      if (s.stride == 1) std::fill(acc.begin(), acc.end(), 0.0);
      for (int cig = 0; cig < g.cin_g; ++cig) {
        const double* xs = xp.data() + plane_index(n, grp * g.cin_g + cig, g.x.c) * pplane;
        gather_taps(L, w + (static_cast<std::size_t>(co) * g.cin_g + cig) * KK, wf.data());
        if (s.stride == 1) {
          correlate(xs, L.off.data(), wf.data(), T, acc.data(), L.len);
          continue;
        }
        for (int oy = 0; oy < g.y.h; ++oy) {
          double* yr = yo + static_cast<std::size_t>(oy) * g.y.w;
          const double* xr = xs + static_cast<std::size_t>(oy) * s.stride * L.pw;
          for (int t = 0; t < T; ++t) {
            const double wv = wf[t];
            const double* xt = xr + L.off[t];
            for (int ox = 0; ox < g.y.w; ++ox) yr[ox] += wv * xt[ox * s.stride];
          }
        }
      }
      if (s.stride == 1)
        for (int oy = 0; oy < g.y.h; ++oy)
          std::copy_n(acc.data() + static_cast<std::size_t>(oy) * L.pw, g.y.w,
                      yo + static_cast<std::size_t>(oy) * g.y.w);
    }
}

void backward_input(const Geometry& g, const double* gy, const double* w,
                    double* gx) {
  if (is_pointwise(g)) {
    pointwise_backward_input(g, gy, w, gx);
    return;
  }
  const auto& s = g.spec;
  const int K = g.k, KK = K * K;
  const Padded L = padded_layout(g);
  const std::size_t pplane = static_cast<std::size_t>(L.ph) * L.pw;

  if (s.stride == 1) {
    // Gather form: gx[q] = Σ_t w[t] gy[q - off[t]], read from a copy of gy
    // with a margin of one kernel span on every side. Only the unpadded
    // interior of the input is produced.
    const int m = (K - 1) * s.dilation;
    const int gh = g.y.h + 2 * m, gw = g.y.w + 2 * m;
    const Buffer gp = pad_planes(gy, g.y.n * g.y.c, g.y.h, g.y.w, m, m, gh, gw);
    const int T = static_cast<int>(L.taps.size());
    const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(s.padding) * gw + s.padding;
    std::vector<std::ptrdiff_t> off(T);
    std::vector<double> wf(T);
    for (int j = 0; j < T; ++j) {
      const int ky = L.taps[j] / K, kx = L.taps[j] % K;
      off[j] = base + static_cast<std::ptrdiff_t>(m - ky * s.dilation) * gw +
               (m - kx * s.dilation);
    }
    const std::size_t len = static_cast<std::size_t>(g.x.h - 1) * gw + g.x.w;
    Buffer acc(len);
    const std::size_t gplane = static_cast<std::size_t>(gh) * gw;
    for (int n = 0; n < g.x.n; ++n)
      for (int ci = 0; ci < g.x.c; ++ci) {
        const int grp = ci / g.cin_g, cig = ci % g.cin_g;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int cog = 0; cog < g.cout_g; ++cog) {
          const int co = grp * g.cout_g + cog;
          gather_taps(L, w + (static_cast<std::size_t>(co) * g.cin_g + cig) * KK,
                      wf.data());
          correlate(gp.data() + plane_index(n, co, g.y.c) * gplane, off.data(),
                    wf.data(), T, acc.data(), len);
        }
        double* xo = gx + plane_index(n, ci, g.x.c) * g.x.plane();
        for (int iy = 0; iy < g.x.h; ++iy) {
          const double* a = acc.data() + static_cast<std::size_t>(iy) * gw;
          double* xr = xo + static_cast<std::size_t>(iy) * g.x.w;
          for (int ix = 0; ix < g.x.w; ++ix) xr[ix] += a[ix];
        }
      }
    return;
  }

  // Strided: scatter into a padded buffer, then crop.
  Buffer xp(static_cast<std::size_t>(g.x.n) * g.x.c * pplane, 0.0);
  for (int n = 0; n < g.x.n; ++n)
    for (int co = 0; co < g.y.c; ++co) {
      const int grp = co / g.cout_g;
      const double* go = gy + plane_index(n, co, g.y.c) * g.y.plane();
      for (int cig = 0; cig < g.cin_g; ++cig) {
        double* xs = xp.data() + plane_index(n, grp * g.cin_g + cig, g.x.c) * pplane;
        const double* wk = w + (static_cast<std::size_t>(co) * g.cin_g + cig) * KK;
        for (int oy = 0; oy < g.y.h; ++oy) {
          const double* gr = go + static_cast<std::size_t>(oy) * g.y.w;
          double* xr = xs + static_cast<std::size_t>(oy) * s.stride * L.pw;
          for (std::size_t t = 0; t < L.taps.size(); ++t) {
            const double wv = wk[L.taps[t]];
            double* xt = xr + L.off[t];
            for (int ox = 0; ox < g.y.w; ++ox) xt[ox * s.stride] += wv * gr[ox];
          }
        }
      }
    }
  for (int q = 0; q < g.x.n * g.x.c; ++q)
    for (int iy = 0; iy < g.x.h; ++iy) {
      const double* a = xp.data() + q * pplane +
                        static_cast<std::size_t>(iy + s.padding) * L.pw + s.padding;
      double* xr = gx + (static_cast<std::size_t>(q) * g.x.h + iy) * g.x.w;
      for (int ix = 0; ix < g.x.w; ++ix) xr[ix] += a[ix];
    }
}

void backward_weight(const Geometry& g, const double* gy, const double* x,
                     double* gw) {
  if (is_pointwise(g)) {
    pointwise_backward_weight(g, gy, x, gw);
    return;
  }
  const auto& s = g.spec;
  const int K = g.k, KK = K * K;
  const Padded L = padded_layout(g);
  const std::size_t pplane = static_cast<std::size_t>(L.ph) * L.pw;
  const Buffer xp = pad_planes(x, g.x.n * g.x.c, g.x.h, g.x.w, s.padding,
                               s.padding, L.ph, L.pw);
  // Output gradient laid out on the padded row pitch, zero in the gaps.
  Buffer gr(s.stride == 1 ? L.len : 0);
  for (int n = 0; n < g.x.n; ++n)
    for (int co = 0; co < g.y.c; ++co) {
      const int grp = co / g.cout_g;
      const double* go = gy + plane_index(n, co, g.y.c) * g.y.plane();
      if (s.stride == 1) {
        std::fill(gr.begin(), gr.end(), 0.0);
        for (int oy = 0; oy < g.y.h; ++oy)
          std::copy_n(go + static_cast<std::size_t>(oy) * g.y.w, g.y.w,
                      gr.data() + static_cast<std::size_t>(oy) * L.pw);
      }
      for (int cig = 0; cig < g.cin_g; ++cig) {
        const double* xs = xp.data() + plane_index(n, grp * g.cin_g + cig, g.x.c) * pplane;
        double* wk = gw + (static_cast<std::size_t>(co) * g.cin_g + cig) * KK;
        if (s.stride == 1) {
          for (std::size_t t = 0; t < L.taps.size(); ++t)
            wk[L.taps[t]] += dot(gr.data(), xs + L.off[t], L.len);
          continue;
        }
        for (std::size_t t = 0; t < L.taps.size(); ++t) {
          double acc = 0;
          for (int oy = 0; oy < g.y.h; ++oy) {
            const double* grow = go + static_cast<std::size_t>(oy) * g.y.w;
            const double* xt = xs + static_cast<std::size_t>(oy) * s.stride * L.pw + L.off[t];
            for (int ox = 0; ox < g.y.w; ++ox) acc += grow[ox] * xt[ox * s.stride];
          }
          wk[L.taps[t]] += acc;
        }
      }
    }
}

// Textbook convolution over an explicitly zero-padded copy of the input.
// Every tap of every output element is executed and counted.
void forward_counting(const Geometry& g, const double* x, const double* w,
                      double* y) {
  const auto& s = g.spec;
  const int ph = g.x.h + 2 * s.padding;
  const int pw = g.x.w + 2 * s.padding;
  Buffer padded(static_cast<std::size_t>(g.x.n) * g.x.c * ph * pw, 0.0);
  for (int n = 0; n < g.x.n; ++n)
    for (int c = 0; c < g.x.c; ++c)
      for (int iy = 0; iy < g.x.h; ++iy)
        for (int ix = 0; ix < g.x.w; ++ix)
          padded[((static_cast<std::size_t>(n) * g.x.c + c) * ph + iy + s.padding) * pw +
                 ix + s.padding] =
              x[((static_cast<std::size_t>(n) * g.x.c + c) * g.x.h + iy) * g.x.w + ix];
  std::uint64_t macs = 0;
  const int K = g.k;
  for (int n = 0; n < g.y.n; ++n)
    for (int co = 0; co < g.y.c; ++co) {
      const int grp = co / g.cout_g;
      for (int oy = 0; oy < g.y.h; ++oy)
        for (int ox = 0; ox < g.y.w; ++ox) {
          double acc = 0;
          for (int cig = 0; cig < g.cin_g; ++cig) {
            const int ci = grp * g.cin_g + cig;
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int iy = oy * s.stride + ky * s.dilation;
                const int ix = ox * s.stride + kx * s.dilation;
                acc += w[((static_cast<std::size_t>(co) * g.cin_g + cig) * K + ky) * K + kx] *
                       padded[((static_cast<std::size_t>(n) * g.x.c + ci) * ph + iy) * pw + ix];
                ++macs;
              }
          }
          y[((static_cast<std::size_t>(n) * g.y.c + co) * g.y.h + oy) * g.y.w + ox] = acc;
        }
    }
  count_macs(macs);
}

}  // namespace

int conv_out_extent(int in, int kernel, const ConvSpec& spec) {
  const int span = in + 2 * spec.padding - spec.dilation * (kernel - 1) - 1;
  const int out = span < 0 ? 0 : span / spec.stride + 1;
  if (out < 1)
    throw ShapeError("conv2d: input extent " + std::to_string(in) +
                     " too small for kernel " + std::to_string(kernel));
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  const Geometry g = make_geometry(x.shape(), w.shape(), spec);
  auto out = std::make_shared<Buffer>(g.y.numel(), 0.0);
  if (mac_counting_active())
    forward_counting(g, x.data().data(), w.data().data(), out->data());
  else
    forward_fast(g, x.data().data(), w.data().data(), out->data());

  std::vector<const Tensor*> ins{&x, &w};
  Tape* tape = common_tape(ins);
  if (tape == nullptr)
    return Tensor(g.y, std::shared_ptr<const Buffer>(std::move(out)));
  auto xs = x.storage();
  auto ws = w.storage();
  return tape->record(g.y, std::move(out), {x, w},
                      [g, xs, ws](std::span<const double> gy, const GradSink& in) {
                        if (in.wants(0))
                          backward_input(g, gy.data(), ws->data(), in[0].data());
                        if (in.wants(1))
                          backward_weight(g, gy.data(), xs->data(), in[1].data());
                      });
}

}  // namespace fpg
