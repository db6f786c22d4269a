#include <gtest/gtest.h>

#include <cmath>

#include "fpg/rng.hpp"
#include "fpg/tensor.hpp"

namespace fpg {
namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = -1, double hi = 1) {
  std::vector<double> v(s.numel());
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(s, v);
}

// Direct nested-loop convolution used as an independent reference.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const ConvSpec& s) {
  const Shape xs = x.shape(), ws = w.shape();
  const int ho = (xs.h + 2 * s.padding - s.dilation * (ws.h - 1) - 1) / s.stride + 1;
  const int wo = (xs.w + 2 * s.padding - s.dilation * (ws.w - 1) - 1) / s.stride + 1;
  const int cpg = xs.c / s.groups, opg = ws.n / s.groups;
  std::vector<double> out(static_cast<std::size_t>(xs.n) * ws.n * ho * wo, 0.0);
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx) {
          double acc = 0;
          const int g = o / opg;
          for (int ci = 0; ci < cpg; ++ci)
            for (int ky = 0; ky < ws.h; ++ky)
              for (int kx = 0; kx < ws.w; ++kx) {
                const int iy = y * s.stride - s.padding + ky * s.dilation;
                const int ix = xx * s.stride - s.padding + kx * s.dilation;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += w.at(o, ci, ky, kx) * x.at(n, g * cpg + ci, iy, ix);
              }
          out[((static_cast<std::size_t>(n) * ws.n + o) * ho + y) * wo + xx] = acc;
        }
  return out;
}

TEST(Tensor, RejectsMismatchedLength) {
  EXPECT_THROW(Tensor(Shape{1, 2, 2, 2}, std::vector<double>(7)), ShapeError);
}

TEST(Tensor, UnaryValues) {
  const Tensor x(Shape{1, 1, 1, 3}, {0.0, -3.0, 2.5});
  EXPECT_EQ(silu(x)[0], 0.0);
  EXPECT_EQ(relu(x)[1], 0.0);
  EXPECT_EQ(relu(x)[2], 2.5);
  EXPECT_EQ(sigmoid(x)[0], 0.5);
}

TEST(Tensor, LogRejectsNonPositive) {
  const Tensor x(Shape{1, 1, 1, 2}, {1.0, 0.0});
  EXPECT_THROW(log(x), DomainError);
}

TEST(Tensor, BinaryAndBroadcast) {
  const Tensor a(Shape{1, 1, 1, 2}, {1, 2}), b(Shape{1, 1, 1, 2}, {3, 4});
  const Tensor s = add(a, b);
  EXPECT_EQ(s[0], 4);
  EXPECT_EQ(s[1], 6);
  const Tensor x = Tensor::full({2, 3, 2, 2}, 1.0);
  const Tensor bias(Shape{1, 3, 1, 1}, {10, 20, 30});
  const Tensor y = add(x, bias);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(y.at(n, c, 1, 1), 1 + 10 * (c + 1));
  EXPECT_THROW(add(x, Tensor::zeros({1, 2, 1, 1})), ShapeError);
}

TEST(Tensor, MulByZerosHasZeroGradient) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor(Shape{1, 1, 2, 2}, {1, -2, 3, 4}));
  const Tensor y = sum_all(mul(x, Tensor::zeros({1, 1, 2, 2})));
  EXPECT_EQ(y.item(), 0.0);
  const Tensor g = tape.backward(y).of(x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(g[i], 0.0);
}

TEST(Tensor, ConvHandExamples) {
  const Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
  EXPECT_EQ(conv2d(ones, ones, {}).item(), 9.0);

  const Tensor x = Tensor::full({1, 2, 3, 3}, 1.0);
  const Tensor w = Tensor::full({2, 1, 3, 3}, 1.0);
  const Tensor y = conv2d(x, w, {1, 1, 1, 2});
  for (int c = 0; c < 2; ++c) {
    EXPECT_EQ(y.at(0, c, 1, 1), 9.0);
    EXPECT_EQ(y.at(0, c, 0, 1), 6.0);
    EXPECT_EQ(y.at(0, c, 0, 0), 4.0);
  }
}

TEST(Tensor, ConvIdentityKernel) {
  Rng rng(3);
  const Tensor x = random_tensor(rng, {2, 1, 5, 4});
  const Tensor y = conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0), {});
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Tensor, ConvMatchesNaiveReference) {
  Rng rng(7);
  const struct {
    int cin, cout, k, h, w;
    ConvSpec s;
  } cases[] = {{3, 4, 3, 7, 6, {1, 1, 1, 1}},  {3, 4, 3, 7, 6, {2, 1, 1, 1}},
               {4, 4, 5, 9, 9, {1, 4, 2, 4}},  {6, 6, 7, 3, 3, {1, 3, 1, 6}},
               {8, 4, 1, 5, 5, {2, 0, 1, 1}},  {8, 16, 1, 4, 4, {1, 0, 1, 1}},
               {6, 6, 5, 2, 2, {1, 2, 1, 6}},  {4, 8, 3, 8, 8, {2, 1, 1, 2}},
               {2, 1, 7, 16, 16, {1, 3, 1, 1}}};
  for (const auto& c : cases) {
    const Tensor x = random_tensor(rng, {2, c.cin, c.h, c.w});
    const Tensor w = random_tensor(rng, {c.cout, c.cin / c.s.groups, c.k, c.k});
    const Tensor y = conv2d(x, w, c.s);
    const auto ref = naive_conv(x, w, c.s);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Tensor, ConvIsBilinear) {
  Rng rng(11);
  const Tensor x = random_tensor(rng, {1, 4, 6, 6}), z = random_tensor(rng, {1, 4, 6, 6});
  const Tensor w = random_tensor(rng, {4, 1, 3, 3});
  const ConvSpec s{1, 1, 1, 4};
  const Tensor lhs = conv2d(add(affine(x, 2.0, 0), affine(z, -0.5, 0)), w, s);
  const Tensor rhs = add(affine(conv2d(x, w, s), 2.0, 0), affine(conv2d(z, w, s), -0.5, 0));
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-12);
}

TEST(Tensor, ConvShapeErrors) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({4, 1, 3, 3}), {1, 1, 1, 2}),
               ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), {}),
               ShapeError);
}

TEST(Tensor, BatchNormExamples) {
  const Tensor g = Tensor::full({1, 1, 1, 1}, 1.0), b = Tensor::full({1, 1, 1, 1}, 0.25);
  const Tensor constant = Tensor::full({2, 1, 2, 2}, 3.0);
  const Tensor y = batchnorm2d(constant, g, b, BnMode::train, nullptr, nullptr);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], 0.25, 1e-12);

  const Tensor two(Shape{1, 1, 1, 2}, {0.0, 2.0});
  const Tensor z = batchnorm2d(two, g, Tensor::zeros({1, 1, 1, 1}), BnMode::train, nullptr,
                               nullptr);
  const double scale = 1.0 / std::sqrt(1.0 + kBnEps);
  EXPECT_NEAR(z[0], -scale, 1e-15);
  EXPECT_NEAR(z[1], scale, 1e-15);
}

TEST(Tensor, BatchNormNormalizesAndUpdatesStats) {
  Rng rng(5);
  const Tensor x = random_tensor(rng, {4, 3, 5, 5}, -2, 5);
  const Tensor g = Tensor::full({1, 3, 1, 1}, 1.0), b = Tensor::zeros({1, 3, 1, 1});
  BatchNormStats run{{0, 0, 0}, {1, 1, 1}}, upd;
  const Tensor y = batchnorm2d(x, g, b, BnMode::train, &run, &upd);
  for (int c = 0; c < 3; ++c) {
    double m = 0, v = 0, bm = 0, bv = 0;
    const int cnt = 4 * 25;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        m += y.at(n, c, i / 5, i % 5);
        bm += x.at(n, c, i / 5, i % 5);
      }
    m /= cnt;
    bm /= cnt;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) {
        v += std::pow(y.at(n, c, i / 5, i % 5) - m, 2);
        bv += std::pow(x.at(n, c, i / 5, i % 5) - bm, 2);
      }
    v /= cnt;
    bv /= cnt;
    EXPECT_LE(std::abs(m), 1e-9);
    EXPECT_NEAR(v, bv / (bv + kBnEps), 1e-6);
    EXPECT_NEAR(upd.mean[c], 0.1 * bm, 1e-12);
    // Running variance uses the unbiased estimate or the biased one; accept
    // either, the update rule is the momentum blend.
    const double biased = 0.9 + 0.1 * bv, unbiased = 0.9 + 0.1 * bv * cnt / (cnt - 1);
    EXPECT_TRUE(std::abs(upd.var[c] - biased) < 1e-12 || std::abs(upd.var[c] - unbiased) < 1e-12);
  }
  EXPECT_THROW(batchnorm2d(x, Tensor::full({1, 2, 1, 1}, 1.0), b, BnMode::train, nullptr,
                           nullptr),
               ShapeError);
}

TEST(Tensor, PoolResizeConcatReduce) {
  const Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(global_avg_pool(x).item(), 2.5);

  Rng rng(2);
  const Tensor r = random_tensor(rng, {1, 2, 3, 5});
  const Tensor same = resize_bilinear(r, 3, 5);
  for (std::size_t i = 0; i < r.numel(); ++i) EXPECT_EQ(same[i], r[i]);
  const Tensor fill = resize_bilinear(Tensor::full({1, 1, 1, 1}, 4.0), 3, 3);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(fill[i], 4.0);
  const Tensor up = resize_bilinear(Tensor(Shape{1, 1, 2, 2}, {0, 2, 0, 2}), 4, 4);
  EXPECT_DOUBLE_EQ(up.at(0, 0, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(up.at(0, 0, 0, 1), 0.5);
  EXPECT_DOUBLE_EQ(up.at(0, 0, 0, 2), 1.5);
  EXPECT_DOUBLE_EQ(up.at(0, 0, 0, 3), 2.0);

  const Tensor a = Tensor::full({1, 2, 2, 2}, 1.0), b = Tensor::full({1, 3, 2, 2}, 2.0);
  const Tensor parts[] = {a, b};
  const Tensor cat = concat_channels(parts);
  EXPECT_EQ(cat.shape().c, 5);
  EXPECT_EQ(cat.at(0, 1, 1, 1), 1.0);
  EXPECT_EQ(cat.at(0, 2, 0, 0), 2.0);
  const Tensor bad[] = {a, Tensor::zeros({1, 1, 3, 2})};
  EXPECT_THROW(concat_channels(bad), ShapeError);

  const Tensor ones = Tensor::full({2, 3, 4, 4}, 1.0);
  EXPECT_EQ(sum_all(ones).item(), 96.0);
  EXPECT_EQ(mean_all(ones).item(), 1.0);
  const Tensor two(Shape{1, 2, 1, 2}, {1, 3, 5, 7});
  const Tensor cm = reduce(two, ReduceKind::mean, ReduceAxes::channel);
  EXPECT_EQ(cm[0], 3.0);
  EXPECT_EQ(cm[1], 5.0);
}

TEST(Tensor, SoftmaxProperties) {
  const Tensor x(Shape{1, 2, 1, 1}, {0.0, std::log(3.0)});
  const Tensor p = softmax(x, SoftmaxAxis::channel);
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
  Rng rng(9);
  const Tensor z = random_tensor(rng, {2, 3, 4, 5}, -20, 20);
  for (SoftmaxAxis ax : {SoftmaxAxis::channel, SoftmaxAxis::spatial}) {
    const Tensor a = softmax(z, ax), b = softmax(affine(z, 1.0, 123.0), ax);
    const Tensor s = reduce(a, ReduceKind::sum,
                            ax == SoftmaxAxis::channel ? ReduceAxes::channel : ReduceAxes::spatial);
    for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(s[i], 1.0, 1e-12);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
  }
}

TEST(Tensor, BackwardBasics) {
  Rng rng(4);
  Tape tape;
  const Tensor x = tape.leaf(random_tensor(rng, {1, 2, 3, 3}));
  const Gradients g1 = tape.backward(sum_all(x));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(g1.of(x)[i], 1.0);
  const Gradients g2 = tape.backward(sum_all(mul(x, x)));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(g2.of(x)[i], 2 * x[i]);
  EXPECT_THROW(tape.backward(x), UsageError);

  Tape t2;
  const Tensor gap_in = t2.leaf(Tensor::full({1, 1, 4, 2}, 3.0));
  const Tensor gg = t2.backward(sum_all(global_avg_pool(gap_in))).of(gap_in);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(gg[i], 1.0 / 8);
}

TEST(Tensor, ConcatBackwardIsOnes) {
  Tape tape;
  const Tensor a = tape.leaf(Tensor::full({1, 2, 2, 2}, 1.0));
  const Tensor b = tape.leaf(Tensor::full({1, 3, 2, 2}, 2.0));
  const Tensor parts[] = {a, b};
  const Gradients g = tape.backward(sum_all(concat_channels(parts)));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(g.of(a)[i], 1.0);
  for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_EQ(g.of(b)[i], 1.0);
}

TEST(Tensor, GradCheckExamples) {
  Rng rng(12);
  const Tensor x = random_tensor(rng, {1, 2, 3, 3});
  EXPECT_LE(grad_check([](const Tensor& t) { return sum_all(t); }, x), 1e-10);
  EXPECT_LE(grad_check([](const Tensor& t) { return sum_all(silu(t)); }, x), 1e-6);
}

TEST(Tensor, ForwardBackwardBitReproducible) {
  Rng rng(21);
  const Tensor x0 = random_tensor(rng, {2, 4, 6, 6});
  const Tensor w = random_tensor(rng, {4, 1, 3, 3});
  auto run = [&] {
    Tape tape;
    const Tensor x = tape.leaf(x0);
    const Tensor y = sum_all(square(silu(conv2d(x, w, {1, 1, 1, 4}))));
    const Tensor g = tape.backward(y).of(x);
    std::vector<double> out(g.data().begin(), g.data().end());
    out.push_back(y.item());
    return out;
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace fpg
