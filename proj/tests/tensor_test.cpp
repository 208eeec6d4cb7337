#include "irformer/tensor.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "oracles.hpp"

using irformer::Shape;
using irformer::Tensor;
using irformer::TensorD;

namespace {

TensorD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                      double hi = 1.0) {
  return TensorD::random_uniform(shape, rng, lo, hi);
}

oracle::Grid4 to_grid(const TensorD& t) {
  oracle::Grid4 g = oracle::make_grid(t.dim(0), t.dim(1), t.dim(2), t.dim(3));
  auto d = t.data();
  g.v.assign(d.begin(), d.end());
  return g;
}

void expect_matches(const TensorD& t, const oracle::Grid4& ref, double tol) {
  ASSERT_EQ(t.numel(), ref.size());
  auto d = t.data();
  for (std::size_t i = 0; i < ref.size(); ++i)
    ASSERT_NEAR(d[i], ref.v[i], tol) << "at flat index " << i;
}

}  // namespace

TEST(TensorBasics, ShapeDataInvariant) {
  auto t = Tensor::zeros({2, 3, 4, 5});
  EXPECT_EQ(t.numel(), 120u);
  EXPECT_THROW(Tensor::from_data({2, 2}, {1.f, 2.f, 3.f}), irformer::ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 0, 3}), irformer::ShapeError);
}

TEST(TensorBasics, ItemRequiresScalar) {
  EXPECT_THROW(Tensor::zeros({2}).item(), irformer::ContractError);
  EXPECT_EQ(Tensor::scalar(3.5f).item(), 3.5f);
}

TEST(TensorBasics, DumpParseRoundTrip) {
  std::mt19937_64 rng(7);
  auto t = TensorD::random_uniform({2, 3, 2, 2}, rng, -2.0, 2.0);
  std::stringstream ss;
  irformer::dump_tensor(t, ss);
  auto u = irformer::parse_tensor<double>(ss);
  ASSERT_EQ(u.shape(), t.shape());
  auto a = t.data();
  auto b = u.data();
  for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

// ---- conv2d ----

TEST(Conv2d, OnesKernelSumsWindow) {
  auto in = TensorD::full({1, 1, 3, 3}, 1.0);
  auto w = TensorD::full({1, 1, 3, 3}, 1.0);
  auto out = irformer::conv2d(in, w, {}, 1, 0, 1);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(out.item(), 9.0);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(1);
  auto in = random_tensor({1, 1, 5, 7}, rng);
  auto w = TensorD::full({1, 1, 1, 1}, 1.0);
  auto out = irformer::conv2d(in, w, {}, 1, 0, 1);
  ASSERT_EQ(out.shape(), in.shape());
  auto a = in.data();
  auto b = out.data();
  for (std::size_t i = 0; i < in.numel(); ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

TEST(Conv2d, MatchesLoopOracleWithPadding) {
  std::mt19937_64 rng(2);
  auto in = random_tensor({2, 4, 8, 8}, rng);
  auto w = random_tensor({6, 4, 3, 3}, rng);
  auto b = random_tensor({6}, rng);
  auto out = irformer::conv2d(in, w, b, 1, 1, 1);
  ASSERT_EQ(out.shape(), (Shape{2, 6, 8, 8}));

  oracle::Grid4 gi = to_grid(in);
  oracle::Grid4 gw = to_grid(w);
  std::vector<double> gb(b.data().begin(), b.data().end());
  auto ref = oracle::conv2d_ref(gi, gw, gb, 1, 1, 1);
  expect_matches(out, ref, 1e-6);
}

TEST(Conv2d, StrideAndGroupsMatchOracle) {
  std::mt19937_64 rng(3);
  auto in = random_tensor({1, 6, 9, 9}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);  // groups=2: 3 in-channels per group
  auto out = irformer::conv2d(in, w, {}, 2, 1, 2);
  auto ref = oracle::conv2d_ref(to_grid(in), to_grid(w), {}, 2, 1, 2);
  ASSERT_EQ(out.dim(2), ref.h);
  ASSERT_EQ(out.dim(3), ref.w);
  expect_matches(out, ref, 1e-6);
}

TEST(Conv2d, GroupedIdentityKernelIsIdentityMap) {
  std::mt19937_64 rng(4);
  const int c = 5;
  auto in = random_tensor({1, c, 4, 6}, rng);
  auto w = TensorD::full({c, 1, 1, 1}, 1.0);
  auto out = irformer::conv2d(in, w, {}, 1, 0, c);
  auto a = in.data();
  auto b = out.data();
  for (std::size_t i = 0; i < in.numel(); ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

TEST(Conv2d, RejectsBadConfigs) {
  auto in = TensorD::zeros({1, 3, 4, 4});
  auto w = TensorD::zeros({4, 3, 3, 3});
  EXPECT_THROW(irformer::conv2d(in, w, {}, 1, 0, 2), irformer::ConfigError);
  auto w2 = TensorD::zeros({4, 2, 3, 3});
  EXPECT_THROW(irformer::conv2d(in, w2, {}, 1, 0, 1), irformer::ShapeError);
  auto wbig = TensorD::zeros({1, 3, 7, 7});
  EXPECT_THROW(irformer::conv2d(in, wbig, {}, 1, 0, 1), irformer::ShapeError);
}

// ---- channel reductions ----

TEST(ChannelOps, MaxPicksLargest) {
  auto x = TensorD::from_data({1, 3, 1, 1}, {1.0, 5.0, 3.0});
  EXPECT_DOUBLE_EQ(irformer::channel_max(x).item(), 5.0);
  EXPECT_DOUBLE_EQ(irformer::channel_mean(x).item(), 3.0);
}

TEST(ChannelOps, SingleChannelIsIdentity) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({1, 1, 3, 4}, rng);
  auto mx = irformer::channel_max(x);
  ASSERT_EQ(mx.shape(), x.shape());
  auto a = x.data();
  auto b = mx.data();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

TEST(ChannelOps, MatchLoopOracles) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({1, 8, 4, 4}, rng);
  expect_matches(irformer::channel_max(x), oracle::channel_max_ref(to_grid(x)), 0.0);
  expect_matches(irformer::channel_mean(x), oracle::channel_mean_ref(to_grid(x)), 1e-7);
}

TEST(ChannelOps, ConstantMeanIsConstant) {
  auto x = TensorD::full({2, 5, 3, 3}, 0.75);
  auto m = irformer::channel_mean(x);
  for (double v : m.data()) EXPECT_DOUBLE_EQ(v, 0.75);
}

// ---- pooling ----

TEST(Pooling, GlobalAvgBasics) {
  auto x = TensorD::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(irformer::global_avg_pool(x).item(), 2.5);
  auto y = TensorD::from_data({1, 2, 1, 1}, {3.0, 4.0});
  auto gp = irformer::global_avg_pool(y);
  EXPECT_EQ(gp.shape(), (Shape{1, 2, 1, 1}));
  EXPECT_DOUBLE_EQ(gp.data()[0], 3.0);
  EXPECT_DOUBLE_EQ(gp.data()[1], 4.0);
}

TEST(Pooling, GlobalAvgMatchesOracle) {
  std::mt19937_64 rng(7);
  auto x = random_tensor({2, 3, 5, 6}, rng);
  expect_matches(irformer::global_avg_pool(x),
                 oracle::global_avg_pool_ref(to_grid(x)), 1e-7);
}

TEST(Pooling, AvgPoolWindow) {
  auto x = TensorD::from_data({1, 1, 2, 2}, {0.0, 2.0, 4.0, 6.0});
  EXPECT_DOUBLE_EQ(irformer::avg_pool2d(x, 2).item(), 3.0);
}

TEST(Pooling, AvgPoolK1IsIdentity) {
  std::mt19937_64 rng(8);
  auto x = random_tensor({1, 2, 3, 3}, rng);
  auto y = irformer::avg_pool2d(x, 1);
  auto a = x.data();
  auto b = y.data();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

TEST(Pooling, AvgPoolMatchesOracleAndRejectsNonDivisible) {
  std::mt19937_64 rng(9);
  auto x = random_tensor({1, 3, 8, 8}, rng);
  expect_matches(irformer::avg_pool2d(x, 2), oracle::avg_pool2d_ref(to_grid(x), 2), 1e-7);
  expect_matches(irformer::avg_pool2d(x, 4), oracle::avg_pool2d_ref(to_grid(x), 4), 1e-7);
  auto odd = TensorD::zeros({1, 1, 6, 6});
  EXPECT_THROW(irformer::avg_pool2d(odd, 4), irformer::ShapeError);
}

// ---- resize ----

TEST(Resize, ConstantStaysConstant) {
  auto x = TensorD::full({1, 2, 4, 4}, 0.3);
  auto y = irformer::resize_bilinear(x, 11, 7);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 11, 7}));
  for (double v : y.data()) EXPECT_NEAR(v, 0.3, 1e-12);
}

TEST(Resize, UpThenAveragedDownRecoversConstant) {
  auto x = TensorD::full({1, 1, 4, 4}, 0.625);
  auto up = irformer::resize_bilinear(x, 8, 8);
  auto down = irformer::avg_pool2d(up, 2);
  for (double v : down.data()) EXPECT_NEAR(v, 0.625, 1e-12);
}

TEST(Resize, SameSizeIsIdentity) {
  std::mt19937_64 rng(10);
  auto x = random_tensor({1, 3, 5, 5}, rng);
  auto y = irformer::resize_bilinear(x, 5, 5);
  auto a = x.data();
  auto b = y.data();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

TEST(Resize, MatchesHalfPixelOracle) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({1, 1, 4, 4}, rng);
  expect_matches(irformer::resize_bilinear(x, 8, 8),
                 oracle::resize_bilinear_ref(to_grid(x), 8, 8), 1e-6);
  auto x2 = random_tensor({1, 2, 6, 4}, rng);
  expect_matches(irformer::resize_bilinear(x2, 3, 9),
                 oracle::resize_bilinear_ref(to_grid(x2), 3, 9), 1e-6);
}

// ---- elementwise and broadcast ----

TEST(Elementwise, SigmoidReluBasics) {
  auto x = TensorD::from_data({3}, {0.0, -3.0, 2.0});
  auto s = irformer::sigmoid(x);
  EXPECT_DOUBLE_EQ(s.data()[0], 0.5);
  for (double v : s.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  auto r = irformer::relu(x);
  EXPECT_DOUBLE_EQ(r.data()[1], 0.0);
  EXPECT_DOUBLE_EQ(r.data()[2], 2.0);
  // extreme inputs stay finite and inside (0,1)
  auto e = irformer::sigmoid(TensorD::from_data({2}, {200.0, -200.0}));
  EXPECT_TRUE(std::isfinite(e.data()[0]));
  EXPECT_TRUE(std::isfinite(e.data()[1]));
  EXPECT_GT(e.data()[1], 0.0);
  EXPECT_LE(e.data()[0], 1.0);
}

TEST(Elementwise, MulByOnesIsIdentity) {
  std::mt19937_64 rng(12);
  auto x = random_tensor({1, 3, 4, 4}, rng);
  auto ones = TensorD::full({1, 3, 4, 4}, 1.0);
  auto y = irformer::mul(x, ones);
  auto a = x.data();
  auto b = y.data();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

TEST(Elementwise, PerChannelBroadcast) {
  auto x = TensorD::from_data({1, 2, 1, 2}, {1.0, 2.0, 3.0, 4.0});
  auto s = TensorD::from_data({1, 2, 1, 1}, {10.0, 100.0});
  auto y = irformer::mul(x, s);
  auto v = y.data();
  EXPECT_DOUBLE_EQ(v[0], 10.0);
  EXPECT_DOUBLE_EQ(v[1], 20.0);
  EXPECT_DOUBLE_EQ(v[2], 300.0);
  EXPECT_DOUBLE_EQ(v[3], 400.0);
}

TEST(Elementwise, PerPixelBroadcast) {
  auto x = TensorD::from_data({1, 2, 1, 2}, {1.0, 2.0, 3.0, 4.0});
  auto m = TensorD::from_data({1, 1, 1, 2}, {2.0, 0.5});
  auto y = irformer::mul(x, m);
  auto v = y.data();
  EXPECT_DOUBLE_EQ(v[0], 2.0);
  EXPECT_DOUBLE_EQ(v[1], 1.0);
  EXPECT_DOUBLE_EQ(v[2], 6.0);
  EXPECT_DOUBLE_EQ(v[3], 2.0);
}

TEST(Elementwise, RejectsUnsupportedBroadcast) {
  auto a = TensorD::zeros({1, 2, 3, 3});
  auto b = TensorD::zeros({1, 2, 3, 1});
  EXPECT_THROW(irformer::mul(a, b), irformer::ShapeError);
  EXPECT_THROW(irformer::add(a, TensorD::zeros({1, 3, 3, 3})), irformer::ShapeError);
  EXPECT_THROW(irformer::sub(a, b), irformer::ShapeError);
}

// ---- split / concat ----

TEST(SplitConcat, RoundTripIsBitwise) {
  std::mt19937_64 rng(13);
  auto x = random_tensor({2, 7, 3, 2}, rng);
  for (const auto& sizes :
       {std::vector<int>{7}, {3, 4}, {1, 2, 4}, {2, 2, 2, 1}}) {
    auto parts = irformer::channel_split(x, sizes);
    auto back = irformer::channel_concat(parts);
    ASSERT_EQ(back.shape(), x.shape());
    auto a = x.data();
    auto b = back.data();
    for (std::size_t i = 0; i < x.numel(); ++i)
      ASSERT_EQ(a[i], b[i]) << "sizes case, flat " << i;
  }
}

TEST(SplitConcat, RejectsBadSizes) {
  auto x = TensorD::zeros({1, 4, 2, 2});
  EXPECT_THROW(irformer::channel_split(x, {1, 2}), irformer::ShapeError);
  EXPECT_THROW(irformer::channel_split(x, {5}), irformer::ShapeError);
  auto y = TensorD::zeros({1, 2, 3, 2});
  EXPECT_THROW(irformer::channel_concat({x, y}), irformer::ShapeError);
}

// ---- matmul / softmax / layer norm ----

TEST(MatMul, MatchesTripleLoop) {
  std::mt19937_64 rng(14);
  auto a = random_tensor({5, 3}, rng);
  auto b = random_tensor({3, 4}, rng);
  auto c = irformer::matmul(a, b);
  auto ref = oracle::matmul_ref({a.data().begin(), a.data().end()},
                                {b.data().begin(), b.data().end()}, 5, 3, 4);
  auto cv = c.data();
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(cv[i], ref[i], 1e-6);
}

TEST(MatMul, BatchedMatchesPerSlice) {
  std::mt19937_64 rng(15);
  auto a = random_tensor({3, 2, 4}, rng);
  auto b = random_tensor({3, 4, 5}, rng);
  auto c = irformer::matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (int s = 0; s < 3; ++s) {
    std::vector<double> as(a.data().begin() + s * 8, a.data().begin() + (s + 1) * 8);
    std::vector<double> bs(b.data().begin() + s * 20, b.data().begin() + (s + 1) * 20);
    auto ref = oracle::matmul_ref(as, bs, 2, 4, 5);
    for (int i = 0; i < 10; ++i)
      EXPECT_NEAR(c.data()[s * 10 + i], ref[i], 1e-6);
  }
  EXPECT_THROW(irformer::matmul(a, TensorD::zeros({3, 3, 5})), irformer::ShapeError);
}

TEST(Softmax, UniformRowAndRowSums) {
  auto x = TensorD::zeros({1, 4});
  auto s = irformer::softmax_lastdim(x);
  for (double v : s.data()) EXPECT_NEAR(v, 0.25, 1e-12);

  std::mt19937_64 rng(16);
  auto y = random_tensor({6, 9}, rng, -4.0, 4.0);
  auto sy = irformer::softmax_lastdim(y);
  for (int r = 0; r < 6; ++r) {
    double sum = 0;
    for (int i = 0; i < 9; ++i) sum += sy.data()[r * 9 + i];
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(LayerNorm, ConstantChannelGivesZeros) {
  auto x = TensorD::full({1, 6, 2, 2}, 3.7);
  auto gamma = TensorD::full({1, 6, 1, 1}, 1.0);
  auto beta = TensorD::zeros({1, 6, 1, 1});
  auto y = irformer::layer_norm_channels(x, gamma, beta, 1e-6);
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(LayerNorm, NormalizedStatsBeforeAffine) {
  std::mt19937_64 rng(17);
  auto x = random_tensor({2, 8, 3, 3}, rng);
  auto gamma = TensorD::full({1, 8, 1, 1}, 1.0);
  auto beta = TensorD::zeros({1, 8, 1, 1});
  auto y = irformer::layer_norm_channels(x, gamma, beta, 1e-10);
  const int c = 8, hw = 9;
  auto v = y.data();
  for (int n = 0; n < 2; ++n)
    for (int p = 0; p < hw; ++p) {
      double mean = 0, var = 0;
      for (int ic = 0; ic < c; ++ic) mean += v[(n * c + ic) * hw + p];
      mean /= c;
      for (int ic = 0; ic < c; ++ic) {
        const double d = v[(n * c + ic) * hw + p] - mean;
        var += d * d;
      }
      var /= c;
      EXPECT_NEAR(mean, 0.0, 1e-7);
      EXPECT_NEAR(var, 1.0, 1e-5);
    }
}

TEST(L2Normalize, RowsHaveUnitNorm) {
  std::mt19937_64 rng(18);
  auto x = random_tensor({4, 12}, rng);
  auto y = irformer::l2_normalize_lastdim(x, 1e-12);
  for (int r = 0; r < 4; ++r) {
    double ss = 0;
    for (int i = 0; i < 12; ++i) ss += y.data()[r * 12 + i] * y.data()[r * 12 + i];
    EXPECT_NEAR(ss, 1.0, 1e-9);
  }
}

TEST(Purity, RepeatedForwardIsBitwiseIdentical) {
  std::mt19937_64 rng(19);
  auto x = random_tensor({1, 4, 6, 6}, rng);
  auto w = random_tensor({4, 4, 3, 3}, rng);
  auto r1 = irformer::conv2d(irformer::sigmoid(x), w, {}, 1, 1, 1);
  auto r2 = irformer::conv2d(irformer::sigmoid(x), w, {}, 1, 1, 1);
  auto a = r1.data();
  auto b = r2.data();
  for (std::size_t i = 0; i < r1.numel(); ++i) ASSERT_EQ(a[i], b[i]);
}
