#include <gtest/gtest.h>

#include "ddanet/errors.hpp"
#include "grad_cases.hpp"
#include "support.hpp"

using namespace ddanet;
using namespace ddanet::test;

namespace {

double inner(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

Var<double> undefined() { return Var<double>(); }

}  // namespace

TEST(Conv2d, OneByOneScales) {
  const Tensor<double> x(Shape{1, 1, 2, 2}, {1, 2, 3, 4}), w(Shape{1, 1, 1, 1}, {2}), b(Shape{1}, {0});
  const auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(b), 1, 0).value();
  EXPECT_EQ(y, (Tensor<double>(Shape{1, 1, 2, 2}, {2, 4, 6, 8})));
}

TEST(Conv2d, CentreOneHotKernelIsIdentity) {
  Rng rng(1);
  const auto x = random_tensor<double>({1, 1, 5, 5}, rng);
  Tensor<double> w(Shape{1, 1, 3, 3});
  w[4] = 1;
  EXPECT_TRUE(bitwise_equal(conv2d(Var<double>(x), Var<double>(w), undefined(), 1, 1).value(), x));
}

TEST(Conv2d, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const auto x = random_tensor<double>({1, 2, 7, 7}, rng);
    const auto w = random_tensor<double>({3, 2, 3, 3}, rng);
    const auto b = random_tensor<double>({3}, rng);
    for (auto [s, p] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 0}, {2, 1}, {1, 0}}) {
      const auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(b), s, p).value();
      const auto ref = conv2d_oracle(x, w, &b, s, p);
      ASSERT_EQ(y.shape(), ref.shape());
      for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
    }
  }
}

TEST(Conv2d, RejectsBadInputs) {
  Tensor<double> x(Shape{1, 2, 4, 4}), w(Shape{3, 3, 3, 3});
  EXPECT_THROW(conv2d(Var<double>(x), Var<double>(w), undefined(), 1, 1), InvalidArgument);
  Tensor<double> w2(Shape{3, 2, 5, 5});
  EXPECT_THROW(conv2d(Var<double>(x), Var<double>(w2), undefined(), 1, 0), InvalidArgument);
  Tensor<double> w3(Shape{3, 2, 2, 2});
  EXPECT_THROW(conv2d(Var<double>(Tensor<double>(Shape{1, 2, 5, 5})), Var<double>(w3), undefined(), 2, 0),
               InvalidArgument);
}

TEST(ConvTranspose2d, DoublesSpatialSize) {
  Rng rng(2);
  const auto x = random_tensor<double>({1, 3, 8, 8}, rng);
  const auto w = random_tensor<double>({3, 5, 4, 4}, rng);
  const auto y = conv_transpose2d(Var<double>(x), Var<double>(w), undefined(), 2, 1).value();
  EXPECT_EQ(y.shape(), (Shape{1, 5, 16, 16}));
  EXPECT_EQ(conv_transpose2d_output_shape(Shape{1, 3, 8, 8}, 5, 4, 2, 1), (Shape{1, 5, 16, 16}));
}

TEST(ConvTranspose2d, MatchesScatterOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const auto x = random_tensor<double>({2, 3, 4, 4}, rng);
    const auto w = random_tensor<double>({3, 2, 4, 4}, rng);
    const auto b = random_tensor<double>({2}, rng);
    const auto y = conv_transpose2d(Var<double>(x), Var<double>(w), Var<double>(b), 2, 1).value();
    const auto ref = conv_transpose2d_oracle(x, w, &b, 2, 1);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(ConvTranspose2d, AdjointIdentity) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto x = random_tensor<double>({2, 3, 8, 8}, rng);
    const auto w = random_tensor<double>({4, 3, 4, 4}, rng);
    const auto cx = conv2d(Var<double>(x), Var<double>(w), undefined(), 2, 1).value();
    const auto y = random_tensor(cx.shape(), rng);
    const auto ty = conv_transpose2d(Var<double>(y), Var<double>(w), undefined(), 2, 1).value();
    EXPECT_NEAR(inner(cx, y), inner(x, ty), 1e-10);
  }
}

TEST(ConvTranspose2d, ZeroInputGivesBias) {
  const Tensor<double> x(Shape{1, 2, 3, 3});
  Rng rng(5);
  const auto w = random_tensor<double>({2, 3, 4, 4}, rng);
  const Tensor<double> b(Shape{3}, {0.5, -1, 2});
  const auto y = conv_transpose2d(Var<double>(x), Var<double>(w), Var<double>(b), 2, 1).value();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(y.at(0, c, i, j), b[c]);
}

TEST(BatchNorm, ConstantInputGivesBeta) {
  auto st = BatchNormState<double>::create(2);
  st.beta = Tensor<double>(Shape{2}, {0.3, -0.7});
  Tensor<double> x(Shape{2, 2, 3, 3});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      x[(n * 2 + 0) * 9 + i] = 4.0;
      x[(n * 2 + 1) * 9 + i] = -2.0;
    }
  const auto y = batchnorm2d(Var<double>(x), Var<double>::view(st.gamma), Var<double>::view(st.beta), st, Mode::train)
                     .value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(y[(n * 2 + c) * 9 + i], st.beta[c], 1e-5);
}

TEST(BatchNorm, TrainOutputIsStandardised) {
  Rng rng(7);
  auto st = BatchNormState<double>::create(3);
  const auto x = random_tensor<double>({2, 3, 5, 5}, rng, -3, 5);
  const auto y = batchnorm2d(Var<double>(x), Var<double>::view(st.gamma), Var<double>::view(st.beta), st, Mode::train)
                     .value();
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 25; ++i) s += y[(n * 3 + c) * 25 + i];
    const double mean = s / 50;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 25; ++i) s2 += (y[(n * 3 + c) * 25 + i] - mean) * (y[(n * 3 + c) * 25 + i] - mean);
    EXPECT_LE(std::abs(mean), 1e-5);
    EXPECT_NEAR(s2 / 50, 1.0, 1e-4);
  }
}

TEST(BatchNorm, RunningStatisticsFollowMomentum) {
  Rng rng(8);
  auto st = BatchNormState<double>::create(2);
  const auto x = random_tensor<double>({2, 2, 3, 3}, rng);
  batchnorm2d(Var<double>(x), Var<double>::view(st.gamma), Var<double>::view(st.beta), st, Mode::train);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, s2 = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 9; ++i) s += x[(n * 2 + c) * 9 + i];
    const double mean = s / 18;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 9; ++i) s2 += std::pow(x[(n * 2 + c) * 9 + i] - mean, 2);
    EXPECT_NEAR(st.running_mean[c], 0.1 * mean, 1e-12);
    EXPECT_NEAR(st.running_var[c], 0.9 + 0.1 * s2 / 18, 1e-12);
  }
}

TEST(BatchNorm, EvalIsPureAndIdentityAtDefaults) {
  Rng rng(9);
  auto st = BatchNormState<double>::create(3);
  const auto x = random_tensor<double>({1, 3, 4, 4}, rng);
  const auto before = st.running_mean;
  const auto y1 = batchnorm2d(Var<double>(x), Var<double>::view(st.gamma), Var<double>::view(st.beta), st, Mode::eval)
                      .value();
  const auto y2 = batchnorm2d(Var<double>(x), Var<double>::view(st.gamma), Var<double>::view(st.beta), st, Mode::eval)
                      .value();
  EXPECT_TRUE(bitwise_equal(y1, y2));
  EXPECT_TRUE(bitwise_equal(before, st.running_mean));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y1[i], x[i], 1e-5);
}

TEST(BatchNorm, RejectsDegenerateTrainBatch) {
  auto st = BatchNormState<double>::create(2);
  Tensor<double> x(Shape{1, 2, 1, 1});
  EXPECT_THROW(
      batchnorm2d(Var<double>(x), Var<double>::view(st.gamma), Var<double>::view(st.beta), st, Mode::train),
      InvalidArgument);
}

TEST(MaxPool, ValuesTiesAndOracle) {
  EXPECT_EQ(maxpool2d(Var<double>(Tensor<double>(Shape{1, 1, 2, 2}, {1, 2, 3, 4}))).value().item(), 4.0);

  Graph<double> g;
  auto x = g.leaf(Tensor<double>(Shape{1, 1, 4, 4}, 3.0));
  const auto y = maxpool2d(x);
  for (double v : y.value().data()) EXPECT_EQ(v, 3.0);
  const auto gx = g.backward(reduce(y, ReduceKind::sum)).of(x);
  // First element of every window, in scan order.
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(gx.at(0, 0, i, j), (i % 2 == 0 && j % 2 == 0) ? 1.0 : 0.0);

  Rng rng(4);
  const auto xr = random_tensor<double>({1, 3, 8, 8}, rng);
  EXPECT_TRUE(bitwise_equal(maxpool2d(Var<double>(xr)).value(), maxpool_oracle(xr)));
  EXPECT_THROW(maxpool2d(Var<double>(Tensor<double>(Shape{1, 1, 3, 4}))), InvalidArgument);
}

TEST(SEBlock, ZeroWeightsHalveInput) {
  Rng rng(1);
  auto p = SEParams<double>::create(8, 4, nullptr);
  const auto x = random_tensor<double>({2, 8, 3, 3}, rng);
  const auto y = se_block(ForwardContext<double>{}, Var<double>(x), p).value();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], 0.5 * x[i]);
}

TEST(SEBlock, MatchesCompositionOracleAndShrinks) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    auto p = SEParams<double>::create(8, 4, &rng);
    p.fc1_bias = random_tensor<double>({2}, rng);
    p.fc2_bias = random_tensor<double>({8}, rng);
    const auto x = random_tensor<double>({2, 8, 3, 3}, rng);
    const auto y = se_block(ForwardContext<double>{}, Var<double>(x), p).value();
    for (std::size_t n = 0; n < 2; ++n) {
      double gap[8], hid[2], s[8];
      for (std::size_t c = 0; c < 8; ++c) {
        gap[c] = 0;
        for (std::size_t i = 0; i < 9; ++i) gap[c] += x[(n * 8 + c) * 9 + i];
        gap[c] /= 9;
      }
      for (std::size_t k = 0; k < 2; ++k) {
        hid[k] = p.fc1_bias[k];
        for (std::size_t c = 0; c < 8; ++c) hid[k] += p.fc1_weight[k * 8 + c] * gap[c];
        hid[k] = std::max(hid[k], 0.0);
      }
      for (std::size_t c = 0; c < 8; ++c) {
        double z = p.fc2_bias[c];
        for (std::size_t k = 0; k < 2; ++k) z += p.fc2_weight[c * 2 + k] * hid[k];
        s[c] = sigmoid_scalar(z);
        ASSERT_GT(s[c], 0.0);
        ASSERT_LT(s[c], 1.0);
      }
      for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t i = 0; i < 9; ++i) {
          const std::size_t k = (n * 8 + c) * 9 + i;
          EXPECT_NEAR(y[k], s[c] * x[k], 1e-12);
          EXPECT_LE(std::abs(y[k]), std::abs(x[k]));
        }
    }
  }
}

TEST(SEBlock, ConstantChannelGapIsExact) {
  Tensor<double> x(Shape{1, 2, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) {
    x[i] = 0.3;
    x[16 + i] = -1.25;
  }
  const auto gap = reduce(Var<double>(x), ReduceKind::mean, {2, 3}).value();
  EXPECT_EQ(gap[0], 0.3);
  EXPECT_EQ(gap[1], -1.25);
}

TEST(ResidualBlock, ZeroResidualIsRelu) {
  Rng rng(3);
  auto p = ResidualBlockParams<double>::create(4, 4, nullptr);
  ASSERT_FALSE(p.shortcut.has_value());
  const auto x = random_tensor<double>({2, 4, 5, 5}, rng);
  const auto y = residual_block(ForwardContext<double>{nullptr, Mode::train}, Var<double>(x), p).value();
  const auto r = relu(Var<double>(x)).value();
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], r[i], 1e-12);
}

TEST(ResidualBlock, ProjectionShortcutAndShape) {
  Rng rng(3);
  auto p = ResidualBlockParams<double>::create(32, 64, &rng);
  EXPECT_TRUE(p.shortcut.has_value());
  const auto x = random_tensor<double>({1, 32, 16, 16}, rng);
  const auto y = residual_block(ForwardContext<double>{nullptr, Mode::train}, Var<double>(x), p);
  EXPECT_EQ(y.shape(), (Shape{1, 64, 16, 16}));
}

// ---- finite-difference checks, ten seeds each ----

class LayerGrad : public ::testing::TestWithParam<std::uint64_t> {};

#define DDANET_GRAD_TEST(Name, Case)            \
  TEST_P(LayerGrad, Name) {                     \
    const auto res = grad_check<Case>(GetParam()); \
    EXPECT_LE(res.max_rel, 1e-6) << res;        \
  }

DDANET_GRAD_TEST(Conv2dAllInputs, ConvCase)
DDANET_GRAD_TEST(ConvTranspose2dAllInputs, ConvTCase)
DDANET_GRAD_TEST(BatchNormTrainMode, BatchNormTrainCase)
DDANET_GRAD_TEST(BatchNormEvalMode, BatchNormEvalCase)
DDANET_GRAD_TEST(MaxPool, MaxPoolCase)
DDANET_GRAD_TEST(SEBlockAllParameters, SECase)
DDANET_GRAD_TEST(CompositeConvBnReluSum, CompositeCase)

TEST_P(LayerGrad, ResidualBlockEveryParameter) {
  const auto res = grad_check<ResidualCase>(GetParam());
  EXPECT_GE(res.checked, 100u);
  EXPECT_LE(res.max_rel, 1e-6) << res;
}

INSTANTIATE_TEST_SUITE_P(Seeds, LayerGrad, ::testing::Range<std::uint64_t>(0, 10));
