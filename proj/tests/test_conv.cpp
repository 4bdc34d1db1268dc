#include <gtest/gtest.h>

#include "hwreg/conv.hpp"
#include "hwreg/gradcheck.hpp"
#include "test_util.hpp"

using namespace hwreg;
using hwreg::testing::random_tensor;

namespace {

Tensor<double> naive_conv2d(const Tensor<double>& in, const Tensor<double>& w, const Tensor<double>& b, int s,
                            int p) {
  const std::size_t N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
  const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const std::size_t OH = (H + 2 * p - KH) / s + 1, OW = (W + 2 * p - KW) / s + 1;
  Tensor<double> out({N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t x = 0; x < OW; ++x) {
          double acc = b[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < KH; ++ky)
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const long iy = static_cast<long>(y * s + ky) - p, ix = static_cast<long>(x * s + kx) - p;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += in[((n * C + c) * H + iy) * W + ix] * w[((o * C + c) * KH + ky) * KW + kx];
              }
          out[((n * O + o) * OH + y) * OW + x] = acc;
        }
  return out;
}

Var<double> weighted_sum(const Var<double>& y, std::uint64_t seed) {
  return sum(mul(y, Var<double>::constant(random_tensor(y.shape(), seed + 777))));
}

}  // namespace

TEST(Conv, AllOnesInteriorIsNine) {
  auto in = Var<double>::constant(Tensor<double>({1, 1, 4, 4}, 1.0));
  auto w = Var<double>::constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  auto b = Var<double>::constant(Tensor<double>({1}));
  auto out = conv_nd(in, w, b, {1}, {1});
  ASSERT_EQ(out.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_EQ(out.value()[1 * 4 + 1], 9.0);
  EXPECT_EQ(out.value()[2 * 4 + 2], 9.0);
  EXPECT_EQ(out.value()[0], 4.0);
}

TEST(Conv, IdentityKernel) {
  auto x = random_tensor({2, 5, 6}, 3);
  Tensor<double> w({2, 2, 3, 3});
  w[(0 * 2 + 0) * 9 + 4] = 1;
  w[(1 * 2 + 1) * 9 + 4] = 1;
  auto out = conv_nd(Var<double>::constant(x), Var<double>::constant(w), Var<double>::constant(Tensor<double>({2})),
                     {1}, {1});
  EXPECT_EQ(out.value(), x);
}

TEST(Conv, MatchesNaiveOracle) {
  for (int s = 1; s <= 2; ++s)
    for (int p = 0; p <= 2; ++p) {
      auto in = random_tensor({2, 3, 5, 5}, 10 + s + p);
      auto w = random_tensor({4, 3, 3, 3}, 20 + s + p);
      auto b = random_tensor({4}, 30);
      auto ref = naive_conv2d(in, w, b, s, p);
      auto out = conv_nd(Var<double>::constant(in), Var<double>::constant(w), Var<double>::constant(b), {s}, {p});
      EXPECT_LE(max_abs_diff(out.value(), ref), 1e-6) << "stride " << s << " pad " << p;
    }
}

TEST(Conv, ThreeDimensionalShape) {
  auto out = conv_nd(Var<double>::constant(random_tensor({2, 6, 6, 6}, 1)),
                     Var<double>::constant(random_tensor({3, 2, 3, 3, 3}, 2)),
                     Var<double>::constant(random_tensor({3}, 3)), {2}, {1});
  EXPECT_EQ(out.shape(), (Shape{3, 3, 3, 3}));
}

TEST(Conv, ShapeErrors) {
  auto in = Var<double>::constant(Tensor<double>({2, 4, 4}));
  auto w = Var<double>::constant(Tensor<double>({1, 3, 3, 3}));
  auto b = Var<double>::constant(Tensor<double>({1}));
  EXPECT_THROW(conv_nd(in, w, b, {1}, {1}), DimensionError);
  auto w2 = Var<double>::constant(Tensor<double>({1, 2, 7, 7}));
  EXPECT_THROW(conv_nd(in, w2, b, {1}, {1}), DimensionError);
  auto w3 = Var<double>::constant(Tensor<double>({1, 2, 3, 3}));
  EXPECT_THROW(conv_nd(in, w3, b, {0}, {1}), ValidationError);
}

class ConvGrad : public ::testing::TestWithParam<int> {};

TEST_P(ConvGrad, VjpMatchesFiniteDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  const int stride = 1 + GetParam() % 2;
  const bool three_d = GetParam() % 3 == 0;
  const Shape in_shape = three_d ? Shape{2, 5, 4, 5} : Shape{2, 6, 7};
  const Shape w_shape = three_d ? Shape{3, 2, 3, 3, 3} : Shape{3, 2, 3, 3};
  auto in = random_tensor(in_shape, seed);
  auto w = random_tensor(w_shape, seed + 1);
  auto b = random_tensor({3}, seed + 2);
  auto cin = Var<double>::constant(in), cw = Var<double>::constant(w), cb = Var<double>::constant(b);
  EXPECT_LE(finite_diff_check([&](const Var<double>& x) { return weighted_sum(conv_nd(x, cw, cb, {stride}, {1}), seed); },
                              in, 1e-6),
            1e-4);
  EXPECT_LE(finite_diff_check([&](const Var<double>& x) { return weighted_sum(conv_nd(cin, x, cb, {stride}, {1}), seed); },
                              w, 1e-6),
            1e-4);
  EXPECT_LE(finite_diff_check([&](const Var<double>& x) { return weighted_sum(conv_nd(cin, cw, x, {stride}, {1}), seed); },
                              b, 1e-6),
            1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, ConvGrad, ::testing::Range(0, 20));

TEST(TransposedConv, SingleTapIdentity) {
  auto out = transposed_conv_1d_axis(Var<double>::constant(Tensor<double>({1}, 1.0)), std::vector<double>{1.0}, 0, 1);
  ASSERT_EQ(out.shape(), (Shape{1}));
  EXPECT_EQ(out.value()[0], 1.0);
}

TEST(TransposedConv, StrideSpreadsTaps) {
  Tensor<double> in({2}, std::vector<double>{1.0, 2.0});
  auto out = transposed_conv_1d_axis(Var<double>::constant(in), std::vector<double>{1.0, 0.5, 0.25}, 0, 2);
  ASSERT_EQ(out.shape(), (Shape{4}));
  EXPECT_EQ(out.value().storage(), (std::vector<double>{1.0, 0.5, 2.25, 1.0}));
  EXPECT_THROW(transposed_conv_1d_axis(Var<double>::constant(in), std::vector<double>{1.0}, 0, 0), ValidationError);
}

class TransposedConvGrad : public ::testing::TestWithParam<int> {};

TEST_P(TransposedConvGrad, AdjointMatchesFiniteDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto in = random_tensor({2, 4, 3}, seed);
  const auto taps_t = random_tensor({7}, seed + 3);
  const std::vector<double> taps(taps_t.storage());
  const std::size_t axis = 1 + GetParam() % 2;
  const int stride = 1 + GetParam() % 3;
  EXPECT_LE(finite_diff_check(
                [&](const Var<double>& x) { return weighted_sum(transposed_conv_1d_axis(x, taps, axis, stride, 3, 0), seed); },
                in, 1e-6),
            1e-5);
}

INSTANTIATE_TEST_SUITE_P(Seeds, TransposedConvGrad, ::testing::Range(0, 20));

TEST(AvgPool, AveragesBlocks) {
  Tensor<double> in({1, 2, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  auto out = avg_pool(Var<double>::constant(in), 2, 2);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(out.value()[0], 3.5);
  EXPECT_EQ(out.value()[1], 5.5);
  EXPECT_THROW(avg_pool(Var<double>::constant(Tensor<double>({1, 3, 4})), 2, 2), DimensionError);
}

class AvgPoolGrad : public ::testing::TestWithParam<int> {};

TEST_P(AvgPoolGrad, VjpMatchesFiniteDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto in = random_tensor({2, 4, 4, 2}, seed);
  EXPECT_LE(finite_diff_check([&](const Var<double>& x) { return weighted_sum(avg_pool(x, 3, 2), seed); }, in, 1e-6),
            1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, AvgPoolGrad, ::testing::Range(0, 20));
