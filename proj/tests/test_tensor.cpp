#include <gtest/gtest.h>

#include "hwreg/tensor.hpp"

using namespace hwreg;

TEST(Tensor, ShapeAndSize) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_EQ(t.sum(), 0.0);
}

TEST(Tensor, RejectsZeroDimension) { EXPECT_THROW(Tensor<double>({2, 0}), DimensionError); }

TEST(Tensor, RejectsDataLengthMismatch) {
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor<double> t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.storage(), t.storage());
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Tensor, Arithmetic) {
  Tensor<double> a({3}, std::vector<double>{1, 2, 3});
  Tensor<double> b({3}, std::vector<double>{4, 5, 6});
  EXPECT_EQ((a + b).storage(), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ((b - a).storage(), (std::vector<double>{3, 3, 3}));
  EXPECT_EQ((a * 2.0).storage(), (std::vector<double>{2, 4, 6}));
  EXPECT_DOUBLE_EQ(max_abs_diff(a, b), 3.0);
  EXPECT_THROW(a += Tensor<double>({2}), DimensionError);
}

TEST(Tensor, FiniteCheck) {
  Tensor<float> t({2});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(Tensor, SpatialExtent) {
  auto e = spatial_extent({2, 5, 7}, 2);
  EXPECT_EQ(e.d, 1u);
  EXPECT_EQ(e.h, 5u);
  EXPECT_EQ(e.w, 7u);
  auto e3 = spatial_extent({3, 4, 5, 6}, 3);
  EXPECT_EQ(e3.size(), 120u);
  EXPECT_EQ(spatial_shape({3, 4, 5, 6}, 3), (Shape{4, 5, 6}));
}
