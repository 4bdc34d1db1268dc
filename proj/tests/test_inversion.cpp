#include <gtest/gtest.h>

#include <algorithm>

#include "hwreg/field.hpp"
#include "hwreg/gradcheck.hpp"
#include "hwreg/inversion.hpp"
#include "hwreg/spline.hpp"
#include "test_util.hpp"

using namespace hwreg;
using hwreg::testing::random_tensor;

namespace {

Tensor<double> linear_field(const Shape& spatial, double alpha, double centre) {
  const std::size_t n = spatial.size();
  Tensor<double> d(with_channels(n, spatial));
  const Extent3 e = spatial_extent(d.shape(), n);
  for (std::size_t p = 0; p < e.size(); ++p) {
    const auto q = detail::unravel(p, e);
    for (std::size_t c = 0; c < n; ++c) d[c * e.size() + p] = alpha * (static_cast<double>(q[3 - n + c]) - centre);
  }
  return d;
}

double interior_max_norm(const Tensor<double>& a, std::size_t margin) {
  const std::size_t n = a.rank() - 1;
  const Extent3 e = spatial_extent(a.shape(), n);
  double m = 0;
  for (std::size_t p = 0; p < e.size(); ++p) {
    const auto q = detail::unravel(p, e);
    bool inside = true;
    for (std::size_t ax = 3 - n; ax < 3; ++ax) inside = inside && q[ax] >= margin && q[ax] + margin < e[ax];
    if (!inside) continue;
    double s = 0;
    for (std::size_t c = 0; c < n; ++c) s += a[c * e.size() + p] * a[c * e.size() + p];
    m = std::max(m, std::sqrt(s));
  }
  return m;
}

// Dense field of a random control grid clamped to the level's gamma.
Tensor<double> clamped_spline_field(const Shape& img, std::size_t level, std::uint64_t seed, double fraction = 1.0) {
  const double gamma = gamma_for_level(img.size(), level) * fraction;
  ControlGrid<double> g{level, random_tensor(control_grid_shape(img, level), seed, -gamma, gamma)};
  return upsample_control_grid(g);
}

}  // namespace

TEST(Inversion, ZeroFieldIsItsOwnInverse) {
  auto r = fixed_point_invert(identity_deformation<double>({8, 8}));
  EXPECT_EQ(r.inverse.max_abs(), 0.0);
  EXPECT_LE(r.stats.iterations, 2);
}

TEST(Inversion, TranslationInverse) {
  Tensor<double> t({2, 12, 12});
  for (std::size_t p = 0; p < 144; ++p) {
    t[p] = 1.7;
    t[144 + p] = -0.6;
  }
  auto r = fixed_point_invert(t);
  for (std::size_t p = 0; p < 144; ++p) {
    EXPECT_NEAR(r.inverse[p], -1.7, 0.01);
    EXPECT_NEAR(r.inverse[144 + p], 0.6, 0.01);
  }
}

TEST(Inversion, LinearFieldInverse) {
  for (double alpha : {-0.4, 0.3}) {
    const Shape sp{16, 16};
    auto r = fixed_point_invert(linear_field(sp, alpha, 7.5));
    auto expected = linear_field(sp, -alpha / (1 + alpha), 7.5);
    // margin keeps the analytic preimage inside the box for the contraction
    EXPECT_LE(interior_max_norm(r.inverse - expected, 4), 0.01) << alpha;
  }
  auto r3 = fixed_point_invert(linear_field({10, 10, 10}, 0.25, 4.5));
  EXPECT_LE(interior_max_norm(r3.inverse - linear_field({10, 10, 10}, -0.2, 4.5), 2), 0.01);
}

TEST(Inversion, ResidualMeetsTolerance) {
  auto a = clamped_spline_field({24, 24}, 1, 3);
  FixedPointConfig cfg;
  auto r = fixed_point_invert(a, cfg);
  auto check = compose(a, r.inverse);
  EXPECT_LE(interior_max_norm(check, 0), cfg.tol);
  EXPECT_LE(r.stats.residual, cfg.tol);
}

TEST(Inversion, DoubleInversionReturnsOriginal) {
  FixedPointConfig cfg;
  for (std::uint64_t seed : {5, 6, 7}) {
    auto a = clamped_spline_field({64, 64}, 4, seed, 0.5);
    auto inv = fixed_point_invert(a, cfg).inverse;
    auto back = fixed_point_invert(inv, cfg).inverse;
    EXPECT_LE(interior_max_norm(back - a, 4), 2 * cfg.tol) << seed;
  }
}

TEST(Inversion, NonContractiveFieldRaisesConvergenceError) {
  auto a = random_tensor({2, 12, 12}, 4, -4.0, 4.0);
  FixedPointConfig cfg;
  cfg.max_iter = 5;
  try {
    fixed_point_invert(a, cfg);
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_GT(e.residual(), cfg.tol);
    EXPECT_EQ(e.best_iterate().size(), a.size());
  }
}

TEST(Inversion, ConfigValidation) {
  FixedPointConfig cfg;
  cfg.tol = 0;
  EXPECT_THROW(fixed_point_invert(identity_deformation<double>({4, 4}), cfg), ValidationError);
}

TEST(Inversion, SinglePrecision) {
  auto a = clamped_spline_field({16, 16, 16}, 1, 9).cast<float>();
  auto r = fixed_point_invert(a);
  auto check = compose(a, r.inverse);
  EXPECT_LE(check.max_abs(), 0.0101f);
}

TEST(Anderson, SingleEntryIsPlainStep) {
  std::deque<std::vector<double>> xs{{1.0, 2.0}}, gs{{0.5, 0.25}};
  std::vector<double> out;
  ASSERT_TRUE(anderson_step(xs, gs, 1e-8, out));
  EXPECT_EQ(out, gs.back());
}

TEST(Anderson, AcceleratesLinearContraction) {
  // x -> M x + b with a slowly contracting diagonal-plus-coupling M.
  const std::size_t n = 20;
  auto M = [&](const std::vector<double>& x) {
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i)
      y[i] = 0.95 * x[i] * (1.0 - 0.04 * static_cast<double>(i)) + 0.02 * x[(i + 1) % n] + 1.0;
    return y;
  };
  auto solve = [&](bool accelerate) {
    std::vector<double> x(n, 0.0);
    AndersonMixer mixer(4, 1e-8);
    for (int it = 1; it < 5000; ++it) {
      auto g = M(x);
      double res = 0;
      for (std::size_t i = 0; i < n; ++i) res = std::max(res, std::abs(g[i] - x[i]));
      if (res < 1e-10) return it;
      x = accelerate ? mixer.step(x, g) : g;
    }
    return 5000;
  };
  const int plain = solve(false), anderson = solve(true);
  EXPECT_LT(anderson, plain);
}

TEST(Anderson, CollinearResidualsFallBack) {
  // Residuals that are exact multiples of one vector make the Gram matrix
  // rank one; the mixer must restart and still converge.
  std::vector<double> dir{1.0, -2.0, 0.5};
  auto map = [&](const std::vector<double>& x) {
    std::vector<double> y(3);
    double proj = 0;
    for (int i = 0; i < 3; ++i) proj += x[i] * dir[i];
    for (int i = 0; i < 3; ++i) y[i] = x[i] - 0.5 * (proj - 1.0) * dir[i] / 5.25;
    return y;
  };
  std::deque<std::vector<double>> xs{{0, 0, 0}, {1, 1, 1}}, gs;
  for (auto& x : xs) gs.push_back(map(x));
  std::vector<double> out;
  EXPECT_FALSE(anderson_step(xs, gs, 1e-8, out));

  AndersonMixer mixer(4, 1e-8);
  std::vector<double> x{3.0, 1.0, -2.0};
  bool converged = false;
  for (int it = 0; it < 200 && !converged; ++it) {
    auto g = map(x);
    double res = 0;
    for (int i = 0; i < 3; ++i) res = std::max(res, std::abs(g[i] - x[i]));
    converged = res < 1e-12;
    x = mixer.step(x, g);
  }
  EXPECT_TRUE(converged);
  EXPECT_GT(mixer.fallbacks(), 0);
}

TEST(InversionBackward, ZeroCotangent) {
  auto a = clamped_spline_field({8, 8}, 1, 1);
  auto inv = fixed_point_invert(a).inverse;
  EXPECT_EQ(invert_backward(inv, a, Tensor<double>::zeros_like(a)).max_abs(), 0.0);
}

TEST(InversionBackward, IdentityGivesNegatedCotangent) {
  auto a = identity_deformation<double>({6, 7});
  auto v = random_tensor(a.shape(), 3);
  auto g = invert_backward(a, a, v);
  EXPECT_LE(max_abs_diff(g, v * -1.0), 1e-15);
}

TEST(InversionBackward, SavesOnlyTheSolution) {
  Tape<double> tape;
  auto a = tape.leaf(clamped_spline_field({8, 8}, 1, 2));
  InversionStats stats;
  auto inv = invert(a, {}, &stats);
  ASSERT_TRUE(inv.requires_grad());
  EXPECT_EQ(inv.node()->saved.size(), 1u);
  EXPECT_EQ(inv.node()->saved[0].get(), inv.node()->value.get());
  EXPECT_GE(stats.iterations, 1);
}

TEST(InversionBackward, MatchesFiniteDifferences) {
  FixedPointConfig cfg;
  cfg.tol = 1e-12;
  cfg.backward_tol = 1e-12;
  cfg.max_iter = 200;
  for (const Shape& sp : {Shape{8, 8}, Shape{8, 8, 8}}) {
    const std::size_t level = 1;
    auto a = clamped_spline_field(sp, level, 11, 0.8);
    auto w = Var<double>::constant(random_tensor(a.shape(), 12));
    auto fn = [&](const Var<double>& x) { return sum(mul(invert(x, cfg), w)); };
    EXPECT_LE(finite_diff_check(fn, a, 1e-6), 1e-3) << shape_string(sp);
  }
}

TEST(InversionProperties, RandomClampedFieldsConverge) {
  std::vector<int> iters;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto a = clamped_spline_field({32, 32, 32}, 1, 100 + seed);
    auto r = fixed_point_invert(a);
    iters.push_back(r.stats.iterations);
    EXPECT_LE(r.stats.iterations, 20);
    EXPECT_LE(r.stats.residual, 0.01);
  }
  std::sort(iters.begin(), iters.end());
  EXPECT_LE(iters[iters.size() / 2], 8);
}
