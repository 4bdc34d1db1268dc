#include <gtest/gtest.h>

#include <cmath>

#include "hwreg/pipeline.hpp"
#include "test_util.hpp"

using namespace hwreg;
using hwreg::testing::random_tensor;
using hwreg::testing::smooth_field;

namespace {

ModelWeights<double> active_weights(std::uint64_t seed, std::size_t dims = 2, double out_scale = 0.05) {
  EncoderConfig c;
  c.dims = dims;
  c.channels = {4, 8, 8};
  auto w = init_weights<double>(c, seed);
  for (std::size_t k = 0; k < c.num_levels; ++k) {
    auto& p = w.at("pred" + std::to_string(k) + ".out.w");
    p.value = random_tensor(p.value.shape(), seed * 31 + k, -out_scale, out_scale);
  }
  return w;
}

Tensor<double> blob_image(const Shape& spatial, std::uint64_t seed) {
  auto f = smooth_field(spatial, 1.0, seed);
  Shape s{1};
  s.insert(s.end(), spatial.begin(), spatial.end());
  Tensor<double> img(s);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = f[i];
  return img;
}

double mean_norm(const Tensor<double>& d) {
  const std::size_t n = field_rank(d.shape());
  const std::size_t m = d.size() / n;
  double s = 0;
  for (std::size_t p = 0; p < m; ++p) {
    double q = 0;
    for (std::size_t c = 0; c < n; ++c) q += d[c * m + p] * d[c * m + p];
    s += std::sqrt(q);
  }
  return s / static_cast<double>(m);
}

}  // namespace

TEST(Pipeline, ParseMode) {
  EXPECT_EQ(parse_mode("sym"), Mode::sym);
  EXPECT_EQ(parse_mode("non-sym"), Mode::non_sym);
  EXPECT_THROW(parse_mode("both"), ValidationError);
}

TEST(Pipeline, ZeroPredictorsGiveIdentity) {
  auto w = init_weights<double>(EncoderConfig{}, 3);
  auto b = bind_constant(w);
  auto r = register_images(b, Var<double>::constant(blob_image({16, 16}, 1)),
                           Var<double>::constant(blob_image({16, 16}, 2)));
  EXPECT_EQ(r.f12.value().max_abs(), 0.0);
  EXPECT_EQ(r.f21.value().max_abs(), 0.0);
  ASSERT_EQ(r.stack.size(), 3u);
  EXPECT_EQ(r.stack.front().forward.level, 2u);
  auto d = infer_complete(r, {{0, 3.5, 7.25}, {0, 0, 15}});
  for (const auto& p : d) EXPECT_EQ(std::abs(p[1]) + std::abs(p[2]), 0.0);
}

TEST(Pipeline, LevelUpdateWithZeroPredictorKeepsState) {
  auto w = init_weights<double>(EncoderConfig{}, 3);
  auto b = bind_constant(w);
  LevelState<double> s{2, Var<double>::constant(smooth_field({16, 16}, 0.5, 1)),
                       Var<double>::constant(smooth_field({16, 16}, 0.5, 2)),
                       Var<double>::constant(smooth_field({16, 16}, 0.5, 3)),
                       Var<double>::constant(smooth_field({16, 16}, 0.5, 4))};
  auto fa = extract_features(b, Var<double>::constant(blob_image({16, 16}, 1)));
  auto fb = extract_features(b, Var<double>::constant(blob_image({16, 16}, 2)));
  auto out = level_update(b, 1, s, fa[1], fb[1], Mode::sym);
  EXPECT_EQ(out.state.level, 1u);
  EXPECT_LE(max_abs_diff(out.state.d1.value(), s.d1.value()), 1e-12);
  EXPECT_LE(max_abs_diff(out.state.d2_inv.value(), s.d2_inv.value()), 1e-12);
}

TEST(Pipeline, LevelUpdateSwapMirrorsState) {
  auto w = active_weights(4);
  auto b = bind_constant(w);
  auto s1 = Var<double>::constant(smooth_field({16, 16}, 0.4, 1));
  auto s2 = Var<double>::constant(smooth_field({16, 16}, 0.4, 2));
  auto fa = extract_features(b, Var<double>::constant(blob_image({16, 16}, 1)));
  auto fb = extract_features(b, Var<double>::constant(blob_image({16, 16}, 2)));
  LevelState<double> s{2, s1, s2, s2, s1};
  LevelState<double> m{2, s2, s1, s1, s2};
  auto a = level_update(b, 1, s, fa[1], fb[1], Mode::sym).state;
  auto c = level_update(b, 1, m, fb[1], fa[1], Mode::sym).state;
  EXPECT_TRUE(a.d1.value() == c.d2.value());
  EXPECT_TRUE(a.d2.value() == c.d1.value());
  EXPECT_TRUE(a.d1_inv.value() == c.d2_inv.value());
  EXPECT_TRUE(a.d2_inv.value() == c.d1_inv.value());
}

TEST(Pipeline, SelfRegistrationIsNearIdentity) {
  auto w = active_weights(5);
  auto b = bind_constant(w);
  auto x = Var<double>::constant(blob_image({32, 32}, 3));
  auto r = register_images(b, x, x);
  ASSERT_GT(r.stack.back().forward.values.max_abs(), 0.01);  // predictors are active
  EXPECT_LE(mean_norm(r.f12.value()), 0.1);
  EXPECT_LE(mean_norm(r.f21.value()), 0.1);
}

TEST(Pipeline, SwappingInputsSwapsOutputsBitwise) {
  for (Mode mode : {Mode::sym, Mode::non_sym}) {
    auto w = active_weights(6);
    auto b = bind_constant(w);
    auto xa = Var<double>::constant(blob_image({32, 32}, 4));
    auto xb = Var<double>::constant(blob_image({32, 32}, 5));
    PipelineConfig cfg;
    cfg.mode = mode;
    auto ab = register_images(b, xa, xb, cfg);
    auto ba = register_images(b, xb, xa, cfg);
    EXPECT_GT(ab.f12.value().max_abs(), 0.05);
    EXPECT_TRUE(ab.f12.value() == ba.f21.value()) << mode_name(mode);
    EXPECT_TRUE(ab.f21.value() == ba.f12.value()) << mode_name(mode);
  }
}

TEST(Pipeline, SwapSymmetryInThreeDimensions) {
  auto w = active_weights(7, 3);
  auto b = bind_constant(w);
  auto xa = Var<double>::constant(blob_image({8, 8, 8}, 4));
  auto xb = Var<double>::constant(blob_image({8, 8, 8}, 5));
  auto ab = register_images(b, xa, xb);
  auto ba = register_images(b, xb, xa);
  EXPECT_TRUE(ab.f12.value() == ba.f21.value());
}

TEST(Pipeline, RejectsMismatchedImages) {
  auto w = init_weights<double>(EncoderConfig{}, 3);
  EXPECT_THROW(register_images(bind_constant(w), Var<double>::constant(blob_image({16, 16}, 1)),
                               Var<double>::constant(blob_image({16, 8}, 2))),
               DimensionError);
  EXPECT_THROW(register_images(bind_constant(w), Var<double>::constant(blob_image({18, 18}, 1)),
                               Var<double>::constant(blob_image({18, 18}, 2))),
               DimensionError);
}

TEST(Pipeline, HalfwayInversesStayConsistent) {
  auto w = active_weights(8);
  auto b = bind_constant(w);
  auto r = register_images(b, Var<double>::constant(blob_image({32, 32}, 6)),
                           Var<double>::constant(blob_image({32, 32}, 7)));
  const auto& h = r.halfway;
  // incremental inverses against each other and against a direct inversion
  EXPECT_LE(compose(h.d1.value(), h.d1_inv.value()).max_abs(), 0.05);
  EXPECT_LE(compose(h.d2.value(), h.d2_inv.value()).max_abs(), 0.05);
  auto direct = fixed_point_invert(h.d1.value()).inverse;
  EXPECT_LE(max_abs_diff(direct, h.d1_inv.value()), 0.05);
}

TEST(Pipeline, PredictedGridsAreContractive) {
  auto w = active_weights(9, 2, 5.0);  // saturating predictors
  auto b = bind_constant(w);
  auto r = register_images(b, Var<double>::constant(blob_image({32, 32}, 1)),
                           Var<double>::constant(blob_image({32, 32}, 2)));
  for (const auto& rec : r.stack) {
    EXPECT_LT(rec.forward.values.max_abs(), w.gamma(rec.forward.level));
    EXPECT_LT(lipschitz_oracle(rec.forward, 4), 1.0);
    EXPECT_LT(lipschitz_oracle(rec.backward, 4), 1.0);
  }
}

TEST(Pipeline, SymModeInverseErrorEqualsCycleError) {
  auto w = active_weights(10);
  auto b = bind_constant(w);
  auto xa = blob_image({32, 32}, 1), xb = blob_image({32, 32}, 2);
  auto e = consistency_errors(b, xa, xb);
  EXPECT_GT(e.inverse_err, 0.0);
  EXPECT_LE(std::abs(e.inverse_err - e.cycle_err), 1e-10 * e.inverse_err);

  auto zero = init_weights<double>(EncoderConfig{}, 1);
  auto z = consistency_errors(bind_constant(zero), xa, xb);
  EXPECT_EQ(z.inverse_err, 0.0);
  EXPECT_EQ(z.cycle_err, 0.0);
}

TEST(Pipeline, NonSymModeLosesInverseConsistency) {
  auto w = active_weights(11, 2, 0.2);
  auto b = bind_constant(w);
  auto xa = blob_image({32, 32}, 1), xb = blob_image({32, 32}, 2);
  PipelineConfig ns;
  ns.mode = Mode::non_sym;
  auto sym = consistency_errors(b, xa, xb);
  auto non = consistency_errors(b, xa, xb, ns);
  EXPECT_GT(non.cycle_err, 10 * sym.cycle_err);
}

TEST(Pipeline, CompleteMatchesStandard) {
  auto w = active_weights(12);
  auto b = bind_constant(w);
  auto r = register_images(b, Var<double>::constant(blob_image({32, 32}, 3)),
                           Var<double>::constant(blob_image({32, 32}, 4)));
  const auto [f12, f21] = infer_standard(r);
  std::vector<Point> pts;
  for (std::size_t y = 2; y < 30; y += 3)
    for (std::size_t x = 2; x < 30; x += 3) pts.push_back({0, double(y), double(x)});
  for (bool fwd : {true, false}) {
    const auto& dense = fwd ? f12 : f21;
    auto d = infer_complete(r, pts, fwd);
    double worst = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const std::size_t p = static_cast<std::size_t>(pts[i][1]) * 32 + static_cast<std::size_t>(pts[i][2]);
      worst = std::max({worst, std::abs(d[i][1] - dense[p]), std::abs(d[i][2] - dense[1024 + p])});
    }
    EXPECT_LE(worst, 0.1) << fwd;
  }
}

TEST(Pipeline, CompleteVariantNeverFolds) {
  auto w = active_weights(13, 2, 5.0);
  auto b = bind_constant(w);
  auto r = register_images(b, Var<double>::constant(blob_image({16, 16}, 3)),
                           Var<double>::constant(blob_image({16, 16}, 4)));
  auto stats = jacobian_stats_fn(complete_point_map(r), Extent3{1, 16, 16}, 2, 5000, 1e-6, 3);
  EXPECT_EQ(stats.folding_fraction, 0.0);
  EXPECT_GT(stats.det_std, 0.0);
}

TEST(Pipeline, StandardVariantIsDeterministic) {
  auto w = active_weights(14);
  auto b = bind_constant(w);
  auto xa = Var<double>::constant(blob_image({16, 16}, 3)), xb = Var<double>::constant(blob_image({16, 16}, 4));
  EXPECT_TRUE(infer_standard(register_images(b, xa, xb)).first == infer_standard(register_images(b, xa, xb)).first);
}
