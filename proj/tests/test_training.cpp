#include <gtest/gtest.h>

#include <cmath>

#include "hwreg/gradcheck.hpp"
#include "hwreg/metrics.hpp"
#include "hwreg/training.hpp"
#include "test_util.hpp"

using namespace hwreg;
using hwreg::testing::random_tensor;
using hwreg::testing::smooth_field;

namespace {

Tensor<double> image(const Shape& spatial, std::uint64_t seed) {
  auto f = smooth_field(spatial, 1.0, seed);
  Shape s{1};
  s.insert(s.end(), spatial.begin(), spatial.end());
  return Tensor<double>(s, std::vector<double>(f.storage().begin(), f.storage().begin() + shape_size(spatial)));
}

TrainConfig small_config(std::size_t steps) {
  TrainConfig c;
  c.steps = steps;
  c.synth.size = 32;
  c.encoder.channels = {4, 8, 8};
  return c;
}

// Mean endpoint error over voxels at least `margin` from every face.
double mean_endpoint_error(const Tensor<double>& a, const Tensor<double>& b, std::size_t margin = 0) {
  const std::size_t n = field_rank(a.shape()), m = a.size() / n;
  const Extent3 e = spatial_extent(a.shape(), n);
  const std::array<std::size_t, 3> ext{e.d, e.h, e.w};
  double s = 0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < m; ++p) {
    const auto q = detail::unravel(p, e);
    bool inside = true;
    for (std::size_t ax = 3 - n; ax < 3; ++ax) inside = inside && q[ax] >= margin && q[ax] + margin < ext[ax];
    if (!inside) continue;
    double d = 0;
    for (std::size_t c = 0; c < n; ++c) d += (a[c * m + p] - b[c * m + p]) * (a[c * m + p] - b[c * m + p]);
    s += std::sqrt(d);
    ++count;
  }
  return s / static_cast<double>(count);
}

}  // namespace

TEST(TotalLoss, IdenticalImagesAndIdentityFields) {
  auto x = Var<double>::constant(image({16, 16}, 1));
  auto zero = Var<double>::constant(identity_deformation<double>({16, 16}));
  for (double lambda : {0.0, 1.0, 7.0}) EXPECT_NEAR(total_loss(x, x, zero, zero, lambda).value()[0], -2.0, 1e-12);
}

TEST(TotalLoss, ConstantFieldsCarryNoPenalty) {
  auto xa = Var<double>::constant(image({16, 16}, 1)), xb = Var<double>::constant(image({16, 16}, 2));
  Tensor<double> c({2, 16, 16});
  for (std::size_t i = 0; i < 256; ++i) {
    c[i] = 0.7;
    c[256 + i] = -1.3;
  }
  auto f = Var<double>::constant(c), g = Var<double>::constant(c * -1.0);
  const double l0 = total_loss(xa, xb, f, g, 0.0).value()[0];
  EXPECT_EQ(l0, total_loss(xa, xb, f, g, 2.5).value()[0]);
  auto zero = Var<double>::constant(identity_deformation<double>({16, 16}));
  EXPECT_NE(l0, total_loss(xa, xb, zero, zero, 0.0).value()[0]);
}

TEST(TotalLoss, MirrorSymmetric) {
  auto xa = Var<double>::constant(image({16, 16}, 1)), xb = Var<double>::constant(image({16, 16}, 2));
  auto f = Var<double>::constant(smooth_field({16, 16}, 1.5, 3)), g = Var<double>::constant(smooth_field({16, 16}, 1.5, 4));
  EXPECT_NEAR(total_loss(xa, xb, f, g, 1.0).value()[0], total_loss(xb, xa, g, f, 1.0).value()[0], 1e-12);
}

TEST(TotalLoss, RejectsNegativeLambda) {
  auto x = Var<double>::constant(image({8, 8}, 1));
  auto z = Var<double>::constant(identity_deformation<double>({8, 8}));
  EXPECT_THROW(total_loss(x, x, z, z, -1.0), ValidationError);
}

TEST(TotalLoss, GradientThroughPipelineMatchesFiniteDifferences) {
  EncoderConfig ec;
  ec.num_levels = 2;
  ec.channels = {2, 2};
  auto w = init_weights<double>(ec, 3);
  for (auto& p : w.params)
    if (p.name.find(".out.w") != std::string::npos) p.value = random_tensor(p.value.shape(), 17, -0.3, 0.3);
  PipelineConfig pc;
  pc.inversion.tol = 1e-12;
  pc.inversion.max_iter = 300;
  pc.inversion.backward_tol = 1e-13;
  pc.inversion.backward_max_iter = 500;
  auto xa = image({8, 8}, 5), xb = image({8, 8}, 6);
  double worst = 0;
  for (const auto& param : w.params) {
    auto fn = [&](const Var<double>& leaf) {
      auto b = bind_constant(w);
      b.vars[w.find(param.name)] = leaf;
      auto va = Var<double>::constant(xa), vb = Var<double>::constant(xb);
      auto r = register_images(b, va, vb, pc);
      return total_loss(va, vb, r.f12, r.f21, 1.0);
    };
    const double err = finite_diff_check(fn, param.value, 1e-6);
    EXPECT_LE(err, 1e-3) << param.name;
    worst = std::max(worst, err);
  }
  RecordProperty("worst_rel_err", std::to_string(worst));
}

TEST(Synth, ZeroAmplitudeGivesIdenticalPair) {
  SynthConfig c;
  c.size = 32;
  c.amplitude = 0;
  c.noise = 0;
  auto p = synth_pair(3, c);
  EXPECT_TRUE(p.x_a == p.x_b);
  EXPECT_TRUE(p.labels_a == p.labels_b);
  EXPECT_EQ(p.g_true.max_abs(), 0.0);
  c.noise = 0.02;
  auto q = synth_pair(3, c);
  EXPECT_TRUE(q.labels_a == q.labels_b);
  EXPECT_GT(max_abs_diff(q.x_a, q.x_b), 0.0);
  EXPECT_LT(max_abs_diff(q.x_a, q.x_b), 0.2);
}

TEST(Synth, DeterministicAndSeedDependent) {
  SynthConfig c;
  c.size = 32;
  EXPECT_TRUE(synth_pair(5, c).x_b == synth_pair(5, c).x_b);
  EXPECT_FALSE(synth_pair(5, c).x_b == synth_pair(6, c).x_b);
}

TEST(Synth, GroundTruthWarpIsInvertible) {
  SynthConfig c;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = synth_pair(seed, c);
    EXPECT_GT(p.g_true.max_abs(), 1.0);
    EXPECT_EQ(jacobian_stats(p.g_true, 20000, 1e-7, seed).folding_fraction, 0.0) << seed;
  }
  SynthConfig c3;
  c3.dims = 3;
  c3.size = 16;
  EXPECT_EQ(jacobian_stats(synth_pair(1, c3).g_true, 20000).folding_fraction, 0.0);
}

TEST(Synth, GroundTruthRoundTrip) {
  SynthConfig c;
  FixedPointConfig cfg;
  // border-clamped sampling leaves the inverse undefined near the faces
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = synth_pair(seed, c);
    auto back = fixed_point_invert(fixed_point_invert(p.g_true, cfg).inverse, cfg).inverse;
    EXPECT_LE(mean_endpoint_error(back, p.g_true, 8), 2 * cfg.tol) << seed;
  }
}

TEST(Synth, Validation) {
  SynthConfig c;
  c.dims = 4;
  EXPECT_THROW(synth_pair(0, c), ValidationError);
  c = SynthConfig{};
  c.amplitude = 1.5;
  EXPECT_THROW(synth_pair(0, c), ValidationError);
}

TEST(Adam, MinimisesQuadratic) {
  ModelWeights<double> w;
  w.add("x", Tensor<double>({3}, std::vector<double>{3.0, -2.0, 0.5}));
  Adam<double> opt(w, {0.05});
  for (int i = 0; i < 2000; ++i) {
    w.zero_grad();
    for (std::size_t j = 0; j < 3; ++j) w.params[0].grad[j] = 2 * (w.params[0].value[j] - double(j));
    opt.step();
  }
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(w.params[0].value[j], double(j), 1e-3);
}

TEST(Train, ZeroStepsReturnsInitialWeights) {
  auto r = train<double>(small_config(0));
  EXPECT_TRUE(r.loss_history.empty());
  auto fresh = init_weights<double>(small_config(0).encoder, 0);
  for (std::size_t i = 0; i < fresh.params.size(); ++i) EXPECT_TRUE(fresh.params[i].value == r.weights.params[i].value);
}

TEST(Train, DeterministicGivenSeed) {
  auto a = train<float>(small_config(3));
  auto b = train<float>(small_config(3));
  ASSERT_EQ(a.loss_history.size(), 3u);
  EXPECT_EQ(a.loss_history, b.loss_history);
  auto c = small_config(3);
  c.seed = 1;
  EXPECT_NE(train<float>(c).loss_history, a.loss_history);
}

TEST(Train, Validation) {
  auto c = small_config(1);
  c.synth.size = 30;
  EXPECT_THROW(train<float>(c), ValidationError);
  c = small_config(1);
  c.lambda = -1;
  EXPECT_THROW(train<float>(c), ValidationError);
}

TEST(Train, CheckpointsNeverFold) {
  auto c = small_config(40);
  c.checkpoint_every = 20;
  int seen = 0;
  train<float>(c, [&](std::size_t, const ModelWeights<float>& w) {
    ++seen;
    auto p = synth_pair(validation_pair_seed(0, 0), c.synth);
    auto r = register_images(bind_constant(w), Var<float>::constant(p.x_a.cast<float>()),
                             Var<float>::constant(p.x_b.cast<float>()));
    auto js = jacobian_stats_fn(complete_point_map(r), Extent3{1, 32, 32}, 2, 4000, 1e-6, 1);
    EXPECT_EQ(js.folding_fraction, 0.0);
  });
  EXPECT_EQ(seen, 2);
}

TEST(Train, StrongerRegularisationSmoothsFields) {
  std::vector<double> det_std;
  for (double lambda : {0.5, 1.0, 2.0}) {
    auto c = small_config(150);
    c.lambda = lambda;
    auto r = train<float>(c);
    double s = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      auto p = synth_pair(validation_pair_seed(0, i), c.synth);
      auto reg = register_images(bind_constant(r.weights), Var<float>::constant(p.x_a.cast<float>()),
                                 Var<float>::constant(p.x_b.cast<float>()));
      s += jacobian_stats(reg.f12.value().cast<double>(), 20000, 1e-7, 2).det_std;
    }
    det_std.push_back(s / 4);
  }
  EXPECT_GE(det_std[0], det_std[1]);
  EXPECT_GE(det_std[1], det_std[2]);
}

TEST(Train, ShortRunBeatsIdentityOnHeldOutPairs) {
  auto c = small_config(300);
  auto r = train<float>(c);
  auto b = bind_constant(r.weights);
  double epe = 0, epe_identity = 0, dice_base = 0, dice_reg = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    auto p = synth_pair(validation_pair_seed(0, i), c.synth);
    auto reg = register_images(b, Var<float>::constant(p.x_a.cast<float>()), Var<float>::constant(p.x_b.cast<float>()));
    const auto f12 = reg.f12.value().cast<double>();
    epe += mean_endpoint_error(f12, p.g_true);
    epe_identity += mean_endpoint_error(Tensor<double>::zeros_like(p.g_true), p.g_true);
    dice_base += dice(p.labels_a, p.labels_b).mean;
    dice_reg += dice(warp_labels(p.labels_a, f12), p.labels_b).mean;
    auto js = jacobian_stats_fn(complete_point_map(reg), Extent3{1, 32, 32}, 2, 4000, 1e-6, i);
    EXPECT_EQ(js.folding_fraction, 0.0) << i;
  }
  EXPECT_LT(epe, epe_identity);
  EXPECT_GT(dice_reg, dice_base);
  RecordProperty("epe_ratio", std::to_string(epe / epe_identity));
  RecordProperty("dice_lift", std::to_string((dice_reg - dice_base) / 6));
}

TEST(TrainConfigJson, RoundTripAndDefaults) {
  TrainConfig c;
  c.lambda = 2.5;
  c.steps = 17;
  c.synth.warp_levels = {2, 3};
  c.encoder.channels = {4, 4, 8};
  c.pipeline.mode = Mode::non_sym;
  const nlohmann::json j = c;
  const auto back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  const auto partial = nlohmann::json::parse(R"({"steps": 5, "synth": {"size": 32}})").get<TrainConfig>();
  EXPECT_EQ(partial.steps, 5u);
  EXPECT_EQ(partial.synth.size, 32u);
  EXPECT_EQ(partial.synth.amplitude, SynthConfig{}.amplitude);
  EXPECT_EQ(partial.encoder.channels, EncoderConfig{}.channels);
  EXPECT_THROW(nlohmann::json::parse(R"({"mode": "sideways"})").get<TrainConfig>(), ValidationError);
}
