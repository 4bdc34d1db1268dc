#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "hwreg/field.hpp"
#include "hwreg/inversion.hpp"
#include "hwreg/losses.hpp"
#include "hwreg/networks.hpp"
#include "hwreg/pipeline.hpp"
#include "hwreg/spline.hpp"

namespace hwreg {

/// NCC(x_a ∘ f12, x_b) + NCC(x_a, x_b ∘ f21) + lambda (Grad f12 + Grad f21),
/// with NCC the (negative) local correlation loss.
template <typename T>
Var<T> total_loss(const Var<T>& x_a, const Var<T>& x_b, const Var<T>& f12, const Var<T>& f21, double lambda,
                  int window = 7) {
  if (lambda < 0) throw ValidationError("total_loss: lambda must be non-negative");
  auto sim = add(lncc_loss(warp_image(x_a, f12), x_b, window), lncc_loss(x_a, warp_image(x_b, f21), window));
  if (lambda == 0) return sim;
  return add(sim, scale(add(grad_l2_penalty(f12), grad_l2_penalty(f21)), static_cast<T>(lambda)));
}

// ---------------------------------------------------------------------------
// Synthetic pairs

struct SynthConfig {
  std::size_t size = 64;
  std::size_t dims = 2;
  std::size_t min_blobs = 4, max_blobs = 6;
  double min_radius = 0.1, max_radius = 0.25;  // fractions of the image size
  std::size_t min_fields = 2, max_fields = 3;
  std::vector<std::size_t> warp_levels{4, 5};  // drawn per field; clipped to the image
  double amplitude = 0.45;                     // fraction of gamma^(k)
  double noise = 0.02;
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"size", c.size},           {"dims", c.dims},
       {"min_blobs", c.min_blobs}, {"max_blobs", c.max_blobs},
       {"min_radius", c.min_radius}, {"max_radius", c.max_radius},
       {"min_fields", c.min_fields}, {"max_fields", c.max_fields},
       {"warp_levels", c.warp_levels}, {"amplitude", c.amplitude},
       {"noise", c.noise}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  const SynthConfig d;
  c.size = j.value("size", d.size);
  c.dims = j.value("dims", d.dims);
  c.min_blobs = j.value("min_blobs", d.min_blobs);
  c.max_blobs = j.value("max_blobs", d.max_blobs);
  c.min_radius = j.value("min_radius", d.min_radius);
  c.max_radius = j.value("max_radius", d.max_radius);
  c.min_fields = j.value("min_fields", d.min_fields);
  c.max_fields = j.value("max_fields", d.max_fields);
  c.warp_levels = j.value("warp_levels", d.warp_levels);
  c.amplitude = j.value("amplitude", d.amplitude);
  c.noise = j.value("noise", d.noise);
}

struct SyntheticPair {
  Tensor<double> x_a, x_b;  // [1, spatial...]
  LabelMap labels_a, labels_b;
  Tensor<double> g_true;  // x_b ≈ x_a ∘ g_true
};

namespace detail {

inline std::vector<std::size_t> usable_levels(const SynthConfig& c) {
  std::vector<std::size_t> out;
  for (std::size_t k : c.warp_levels)
    if (c.size % level_factor(k) == 0 && c.size / level_factor(k) >= 2) out.push_back(k);
  if (out.empty()) out.push_back(0);
  return out;
}

}  // namespace detail

/// Random smooth-blob image with matching labels, a ground-truth warp built
/// from amplitude-scaled clamped control grids, and the warped noisy partner.
inline SyntheticPair synth_pair(std::uint64_t seed, const SynthConfig& c) {
  if (c.dims != 2 && c.dims != 3) throw ValidationError("synth_pair: dims must be 2 or 3");
  if (c.size < 8) throw ValidationError("synth_pair: size must be at least 8");
  if (c.amplitude < 0 || c.amplitude > 1) throw ValidationError("synth_pair: amplitude must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = c.dims;
  Shape spatial(n, c.size);
  const Extent3 e = spatial_extent(with_channels(1, spatial), n);
  const double S = static_cast<double>(c.size);

  LabelMap labels(spatial);
  std::vector<double> intensity{0.0};
  const std::size_t blobs = c.min_blobs + static_cast<std::size_t>(u(rng) * double(c.max_blobs - c.min_blobs + 1));
  for (std::size_t b = 0; b < std::min(blobs, c.max_blobs); ++b) {
    double centre[3] = {0, 0, 0}, radius[3] = {1, 1, 1};
    for (std::size_t a = 3 - n; a < 3; ++a) {
      centre[a] = S * (0.25 + 0.5 * u(rng));
      radius[a] = S * (c.min_radius + (c.max_radius - c.min_radius) * u(rng));
    }
    intensity.push_back(0.3 + 0.7 * u(rng));
    const auto label = static_cast<std::uint16_t>(b + 1);
    for (std::size_t p = 0; p < e.size(); ++p) {
      const auto q = detail::unravel(p, e);
      double r = 0;
      for (std::size_t a = 3 - n; a < 3; ++a) {
        const double t = (static_cast<double>(q[a]) - centre[a]) / radius[a];
        r += t * t;
      }
      if (r <= 1) labels.labels[p] = label;
    }
  }
  std::vector<double> img(e.size());
  for (std::size_t p = 0; p < e.size(); ++p) img[p] = intensity[labels.labels[p]];
  img = detail::box_filter(std::move(img), e, n, 1);

  Tensor<double> g = identity_deformation<double>(spatial);
  const auto levels = detail::usable_levels(c);
  const std::size_t fields = c.min_fields + static_cast<std::size_t>(u(rng) * double(c.max_fields - c.min_fields + 1));
  for (std::size_t i = 0; i < std::min(fields, c.max_fields); ++i) {
    const std::size_t k = levels[static_cast<std::size_t>(u(rng) * double(levels.size())) % levels.size()];
    const double bound = c.amplitude * gamma_for_level(n, k);
    ControlGrid<double> grid{k, Tensor<double>(control_grid_shape(spatial, k))};
    for (auto& v : grid.values.storage()) v = bound * (2 * u(rng) - 1);
    g = compose(g, upsample_control_grid(grid));
  }

  SyntheticPair p;
  p.x_a = Tensor<double>(with_channels(1, spatial), img);
  p.x_b = warp_image(p.x_a, g);
  std::normal_distribution<double> noise(0.0, c.noise);
  if (c.noise > 0)
    for (auto& v : p.x_b.storage()) v += noise(rng);
  p.labels_a = std::move(labels);
  p.labels_b = warp_labels(p.labels_a, g);
  p.g_true = std::move(g);
  return p;
}

// ---------------------------------------------------------------------------
// Optimiser

struct AdamConfig {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(ModelWeights<T>& w, AdamConfig cfg = {}) : w_(&w), cfg_(cfg) {
    for (const auto& p : w.params) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1 - std::pow(cfg_.beta1, t_), c2 = 1 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < w_->params.size(); ++i) {
      auto& p = w_->params[i];
      if (p.grad.shape() != p.value.shape()) continue;
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = static_cast<double>(p.grad[j]);
        m_[i][j] = cfg_.beta1 * m_[i][j] + (1 - cfg_.beta1) * g;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1 - cfg_.beta2) * g * g;
        const double step = cfg_.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + cfg_.eps);
        p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) - step);
      }
    }
  }

  int steps() const { return t_; }

 private:
  ModelWeights<T>* w_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  double lambda = 1.0;
  double lr = 1e-3;
  std::size_t steps = 2000;
  std::size_t batch = 1;
  std::uint64_t seed = 0;
  EncoderConfig encoder;
  SynthConfig synth;
  PipelineConfig pipeline;
  std::size_t checkpoint_every = 0;  // 0: no intermediate checkpoints
  std::size_t log_every = 0;

  void validate() const {
    if (lambda < 0) throw ValidationError("train: lambda must be non-negative");
    if (!(lr > 0)) throw ValidationError("train: learning rate must be positive");
    if (batch == 0) throw ValidationError("train: batch must be positive");
    encoder.validate();
    if (encoder.dims != synth.dims) throw ValidationError("train: encoder and synthetic data dimensionality differ");
    if (synth.size % encoder.divisor() != 0)
      throw ValidationError("train: image size " + std::to_string(synth.size) + " not divisible by " +
                            std::to_string(encoder.divisor()));
    pipeline.inversion.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lambda", c.lambda},
       {"lr", c.lr},
       {"steps", c.steps},
       {"batch", c.batch},
       {"seed", c.seed},
       {"encoder", c.encoder},
       {"synth", c.synth},
       {"mode", mode_name(c.pipeline.mode)},
       {"inversion_tol", c.pipeline.inversion.tol},
       {"inversion_max_iter", c.pipeline.inversion.max_iter},
       {"checkpoint_every", c.checkpoint_every},
       {"log_every", c.log_every}};
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.lambda = j.value("lambda", d.lambda);
  c.lr = j.value("lr", d.lr);
  c.steps = j.value("steps", d.steps);
  c.batch = j.value("batch", d.batch);
  c.seed = j.value("seed", d.seed);
  c.encoder = j.contains("encoder") ? j.at("encoder").get<EncoderConfig>() : d.encoder;
  c.synth = j.contains("synth") ? j.at("synth").get<SynthConfig>() : d.synth;
  c.pipeline.mode = parse_mode(j.value("mode", std::string(mode_name(d.pipeline.mode))));
  c.pipeline.inversion.tol = j.value("inversion_tol", d.pipeline.inversion.tol);
  c.pipeline.inversion.max_iter = j.value("inversion_max_iter", d.pipeline.inversion.max_iter);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.log_every = j.value("log_every", d.log_every);
}

// Training pairs use seeds below this offset, validation pairs at and above it.
inline constexpr std::uint64_t kValidationSeedOffset = 1'000'000'007ULL;

inline std::uint64_t train_pair_seed(std::uint64_t seed, std::size_t index) {
  return seed * 7919ULL + index;
}
inline std::uint64_t validation_pair_seed(std::uint64_t seed, std::size_t index) {
  return kValidationSeedOffset + seed * 7919ULL + index;
}

template <typename T>
struct TrainResult {
  ModelWeights<T> weights;
  std::vector<double> loss_history;
  double seconds = 0;
};

template <typename T>
using CheckpointHook = std::function<void(std::size_t step, const ModelWeights<T>&)>;

/// Loss and weight gradients for one pair; gradients accumulate into w.
template <typename T>
double train_step_loss(ModelWeights<T>& w, const SyntheticPair& pair, const TrainConfig& cfg) {
  Tape<T> tape;
  auto b = bind(w, &tape);
  auto xa = Var<T>::constant(pair.x_a.template cast<T>());
  auto xb = Var<T>::constant(pair.x_b.template cast<T>());
  auto r = register_images(b, xa, xb, cfg.pipeline);
  auto loss = total_loss(xa, xb, r.f12, r.f21, cfg.lambda);
  const double value = static_cast<double>(loss.value()[0]);
  if (!std::isfinite(value)) throw NumericError("training diverged: non-finite loss");
  tape.backward(loss);
  return value;
}

template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const CheckpointHook<T>& hook = {},
                     std::function<void(const std::string&)> log = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult<T> out{init_weights<T>(cfg.encoder, cfg.seed), {}, 0};
  Adam<T> opt(out.weights, {cfg.lr});
  std::size_t pair_index = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    out.weights.zero_grad();
    double loss = 0;
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      const auto pair = synth_pair(train_pair_seed(cfg.seed, pair_index++), cfg.synth);
      try {
        loss += train_step_loss(out.weights, pair, cfg);
      } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(step) + ": " + e.what());
      }
    }
    if (cfg.batch > 1)
      for (auto& p : out.weights.params) p.grad *= static_cast<T>(1.0 / static_cast<double>(cfg.batch));
    opt.step();
    out.loss_history.push_back(loss / static_cast<double>(cfg.batch));
    if (log && cfg.log_every && (step + 1) % cfg.log_every == 0)
      log("step " + std::to_string(step + 1) + " loss " + std::to_string(out.loss_history.back()));
    if (hook && cfg.checkpoint_every && (step + 1) % cfg.checkpoint_every == 0) hook(step + 1, out.weights);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace hwreg
