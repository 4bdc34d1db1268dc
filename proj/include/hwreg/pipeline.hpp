#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hwreg/field.hpp"
#include "hwreg/inversion.hpp"
#include "hwreg/networks.hpp"
#include "hwreg/spline.hpp"

namespace hwreg {

enum class Mode { sym, non_sym };

inline Mode parse_mode(const std::string& s) {
  if (s == "sym") return Mode::sym;
  if (s == "non-sym" || s == "non_sym") return Mode::non_sym;
  throw ValidationError("unknown mode '" + s + "' (expected sym or non-sym)");
}

inline const char* mode_name(Mode m) { return m == Mode::sym ? "sym" : "non-sym"; }

/// Half-way deformations after the update at `level`, with their inverses.
/// All four fields are full-resolution displacements.
template <typename T>
struct LevelState {
  std::size_t level = 0;
  Var<T> d1, d2, d1_inv, d2_inv;

  static LevelState identity(std::size_t level, const Shape& spatial) {
    auto z = Var<T>::constant(identity_deformation<T>(spatial));
    return {level, z, z, z, z};
  }
};

/// Control grids predicted at one level: u(z1, z2) and u(z2, z1).
struct LevelRecord {
  ControlGrid<double> forward, backward;
};

template <typename T>
struct RegistrationResult {
  Mode mode = Mode::sym;
  Var<T> f12, f21;
  LevelState<T> halfway;
  std::vector<LevelRecord> stack;  // coarsest first
  std::vector<InversionStats> inversions;
};

template <typename T>
struct LevelOutput {
  LevelState<T> state;
  LevelRecord record;
};

namespace detail {

template <typename T>
ControlGrid<double> detach_grid(const Var<T>& g, std::size_t level) {
  return {level, g.value().template cast<double>()};
}

}  // namespace detail

/// One coarse-to-fine step: warp the level-k features by the current half-way
/// deformations, predict both update grids, build the update and fold it into
/// the state.
template <typename T>
LevelOutput<T> level_update(const BoundWeights<T>& b, std::size_t k, const LevelState<T>& state,
                            const Var<T>& features_a, const Var<T>& features_b, Mode mode,
                            const FixedPointConfig& cfg = {}, std::vector<InversionStats>* stats = nullptr) {
  const Shape full = spatial_shape(state.d1.shape(), field_rank(state.d1.shape()));
  const std::size_t f = level_factor(k);
  auto z1 = warp(features_a, downsample_field(state.d1, f));
  auto z2 = warp(features_b, downsample_field(state.d2, f));
  auto g12 = predict_control_grid(b, k, z1, z2);
  auto g21 = predict_control_grid(b, k, z2, z1);
  auto u12 = upsample_control_grid(g12, k, full);
  auto u21 = upsample_control_grid(g21, k, full);

  Var<T> delta, delta_inv;
  if (mode == Mode::sym) {
    InversionStats s12, s21;
    auto inv21 = invert(u21, cfg, &s21);
    auto inv12 = invert(u12, cfg, &s12);
    delta = compose(u12, inv21);
    delta_inv = compose(u21, inv12);
    if (stats) {
      stats->push_back(s21);
      stats->push_back(s12);
    }
  } else {
    delta = compose(u12, u12);
    delta_inv = compose(u21, u21);
  }
  LevelState<T> next{k, compose(state.d1, delta), compose(state.d2, delta_inv), compose(delta_inv, state.d1_inv),
                     compose(delta, state.d2_inv)};
  return {std::move(next), {detail::detach_grid(g12, k), detail::detach_grid(g21, k)}};
}

struct PipelineConfig {
  Mode mode = Mode::sym;
  FixedPointConfig inversion;
};

/// Registers x_a [C, spatial...] to x_b, both directions at once.
template <typename T>
RegistrationResult<T> register_images(const BoundWeights<T>& b, const Var<T>& x_a, const Var<T>& x_b,
                                      const PipelineConfig& cfg = {}) {
  if (x_a.shape() != x_b.shape())
    throw DimensionError("register: image shapes differ: " + shape_string(x_a.shape()) + " vs " +
                         shape_string(x_b.shape()));
  const std::size_t n = b.config().dims;
  const auto fa = extract_features(b, x_a);
  const auto fb = extract_features(b, x_b);
  const std::size_t K = b.config().num_levels;
  RegistrationResult<T> r;
  r.mode = cfg.mode;
  auto state = LevelState<T>::identity(K, spatial_shape(x_a.shape(), n));
  for (std::size_t k = K; k-- > 0;) {
    auto out = level_update(b, k, state, fa[k], fb[k], cfg.mode, cfg.inversion, &r.inversions);
    state = std::move(out.state);
    r.stack.push_back(std::move(out.record));
  }
  r.f12 = compose(state.d1, state.d2_inv);
  r.f21 = compose(state.d2, state.d1_inv);
  r.halfway = std::move(state);
  return r;
}

/// The dense fields produced during the recursion (resampled at every level).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> infer_standard(const RegistrationResult<T>& r) {
  return {r.f12.value(), r.f21.value()};
}

// ---------------------------------------------------------------------------
// Complete variant: the chained composition evaluated point by point from the
// stored control grids, with exact spline evaluation and pointwise inverses.

using Point = std::array<double, 3>;

namespace detail {

inline Point apply_spline(const ControlGrid<double>& g, const Point& x) {
  const Point u = spline_eval(g, x);
  return {x[0] + u[0], x[1] + u[1], x[2] + u[2]};
}

// Solves y = x + u(x) for x. The spline map is a contraction in x, so plain
// iteration converges geometrically.
inline Point invert_spline_at(const ControlGrid<double>& g, const Point& y, double tol = 1e-13, int max_iter = 500) {
  Point x = y;
  double step = 0;
  for (int it = 0; it < max_iter; ++it) {
    const Point u = spline_eval(g, x);
    Point nx{y[0] - u[0], y[1] - u[1], y[2] - u[2]};
    step = 0;
    for (int a = 0; a < 3; ++a) step = std::max(step, std::abs(nx[a] - x[a]));
    x = nx;
    if (step <= tol) return x;
  }
  throw ConvergenceError("pointwise spline inverse", step, max_iter, {x[0], x[1], x[2]});
}

// Point map of the level-k update (direction 1) or its partner (direction 2).
inline Point apply_update(const LevelRecord& rec, Mode mode, bool forward, const Point& x) {
  const ControlGrid<double>& a = forward ? rec.forward : rec.backward;
  const ControlGrid<double>& c = forward ? rec.backward : rec.forward;
  if (mode == Mode::sym) return apply_spline(a, invert_spline_at(c, x));
  return apply_spline(a, apply_spline(a, x));
}

}  // namespace detail

/// Displacements of f_{1->2} (forward = true) or f_{2->1} at continuous
/// full-resolution points (z, y, x; z ignored in 2-D).
///
/// f_{1->2} = d1 ∘ d2^-1 with d1 = delta^(K-1) ∘ ... ∘ delta^(0) and
/// d2^-1 = delta^(0) ∘ ... ∘ delta^(K-1); the reverse direction swaps the roles
/// of delta and its partner.
template <typename T>
std::vector<Point> infer_complete(const RegistrationResult<T>& r, const std::vector<Point>& points, bool forward = true) {
  std::vector<Point> out(points.size());
  const auto& st = r.stack;
  parallel_for(static_cast<std::ptrdiff_t>(points.size()), [&](std::ptrdiff_t i) {
    Point y = points[static_cast<std::size_t>(i)];
    // rightmost factor first: delta^(K-1) (stack front) ... delta^(0), then
    // delta^(0) ... delta^(K-1) of the same direction
    for (auto it = st.begin(); it != st.end(); ++it) y = detail::apply_update(*it, r.mode, forward, y);
    for (auto it = st.rbegin(); it != st.rend(); ++it) y = detail::apply_update(*it, r.mode, forward, y);
    const Point& p = points[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = {y[0] - p[0], y[1] - p[1], y[2] - p[2]};
  });
  return out;
}

template <typename T>
PointMap complete_point_map(const RegistrationResult<T>& r, bool forward = true) {
  return [&r, forward](const Point& x) {
    const Point d = infer_complete(r, {x}, forward)[0];
    return Point{x[0] + d[0], x[1] + d[1], x[2] + d[2]};
  };
}

/// Mean squared displacement (voxels^2) of f12 ∘ f21 for one registration
/// (inverse consistency) and of f(a, b) ∘ f(b, a) across two (cycle).
struct ConsistencyErrors {
  double inverse_err = 0;
  double cycle_err = 0;
};

namespace detail {

template <typename T>
double mean_squared_norm(const Tensor<T>& d) {
  const std::size_t n = field_rank(d.shape());
  const std::size_t m = d.size() / n;
  double s = 0;
  for (std::size_t i = 0; i < d.size(); ++i) s += static_cast<double>(d[i]) * static_cast<double>(d[i]);
  return s / static_cast<double>(m);
}

}  // namespace detail

template <typename T>
ConsistencyErrors consistency_errors(const BoundWeights<T>& b, const Tensor<T>& x_a, const Tensor<T>& x_b,
                                     const PipelineConfig& cfg = {}) {
  const auto ab = register_images(b, Var<T>::constant(x_a), Var<T>::constant(x_b), cfg);
  const auto ba = register_images(b, Var<T>::constant(x_b), Var<T>::constant(x_a), cfg);
  return {detail::mean_squared_norm(compose(ab.f12.value(), ab.f21.value())),
          detail::mean_squared_norm(compose(ab.f12.value(), ba.f12.value()))};
}

}  // namespace hwreg
