#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <utility>
#include <vector>

#include "hwreg/autodiff.hpp"
#include "hwreg/conv.hpp"
#include "hwreg/error.hpp"
#include "hwreg/parallel.hpp"
#include "hwreg/tensor.hpp"

namespace hwreg {

/// Centred cardinal cubic B-spline, support (-2, 2).
inline double bspline_kernel(double x) {
  const double a = std::abs(x);
  if (a < 1) return 2.0 / 3.0 - a * a + 0.5 * a * a * a;
  if (a < 2) {
    const double t = 2 - a;
    return t * t * t / 6.0;
  }
  return 0.0;
}

inline double bspline_derivative(double x) {
  const double a = std::abs(x);
  const double sgn = x < 0 ? -1.0 : 1.0;
  if (a < 1) return sgn * (-2 * a + 1.5 * a * a);
  if (a < 2) return sgn * (-0.5 * (2 - a) * (2 - a));
  return 0.0;
}

inline std::size_t level_factor(std::size_t level) {
  if (level > 20) throw ValidationError("level " + std::to_string(level) + " too large");
  return std::size_t{1} << level;
}

/// Control points of a level-k spline displacement. `values` is
/// [n, G...] with G = S + 2: one control point per level-k voxel plus one
/// margin point on each side. Values are in level-k voxel units; the dense
/// field is 2^k times the spline series.
template <typename T>
struct ControlGrid {
  std::size_t level = 0;
  Tensor<T> values;

  std::size_t rank() const { return values.rank() - 1; }

  /// Spatial shape of the full-resolution field this grid describes.
  Shape image_shape() const {
    Shape s = spatial_shape(values.shape(), rank());
    for (auto& d : s) d = (d - 2) * level_factor(level);
    return s;
  }
};

/// Control grid shape for an image of the given spatial shape at level k.
inline Shape control_grid_shape(const Shape& image, std::size_t level) {
  const std::size_t f = level_factor(level);
  Shape s{image.size()};
  for (std::size_t d : image) {
    if (d % f != 0)
      throw DimensionError("image shape " + shape_string(image) + " not divisible by " + std::to_string(f));
    s.push_back(d / f + 2);
  }
  return s;
}

/// Transposed-convolution taps realising the spline series at stride s.
///
/// Fine voxel p sits at level-k coordinate u = (p - (s-1)/2) / s and control
/// index c at coordinate c - 1. With t = p - s*c + origin and origin = 3s the
/// weight of c at p is B((t - origin + (s+1)/2) / s). Zero taps at either end
/// are trimmed and the origin shifted to match.
template <typename T>
std::pair<std::vector<T>, std::ptrdiff_t> spline_taps(std::size_t s) {
  const auto is = static_cast<std::ptrdiff_t>(s);
  std::ptrdiff_t origin = 3 * is;
  std::vector<T> taps;
  for (std::ptrdiff_t t = 0; t < 6 * is; ++t) {
    const double v = bspline_kernel((static_cast<double>(t - 3 * is) + (static_cast<double>(s) + 1) / 2) /
                                    static_cast<double>(s));
    taps.push_back(static_cast<T>(v));
  }
  std::size_t lead = 0;
  while (lead < taps.size() && taps[lead] == T(0)) ++lead;
  std::size_t tail = taps.size();
  while (tail > lead && taps[tail - 1] == T(0)) --tail;
  return {std::vector<T>(taps.begin() + static_cast<std::ptrdiff_t>(lead), taps.begin() + static_cast<std::ptrdiff_t>(tail)),
          origin - static_cast<std::ptrdiff_t>(lead)};
}

/// Dense displacement field (full-resolution voxel units) of a level-k control
/// grid [n, G...]; target is the full-resolution spatial shape.
template <typename T>
Var<T> upsample_control_grid(const Var<T>& grid, std::size_t level, const Shape& target) {
  const std::size_t n = grid.shape().size() - 1;
  if (n < 2 || n > 3 || grid.dim(0) != n || target.size() != n)
    throw DimensionError("upsample_control_grid: grid " + shape_string(grid.shape()) + " vs target " +
                         shape_string(target));
  if (control_grid_shape(target, level) != grid.shape())
    throw DimensionError("upsample_control_grid: grid " + shape_string(grid.shape()) + " does not match target " +
                         shape_string(target) + " at level " + std::to_string(level));
  const std::size_t s = level_factor(level);
  const auto [taps, origin] = spline_taps<T>(s);
  Var<T> out = grid;
  for (std::size_t a = 0; a < n; ++a)
    out = transposed_conv_1d_axis(out, taps, a + 1, static_cast<int>(s), origin, target[a]);
  return s == 1 ? out : scale(out, static_cast<T>(s));
}

template <typename T>
Tensor<T> upsample_control_grid(const ControlGrid<T>& grid) {
  return upsample_control_grid(Var<T>::constant(grid.values), grid.level, grid.image_shape()).value();
}

/// Continuous evaluation of a control grid at full-resolution coordinates
/// (z, y, x; the leading entry is ignored in 2-D). Points outside the image
/// box are clamped to it, matching border-clamped sampling of the dense field.
/// `jac` (optional) receives d(displacement)/d(position), zero along clamped
/// axes.
template <typename T>
std::array<double, 3> spline_eval(const ControlGrid<T>& grid, const std::array<double, 3>& x,
                                  double (*jac)[3] = nullptr) {
  const std::size_t n = grid.rank();
  const std::size_t s = level_factor(grid.level);
  const Extent3 ge = spatial_extent(grid.values.shape(), n);
  double u[3] = {0, 0, 0};
  bool active[3] = {false, false, false};
  for (std::size_t a = 0; a < n; ++a) {
    const int ax = static_cast<int>(3 - n + a);
    const double hi = static_cast<double>((ge[ax] - 2) * s - 1);
    const double xc = std::clamp(x[ax], 0.0, hi);
    active[ax] = x[ax] > 0 && x[ax] < hi;
    u[ax] = (xc - (static_cast<double>(s) - 1) / 2) / static_cast<double>(s);
  }
  // Per-axis weights of the (at most) five control indices around u.
  std::size_t lo[3] = {0, 0, 0};
  double w[3][5] = {}, dw[3][5] = {};
  std::size_t cnt[3] = {1, 1, 1};
  w[0][0] = w[1][0] = w[2][0] = 1;
  for (std::size_t a = 0; a < n; ++a) {
    const int ax = static_cast<int>(3 - n + a);
    const auto base = static_cast<std::ptrdiff_t>(std::floor(u[ax]));
    const std::ptrdiff_t first = std::max<std::ptrdiff_t>(base, 0);
    const std::ptrdiff_t last = std::min<std::ptrdiff_t>(base + 4, static_cast<std::ptrdiff_t>(ge[ax]) - 1);
    lo[ax] = static_cast<std::size_t>(first);
    cnt[ax] = static_cast<std::size_t>(last - first + 1);
    for (std::ptrdiff_t c = first; c <= last; ++c) {
      const double arg = u[ax] - static_cast<double>(c - 1);
      w[ax][c - first] = bspline_kernel(arg);
      dw[ax][c - first] = active[ax] ? bspline_derivative(arg) / static_cast<double>(s) : 0.0;
    }
  }
  std::array<double, 3> out{0, 0, 0};
  double J[3][3] = {};
  const T* v = grid.values.data();
  for (std::size_t i = 0; i < cnt[0]; ++i)
    for (std::size_t j = 0; j < cnt[1]; ++j)
      for (std::size_t k = 0; k < cnt[2]; ++k) {
        const std::size_t idx = ((lo[0] + i) * ge.h + lo[1] + j) * ge.w + lo[2] + k;
        const double b = w[0][i] * w[1][j] * w[2][k];
        const double g[3] = {dw[0][i] * w[1][j] * w[2][k], w[0][i] * dw[1][j] * w[2][k], w[0][i] * w[1][j] * dw[2][k]};
        for (std::size_t c = 0; c < n; ++c) {
          const double phi = static_cast<double>(v[c * ge.size() + idx]);
          out[3 - n + c] += b * phi;
          if (jac)
            for (int ax = 0; ax < 3; ++ax) J[3 - n + c][ax] += g[ax] * phi;
        }
      }
  for (auto& o : out) o *= static_cast<double>(s);
  if (jac)
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) jac[r][c] = J[r][c] * static_cast<double>(s);
  return out;
}

/// Result of the bound maximisation: K and a maximising point of X^n.
struct BoundResult {
  double K = 0;
  std::array<double, 3> argmax{0, 0, 0};
};

/// Relative sampling positions of level-k upsampling inside one unit cell:
/// {1/2 + h/2 + i*h} intersected with [0, 1], h = 2^-k.
inline std::vector<double> sampling_positions(std::size_t k) {
  const double h = std::ldexp(1.0, -static_cast<int>(k));
  std::vector<double> xs;
  const auto lo = static_cast<long long>(std::ceil((-0.5 - h / 2) / h));
  const auto hi = static_cast<long long>(std::floor((0.5 - h / 2) / h));
  for (long long i = lo; i <= hi; ++i) xs.push_back(0.5 + h / 2 + static_cast<double>(i) * h);
  return xs;
}

namespace detail {

inline constexpr int kAlphaLo = -1;
inline constexpr int kAlphaCount = 5;

struct AxisTables {
  // B(x - alpha) and (B(x + h - alpha) - B(x - alpha)) / h per sample and alpha.
  std::vector<std::array<double, kAlphaCount>> b, fd;
};

inline AxisTables axis_tables(const std::vector<double>& xs, double h) {
  AxisTables t;
  for (double x : xs) {
    std::array<double, kAlphaCount> b{}, fd{};
    for (int a = 0; a < kAlphaCount; ++a) {
      const double alpha = kAlphaLo + a;
      b[a] = bspline_kernel(x - alpha);
      fd[a] = (bspline_kernel(x + h - alpha) - bspline_kernel(x - alpha)) / h;
    }
    t.b.push_back(b);
    t.fd.push_back(fd);
  }
  return t;
}

}  // namespace detail

/// Maximum over x in X^n of sum_alpha |sum_j D_j(x, alpha)| where
/// D_j = (B(x_j + h - a_j) - B(x_j - a_j)) / h * prod_{i != j} B(x_i - a_i).
/// The objective is symmetric under permuting axes, so only sorted tuples
/// are visited.
inline BoundResult compute_K_detail(std::size_t n, std::size_t k) {
  if (n < 1 || n > 3) throw ValidationError("compute_K: n must be 1, 2 or 3, got " + std::to_string(n));
  if (k > 16) throw ValidationError("compute_K: k too large");
  const double h = std::ldexp(1.0, -static_cast<int>(k));
  const auto xs = sampling_positions(k);
  const auto t = detail::axis_tables(xs, h);
  const std::size_t m = xs.size();
  constexpr int A = detail::kAlphaCount;
  BoundResult best;
  best.K = -1;
  if (n == 1) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0;
      for (int a = 0; a < A; ++a) s += std::abs(t.fd[i][a]);
      if (s > best.K) best = {s, {0, 0, xs[i]}};
    }
    return best;
  }
  if (n == 2) {
    std::vector<BoundResult> rows(m);
    parallel_for(static_cast<std::ptrdiff_t>(m), [&](std::ptrdiff_t ii) {
      const auto i = static_cast<std::size_t>(ii);
      BoundResult r;
      r.K = -1;
      for (std::size_t j = i; j < m; ++j) {
        double s = 0;
        for (int a = 0; a < A; ++a)
          for (int b = 0; b < A; ++b) s += std::abs(t.fd[i][a] * t.b[j][b] + t.b[i][a] * t.fd[j][b]);
        if (s > r.K) r = {s, {0, xs[i], xs[j]}};
      }
      rows[i] = r;
    });
    for (const auto& r : rows)
      if (r.K > best.K) best = r;
    return best;
  }
  std::vector<BoundResult> rows(m);
  parallel_for(static_cast<std::ptrdiff_t>(m), [&](std::ptrdiff_t ii) {
    const auto i = static_cast<std::size_t>(ii);
    BoundResult r;
    r.K = -1;
    for (std::size_t j = i; j < m; ++j) {
      // Products over the first two axes, shared by every third coordinate.
      double bb[A][A], fb[A][A];
      for (int a = 0; a < A; ++a)
        for (int b = 0; b < A; ++b) {
          bb[a][b] = t.b[i][a] * t.b[j][b];
          fb[a][b] = t.fd[i][a] * t.b[j][b] + t.b[i][a] * t.fd[j][b];
        }
      for (std::size_t l = j; l < m; ++l) {
        double s = 0;
        for (int a = 0; a < A; ++a)
          for (int b = 0; b < A; ++b)
            for (int c = 0; c < A; ++c) s += std::abs(fb[a][b] * t.b[l][c] + bb[a][b] * t.fd[l][c]);
        if (s > r.K) r = {s, {xs[i], xs[j], xs[l]}};
      }
    }
    rows[i] = r;
  });
  for (const auto& r : rows)
    if (r.K > best.K) best = r;
  return best;
}

inline double compute_K(std::size_t n, std::size_t k) { return compute_K_detail(n, k).K; }

/// Cached K values; safe to share between threads.
class BoundTable {
 public:
  double K(std::size_t n, std::size_t k) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find({n, k});
    if (it != cache_.end()) return it->second;
    const double v = compute_K(n, k);
    cache_.emplace(std::pair{n, k}, v);
    return v;
  }

  double gamma(std::size_t n, std::size_t k) { return 0.99 / K(n, k); }

  static BoundTable& global() {
    static BoundTable table;
    return table;
  }

 private:
  std::mutex mu_;
  std::map<std::pair<std::size_t, std::size_t>, double> cache_;
};

/// Largest admissible control value at level k: 0.99 / K_n^(k).
inline double gamma_for_level(std::size_t n, std::size_t k) { return BoundTable::global().gamma(n, k); }

/// Brute-force estimate of the largest row sum of the displacement Jacobian
/// (the infinity operator norm) over a lattice with samples_per_cell points
/// per level-k cell along each axis, using analytic spline derivatives.
template <typename T>
double lipschitz_oracle(const ControlGrid<T>& grid, std::size_t samples_per_cell) {
  if (samples_per_cell < 4) throw ValidationError("lipschitz_oracle: samples_per_cell must be >= 4");
  const std::size_t n = grid.rank();
  const Shape img = grid.image_shape();
  const std::size_t s = level_factor(grid.level);
  std::size_t counts[3] = {1, 1, 1};
  double start[3] = {0, 0, 0}, step[3] = {1, 1, 1};
  for (std::size_t a = 0; a < n; ++a) {
    const int ax = static_cast<int>(3 - n + a);
    // Interior samples of the image box, evenly spaced in level-k units.
    const double len = static_cast<double>(img[a] - 1);
    step[ax] = static_cast<double>(s) / static_cast<double>(samples_per_cell);
    counts[ax] = static_cast<std::size_t>(std::floor(len / step[ax]));
    start[ax] = (len - static_cast<double>(counts[ax] - 1) * step[ax]) / 2;
  }
  const std::size_t total = counts[0] * counts[1] * counts[2];
  std::vector<double> worst(total, 0.0);
  parallel_for(static_cast<std::ptrdiff_t>(total), [&](std::ptrdiff_t pi) {
    const auto p = static_cast<std::size_t>(pi);
    const std::size_t q[3] = {p / (counts[1] * counts[2]), (p / counts[2]) % counts[1], p % counts[2]};
    std::array<double, 3> x{};
    for (int ax = 0; ax < 3; ++ax) x[ax] = start[ax] + static_cast<double>(q[ax]) * step[ax];
    double J[3][3];
    spline_eval(grid, x, J);
    double m = 0;
    for (std::size_t r = 3 - n; r < 3; ++r) {
      double row = 0;
      for (std::size_t c = 3 - n; c < 3; ++c) row += std::abs(J[r][c]);
      m = std::max(m, row);
    }
    worst[p] = m;
  });
  return *std::max_element(worst.begin(), worst.end());
}

/// Control grid realising the bound with equality: every channel carries
/// -sign(sum_j D_j(x*, alpha)) / K at the offsets alpha around one level-k
/// cell, so at the maximising sample x* the dense field's Jacobian is
/// -(1/K) 1 g^T with 1^T g = K and det(I + J) = 0.
struct TightnessWitness {
  ControlGrid<double> grid;
  std::array<double, 3> point{};  // full-resolution voxel where the det vanishes
  double K = 0;
};

inline TightnessWitness tightness_witness(std::size_t n, std::size_t k, double scale = 1.0) {
  if (n < 2 || n > 3) throw ValidationError("tightness_witness: n must be 2 or 3");
  const auto bound = compute_K_detail(n, k);
  const double h = std::ldexp(1.0, -static_cast<int>(k));
  const std::size_t s = level_factor(k);
  constexpr std::size_t coarse = 6;
  constexpr std::size_t cell = 2;
  Shape gshape{n};
  for (std::size_t a = 0; a < n; ++a) gshape.push_back(coarse + 2);
  TightnessWitness w;
  w.K = bound.K;
  w.grid.level = k;
  w.grid.values = Tensor<double>(gshape);
  const Extent3 ge = spatial_extent(gshape, n);
  constexpr int A = detail::kAlphaCount;
  const int total = n == 2 ? A * A : A * A * A;
  for (int flat = 0; flat < total; ++flat) {
    int alpha[3] = {0, 0, 0};
    int rest = flat;
    for (std::size_t a = 0; a < n; ++a) {
      alpha[3 - n + a] = detail::kAlphaLo + rest % A;
      rest /= A;
    }
    double sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const int axj = static_cast<int>(3 - n + j);
      double term = 1;
      for (std::size_t i = 0; i < n; ++i) {
        const int ax = static_cast<int>(3 - n + i);
        const double x = bound.argmax[ax];
        term *= ax == axj ? (bspline_kernel(x + h - alpha[ax]) - bspline_kernel(x - alpha[ax])) / h
                          : bspline_kernel(x - alpha[ax]);
      }
      sum += term;
    }
    const double value = sum > 0 ? -scale / bound.K : sum < 0 ? scale / bound.K : 0.0;
    // Control index of level-k coordinate cell + alpha is cell + alpha + 1.
    std::size_t idx[3] = {0, 0, 0};
    for (std::size_t a = 0; a < n; ++a) {
      const int ax = static_cast<int>(3 - n + a);
      idx[ax] = static_cast<std::size_t>(static_cast<int>(cell) + alpha[ax] + 1);
    }
    for (std::size_t c = 0; c < n; ++c) w.grid.values[c * ge.size() + (idx[0] * ge.h + idx[1]) * ge.w + idx[2]] = value;
  }
  for (std::size_t a = 0; a < n; ++a) {
    const int ax = static_cast<int>(3 - n + a);
    w.point[ax] = static_cast<double>(s) * (static_cast<double>(cell) + bound.argmax[ax]) +
                  (static_cast<double>(s) - 1) / 2;
  }
  return w;
}

}  // namespace hwreg
