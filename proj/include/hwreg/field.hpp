#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "hwreg/autodiff.hpp"
#include "hwreg/conv.hpp"
#include "hwreg/parallel.hpp"
#include "hwreg/tensor.hpp"

namespace hwreg {

/// Integer segmentation over a spatial shape (no channel axis).
struct LabelMap {
  Shape shape;
  std::vector<std::uint16_t> labels;

  LabelMap() = default;
  explicit LabelMap(Shape s, std::uint16_t fill = 0) : shape(std::move(s)), labels(shape_size(shape), fill) {}
  LabelMap(Shape s, std::vector<std::uint16_t> v) : shape(std::move(s)), labels(std::move(v)) {
    if (labels.size() != shape_size(shape))
      throw DimensionError("label data length does not match shape " + shape_string(shape));
  }

  std::size_t size() const noexcept { return labels.size(); }
  bool operator==(const LabelMap&) const = default;
};

/// Number of spatial axes of a displacement field [n, spatial...]; throws
/// unless the channel count matches the spatial rank.
inline std::size_t field_rank(const Shape& s) {
  if (s.size() < 3 || s.size() > 4 || s[0] != s.size() - 1)
    throw DimensionError("expected a displacement field [n, spatial...] with n in {2,3}, got " + shape_string(s));
  return s.size() - 1;
}

template <typename T>
Tensor<T> identity_deformation(const Shape& spatial) {
  if (spatial.size() < 2 || spatial.size() > 3)
    throw DimensionError("identity_deformation: expected 2 or 3 spatial dims, got " + shape_string(spatial));
  return Tensor<T>(with_channels(spatial.size(), spatial));
}

namespace detail {

// Linear interpolation weights along one axis with border clamping.
// Outside [0, len-1] the coordinate is clamped and the derivative vanishes.
template <typename T>
struct Lerp1 {
  std::size_t i0 = 0, i1 = 0;
  T t = 0;
  T dt = 0;
};

template <typename T>
inline Lerp1<T> lerp1(T x, std::size_t len) {
  Lerp1<T> r;
  if (len == 1) return r;
  const T hi = static_cast<T>(len - 1);
  if (!(x > 0)) {
    r.i1 = 1;
    return r;
  }
  if (!(x < hi)) {
    r.i0 = len - 2;
    r.i1 = len - 1;
    r.t = 1;
    return r;
  }
  r.i0 = std::min(static_cast<std::size_t>(x), len - 2);
  r.i1 = r.i0 + 1;
  r.t = x - static_cast<T>(r.i0);
  r.dt = 1;
  return r;
}

// Eight trilinear corners of one sample point with weights and the partial
// derivatives of the weights w.r.t. each coordinate (z, y, x).
template <typename T>
struct Corners {
  std::array<std::size_t, 8> idx{};
  std::array<T, 8> w{};
  std::array<std::array<T, 8>, 3> dw{};

  Corners(const Extent3& e, T z, T y, T x) {
    const Lerp1<T> lz = lerp1(z, e.d), ly = lerp1(y, e.h), lx = lerp1(x, e.w);
    for (int c = 0; c < 8; ++c) {
      const bool bz = c & 4, by = c & 2, bx = c & 1;
      const T wz = bz ? lz.t : 1 - lz.t, wy = by ? ly.t : 1 - ly.t, wx = bx ? lx.t : 1 - lx.t;
      const T sz = bz ? lz.dt : -lz.dt, sy = by ? ly.dt : -ly.dt, sx = bx ? lx.dt : -lx.dt;
      idx[c] = ((bz ? lz.i1 : lz.i0) * e.h + (by ? ly.i1 : ly.i0)) * e.w + (bx ? lx.i1 : lx.i0);
      w[c] = wz * wy * wx;
      dw[0][c] = sz * wy * wx;
      dw[1][c] = wz * sy * wx;
      dw[2][c] = wz * wy * sx;
    }
  }

  T value(const T* src) const {
    T v = 0;
    for (int c = 0; c < 8; ++c) v += w[c] * src[idx[c]];
    return v;
  }

  T derivative(const T* src, int axis) const {
    T v = 0;
    for (int c = 0; c < 8; ++c) v += dw[axis][c] * src[idx[c]];
    return v;
  }
};

inline std::array<std::size_t, 3> unravel(std::size_t i, const Extent3& e) {
  return {i / (e.h * e.w), (i / e.w) % e.h, i % e.w};
}

// Samples `src` ([C, spatial], extent e) at p + disp(p) for every voxel p of
// the displacement grid (extent de, n channels). Both grids may differ.
template <typename T>
void warp_forward(const T* src, std::size_t channels, const Extent3& e, const T* disp, std::size_t n,
                  const Extent3& de, T* out) {
  const std::size_t m = de.size();
  parallel_for(static_cast<std::ptrdiff_t>(m), [&](std::ptrdiff_t pi) {
    const std::size_t p = static_cast<std::size_t>(pi);
    const auto q = unravel(p, de);
    T pos[3] = {static_cast<T>(q[0]), static_cast<T>(q[1]), static_cast<T>(q[2])};
    for (std::size_t a = 0; a < n; ++a) pos[3 - n + a] += disp[a * m + p];
    const Corners<T> c(e, pos[0], pos[1], pos[2]);
    for (std::size_t ch = 0; ch < channels; ++ch) out[ch * m + p] = c.value(src + ch * e.size());
  });
}

}  // namespace detail

/// Samples a volume [C, spatial...] at the displaced positions x + d(x) with
/// multi-linear interpolation and border clamping. Differentiable w.r.t. both
/// the volume and the displacement.
template <typename T>
Var<T> warp(const Var<T>& src, const Var<T>& disp) {
  const std::size_t n = field_rank(disp.shape());
  if (src.shape().size() != n + 1)
    throw DimensionError("warp: volume " + shape_string(src.shape()) + " vs field " + shape_string(disp.shape()));
  const Extent3 e = spatial_extent(src.shape(), n);
  const Extent3 de = spatial_extent(disp.shape(), n);
  if (!(e == de))
    throw DimensionError("warp: volume " + shape_string(src.shape()) + " vs field " + shape_string(disp.shape()));
  const std::size_t channels = src.dim(0);
  Tensor<T> out(with_channels(channels, spatial_shape(disp.shape(), n)));
  detail::warp_forward(src.value().data(), channels, e, disp.value().data(), n, de, out.data());
  return make_result<T>(std::move(out), {src, disp}, "warp", [=](Node<T>& self) {
    const T* sv = self.parent_value(0).data();
    const T* dv = self.parent_value(1).data();
    const T* g = self.grad.data();
    const std::size_t m = de.size();
    auto corners = [&](std::size_t p) {
      const auto q = detail::unravel(p, de);
      T pos[3] = {static_cast<T>(q[0]), static_cast<T>(q[1]), static_cast<T>(q[2])};
      for (std::size_t a = 0; a < n; ++a) pos[3 - n + a] += dv[a * m + p];
      return detail::Corners<T>(e, pos[0], pos[1], pos[2]);
    };
    if (self.parent_needs_grad(1)) {
      T* gd = self.parents[1]->grad_buffer().data();
      parallel_for(static_cast<std::ptrdiff_t>(m), [&](std::ptrdiff_t pi) {
        const std::size_t p = static_cast<std::size_t>(pi);
        const auto c = corners(p);
        for (std::size_t a = 0; a < n; ++a) {
          T acc = 0;
          for (std::size_t ch = 0; ch < channels; ++ch)
            acc += g[ch * m + p] * c.derivative(sv + ch * e.size(), static_cast<int>(3 - n + a));
          gd[a * m + p] += acc;
        }
      });
    }
    if (self.parent_needs_grad(0)) {
      T* gs = self.parents[0]->grad_buffer().data();
      parallel_for(static_cast<std::ptrdiff_t>(channels), [&](std::ptrdiff_t ch) {
        T* dst = gs + ch * e.size();
        for (std::size_t p = 0; p < m; ++p) {
          const auto c = corners(p);
          const T gp = g[ch * m + p];
          for (int k = 0; k < 8; ++k) dst[c.idx[k]] += c.w[k] * gp;
        }
      });
    }
  });
}

template <typename T>
Var<T> warp_image(const Var<T>& vol, const Var<T>& disp) {
  return warp(vol, disp);
}

template <typename T>
Tensor<T> warp_image(const Tensor<T>& vol, const Tensor<T>& disp) {
  return warp(Var<T>::constant(vol), Var<T>::constant(disp)).value();
}

/// (d1 o d2)(x) = d1(d2(x)): displacement d2(x) + d1(x + d2(x)).
template <typename T>
Var<T> compose(const Var<T>& d1, const Var<T>& d2) {
  d1.value().require_same_shape(d2.value(), "compose");
  return add(d2, warp(d1, d2));
}

template <typename T>
Tensor<T> compose(const Tensor<T>& d1, const Tensor<T>& d2) {
  return compose(Var<T>::constant(d1), Var<T>::constant(d2)).value();
}

/// Multi-linear samples of vol [C, spatial...] at coords [P, n] (voxel
/// coordinates, axis order matching the spatial axes). Returns [C, P].
template <typename T>
Var<T> sample_linear(const Var<T>& vol, const Var<T>& coords) {
  const std::size_t n = vol.shape().size() - 1;
  if (n < 2 || n > 3) throw DimensionError("sample_linear: expected [C, spatial...], got " + shape_string(vol.shape()));
  if (coords.shape().size() != 2 || coords.dim(1) != n)
    throw DimensionError("sample_linear: coords must be [P, " + std::to_string(n) + "], got " +
                         shape_string(coords.shape()));
  const Extent3 e = spatial_extent(vol.shape(), n);
  const std::size_t channels = vol.dim(0), np = coords.dim(0);
  auto corners_at = [=](const T* cv, std::size_t p) {
    T pos[3] = {0, 0, 0};
    for (std::size_t a = 0; a < n; ++a) pos[3 - n + a] = cv[p * n + a];
    return detail::Corners<T>(e, pos[0], pos[1], pos[2]);
  };
  Tensor<T> out({channels, np});
  const T* sv = vol.value().data();
  const T* cv = coords.value().data();
  parallel_for(static_cast<std::ptrdiff_t>(np), [&](std::ptrdiff_t pi) {
    const auto c = corners_at(cv, static_cast<std::size_t>(pi));
    for (std::size_t ch = 0; ch < channels; ++ch) out[ch * np + pi] = c.value(sv + ch * e.size());
  });
  return make_result<T>(std::move(out), {vol, coords}, "sample_linear", [=](Node<T>& self) {
    const T* s = self.parent_value(0).data();
    const T* co = self.parent_value(1).data();
    const T* g = self.grad.data();
    if (self.parent_needs_grad(1)) {
      T* gc = self.parents[1]->grad_buffer().data();
      parallel_for(static_cast<std::ptrdiff_t>(np), [&](std::ptrdiff_t pi) {
        const auto c = corners_at(co, static_cast<std::size_t>(pi));
        for (std::size_t a = 0; a < n; ++a) {
          T acc = 0;
          for (std::size_t ch = 0; ch < channels; ++ch)
            acc += g[ch * np + pi] * c.derivative(s + ch * e.size(), static_cast<int>(3 - n + a));
          gc[pi * n + a] += acc;
        }
      });
    }
    if (self.parent_needs_grad(0)) {
      T* gs = self.parents[0]->grad_buffer().data();
      parallel_for(static_cast<std::ptrdiff_t>(channels), [&](std::ptrdiff_t ch) {
        for (std::size_t p = 0; p < np; ++p) {
          const auto c = corners_at(co, p);
          for (int k = 0; k < 8; ++k) gs[ch * e.size() + c.idx[k]] += c.w[k] * g[ch * np + p];
        }
      });
    }
  });
}

/// Nearest-neighbour label lookup at x + d(x), border clamped.
template <typename T>
LabelMap warp_labels(const LabelMap& labels, const Tensor<T>& disp) {
  const std::size_t n = field_rank(disp.shape());
  if (spatial_shape(disp.shape(), n) != labels.shape)
    throw DimensionError("warp_labels: labels " + shape_string(labels.shape) + " vs field " +
                         shape_string(disp.shape()));
  const Extent3 e = spatial_extent(labels.shape, n);
  const std::size_t m = e.size();
  LabelMap out(labels.shape);
  parallel_for(static_cast<std::ptrdiff_t>(m), [&](std::ptrdiff_t pi) {
    const std::size_t p = static_cast<std::size_t>(pi);
    const auto q = detail::unravel(p, e);
    std::size_t idx[3] = {q[0], q[1], q[2]};
    for (std::size_t a = 0; a < n; ++a) {
      const int ax = static_cast<int>(3 - n + a);
      const double pos = static_cast<double>(q[ax]) + static_cast<double>(disp[a * m + p]);
      const double r = std::clamp(std::round(pos), 0.0, static_cast<double>(e[ax] - 1));
      idx[ax] = static_cast<std::size_t>(r);
    }
    out.labels[p] = labels.labels[(idx[0] * e.h + idx[1]) * e.w + idx[2]];
  });
  return out;
}

struct JacobianStats {
  double folding_fraction = 0;
  double det_std = 0;
  double det_min = 0;
  double det_mean = 0;
  std::size_t samples = 0;
};

/// Point map x -> phi(x) in continuous voxel coordinates (z, y, x order; the
/// leading entry is unused in 2-D).
using PointMap = std::function<std::array<double, 3>(const std::array<double, 3>&)>;

/// Forward-difference Jacobian determinant of a point map at x.
inline double jacobian_det_at(const PointMap& phi, std::size_t n, const std::array<double, 3>& x,
                              double eps = 1e-7) {
  const auto f0 = phi(x);
  double jac[3][3] = {};
  for (std::size_t b = 0; b < n; ++b) {
    auto xp = x;
    xp[3 - n + b] += eps;
    const auto f1 = phi(xp);
    for (std::size_t a = 0; a < n; ++a) jac[a][b] = (f1[3 - n + a] - f0[3 - n + a]) / eps;
  }
  if (n == 2) return jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
  return jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1]) -
         jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0]) +
         jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
}

/// Jacobian determinant statistics of a point map at uniformly drawn points of
/// the box [0, extent-1] per axis, with forward differences of step eps.
inline JacobianStats jacobian_stats_fn(const PointMap& phi, const Extent3& e, std::size_t n,
                                       std::size_t num_samples, double eps = 1e-7, std::uint64_t seed = 0) {
  if (num_samples < 1) throw ValidationError("jacobian_stats: num_samples must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<std::array<double, 3>> points(num_samples);
  for (auto& pt : points) {
    pt = {0, 0, 0};
    for (std::size_t a = 0; a < n; ++a) {
      const int ax = static_cast<int>(3 - n + a);
      const double hi = std::max(0.0, static_cast<double>(e[ax]) - 1.0 - 2 * eps);
      pt[ax] = std::uniform_real_distribution<double>(0.0, hi)(rng);
    }
  }
  std::vector<double> dets(num_samples);
  parallel_for(static_cast<std::ptrdiff_t>(num_samples),
               [&](std::ptrdiff_t i) { dets[i] = jacobian_det_at(phi, n, points[i], eps); });
  JacobianStats s;
  s.samples = num_samples;
  s.det_min = dets[0];
  double sum = 0, folds = 0;
  for (double d : dets) {
    sum += d;
    if (d <= 0) folds += 1;
    s.det_min = std::min(s.det_min, d);
  }
  s.det_mean = sum / static_cast<double>(num_samples);
  double var = 0;
  for (double d : dets) var += (d - s.det_mean) * (d - s.det_mean);
  s.det_std = std::sqrt(var / static_cast<double>(num_samples));
  s.folding_fraction = folds / static_cast<double>(num_samples);
  return s;
}

/// Continuous evaluation of x + d(x) for a dense field, in double precision.
template <typename T>
PointMap field_point_map(const Tensor<T>& disp) {
  const std::size_t n = field_rank(disp.shape());
  const Extent3 e = spatial_extent(disp.shape(), n);
  auto data = std::make_shared<std::vector<double>>(disp.storage().begin(), disp.storage().end());
  return [data, e, n](const std::array<double, 3>& x) {
    const detail::Corners<double> c(e, x[0], x[1], x[2]);
    std::array<double, 3> out = x;
    for (std::size_t a = 0; a < n; ++a) out[3 - n + a] += c.value(data->data() + a * e.size());
    return out;
  };
}

template <typename T>
JacobianStats jacobian_stats(const Tensor<T>& disp, std::size_t num_samples, double eps = 1e-7,
                             std::uint64_t seed = 0) {
  const std::size_t n = field_rank(disp.shape());
  return jacobian_stats_fn(field_point_map(disp), spatial_extent(disp.shape(), n), n, num_samples, eps, seed);
}

// Pyramid convention: fine voxel p sits at coarse coordinate (p - (f-1)/2) / f,
// i.e. each coarse voxel is the centre of its f^n block.

template <typename T>
Var<T> downsample_volume(const Var<T>& vol, std::size_t n, std::size_t factor) {
  return avg_pool(vol, n, factor);
}

/// Average-pools a displacement field and converts it to coarse voxel units.
template <typename T>
Var<T> downsample_field(const Var<T>& disp, std::size_t factor) {
  if (factor == 1) return disp;
  const std::size_t n = field_rank(disp.shape());
  return scale(avg_pool(disp, n, factor), T(1) / static_cast<T>(factor));
}

/// Multi-linear upsampling by `factor` along the trailing n spatial axes.
template <typename T>
Var<T> upsample_volume(const Var<T>& vol, std::size_t n, std::size_t factor) {
  if (factor == 1) return vol;
  const Shape& s = vol.shape();
  if (s.size() != n + 1) throw DimensionError("upsample_volume: expected [C, spatial...], got " + shape_string(s));
  Shape fine = spatial_shape(s, n);
  for (auto& d : fine) d *= factor;
  const Extent3 fe = spatial_extent(fine, n);
  const std::size_t m = fe.size();
  Tensor<T> coords({m, n});
  const T off = static_cast<T>(factor - 1) / 2, inv = T(1) / static_cast<T>(factor);
  for (std::size_t p = 0; p < m; ++p) {
    const auto q = detail::unravel(p, fe);
    for (std::size_t a = 0; a < n; ++a) coords[p * n + a] = (static_cast<T>(q[3 - n + a]) - off) * inv;
  }
  auto flat = sample_linear(vol, Var<T>::constant(std::move(coords)));
  return reshape(flat, with_channels(s[0], fine));
}

/// Upsamples a displacement field and converts it to fine voxel units.
template <typename T>
Var<T> upsample_field(const Var<T>& disp, std::size_t factor) {
  if (factor == 1) return disp;
  const std::size_t n = field_rank(disp.shape());
  return scale(upsample_volume(disp, n, factor), static_cast<T>(factor));
}

}  // namespace hwreg
