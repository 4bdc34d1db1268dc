#pragma once

#include <algorithm>
#include <cstddef>
#include <memory>
#include <string>

#include "hwreg/autodiff.hpp"
#include "hwreg/parallel.hpp"
#include "hwreg/tensor.hpp"

namespace hwreg {

namespace detail {

// Moving average of width 2r+1 along one spatial axis, replicate padding.
template <typename T>
void box_axis(const T* src, T* dst, const Extent3& e, int axis, std::size_t r) {
  const std::size_t len = e[axis];
  const std::size_t stride = axis == 0 ? e.h * e.w : axis == 1 ? e.w : 1;
  const std::size_t lines = e.size() / len;
  const T inv = T(1) / static_cast<T>(2 * r + 1);
  const auto ilen = static_cast<std::ptrdiff_t>(len), ir = static_cast<std::ptrdiff_t>(r);
  parallel_for(static_cast<std::ptrdiff_t>(lines), [&](std::ptrdiff_t line) {
    std::size_t base;
    if (axis == 0) base = static_cast<std::size_t>(line);
    else if (axis == 1) base = (line / e.w) * e.h * e.w + line % e.w;
    else base = static_cast<std::size_t>(line) * e.w;
    for (std::ptrdiff_t i = 0; i < ilen; ++i) {
      T acc = 0;
      for (std::ptrdiff_t o = -ir; o <= ir; ++o) {
        const std::ptrdiff_t j = std::clamp<std::ptrdiff_t>(i + o, 0, ilen - 1);
        acc += src[base + j * stride];
      }
      dst[base + i * stride] = acc * inv;
    }
  });
}

// Adjoint of box_axis.
template <typename T>
void box_axis_adjoint(const T* src, T* dst, const Extent3& e, int axis, std::size_t r) {
  const std::size_t len = e[axis];
  const std::size_t stride = axis == 0 ? e.h * e.w : axis == 1 ? e.w : 1;
  const std::size_t lines = e.size() / len;
  const T inv = T(1) / static_cast<T>(2 * r + 1);
  const auto ilen = static_cast<std::ptrdiff_t>(len), ir = static_cast<std::ptrdiff_t>(r);
  parallel_for(static_cast<std::ptrdiff_t>(lines), [&](std::ptrdiff_t line) {
    std::size_t base;
    if (axis == 0) base = static_cast<std::size_t>(line);
    else if (axis == 1) base = (line / e.w) * e.h * e.w + line % e.w;
    else base = static_cast<std::size_t>(line) * e.w;
    for (std::ptrdiff_t i = 0; i < ilen; ++i) dst[base + i * stride] = 0;
    for (std::ptrdiff_t i = 0; i < ilen; ++i) {
      const T g = src[base + i * stride] * inv;
      for (std::ptrdiff_t o = -ir; o <= ir; ++o) {
        const std::ptrdiff_t j = std::clamp<std::ptrdiff_t>(i + o, 0, ilen - 1);
        dst[base + j * stride] += g;
      }
    }
  });
}

template <typename T>
std::vector<T> box_filter(std::vector<T> x, const Extent3& e, std::size_t n, std::size_t r) {
  std::vector<T> tmp(x.size());
  for (int axis = 3 - static_cast<int>(n); axis < 3; ++axis) {
    box_axis(x.data(), tmp.data(), e, axis, r);
    x.swap(tmp);
  }
  return x;
}

template <typename T>
std::vector<T> box_filter_adjoint(std::vector<T> g, const Extent3& e, std::size_t n, std::size_t r) {
  std::vector<T> tmp(g.size());
  for (int axis = 2; axis >= 3 - static_cast<int>(n); --axis) {
    box_axis_adjoint(g.data(), tmp.data(), e, axis, r);
    g.swap(tmp);
  }
  return g;
}

}  // namespace detail

/// Variance floor below which a window counts as constant (correlation 0).
inline constexpr double kLnccVarianceFloor = 1e-5;

/// Negative mean squared local correlation coefficient between two
/// single-channel volumes [1, spatial...], over cubic windows of odd width
/// with replicate padding. Ranges over [-1, 0]; lower is more similar.
template <typename T>
Var<T> lncc_loss(const Var<T>& a, const Var<T>& b, int window = 7) {
  a.value().require_same_shape(b.value(), "lncc_loss");
  const Shape& s = a.shape();
  if (s.size() < 3 || s.size() > 4 || s[0] != 1)
    throw DimensionError("lncc_loss expects a single-channel [1, spatial...] volume, got " + shape_string(s));
  if (window < 1 || window % 2 == 0) throw ValidationError("lncc_loss: window must be odd");
  const std::size_t n = s.size() - 1;
  const Extent3 e = spatial_extent(s, n);
  for (int axis = 3 - static_cast<int>(n); axis < 3; ++axis)
    if (static_cast<std::size_t>(window) > e[axis])
      throw DimensionError("lncc_loss: window " + std::to_string(window) + " larger than volume " + shape_string(s));
  const std::size_t r = static_cast<std::size_t>(window / 2);
  const std::size_t m = e.size();
  const T eps = static_cast<T>(kLnccVarianceFloor);

  const auto& av = a.value().storage();
  const auto& bv = b.value().storage();
  std::vector<T> aa(m), bb(m), ab(m);
  for (std::size_t i = 0; i < m; ++i) {
    aa[i] = av[i] * av[i];
    bb[i] = bv[i] * bv[i];
    ab[i] = av[i] * bv[i];
  }
  auto stats = std::make_shared<Tensor<T>>(Shape{5, m});
  {
    const std::vector<T>* sources[5] = {&av, &bv, &aa, &bb, &ab};
    for (int k = 0; k < 5; ++k) {
      auto f = detail::box_filter(*sources[k], e, n, r);
      std::copy(f.begin(), f.end(), stats->data() + k * m);
    }
  }
  const T* sa = stats->data();
  const T* sb = sa + m;
  const T* saa = sa + 2 * m;
  const T* sbb = sa + 3 * m;
  const T* sab = sa + 4 * m;
  double total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const T cov = sab[i] - sa[i] * sb[i];
    const T va = std::max(saa[i] - sa[i] * sa[i], eps);
    const T vb = std::max(sbb[i] - sb[i] * sb[i], eps);
    total += static_cast<double>(cov * cov / (va * vb));
  }
  Tensor<T> out({1}, static_cast<T>(-total / static_cast<double>(m)));
  return make_result<T>(
      std::move(out), {a, b}, "lncc",
      [=](Node<T>& self) {
        const Tensor<T>& st = *self.saved[0];
        const T* psa = st.data();
        const T* psb = psa + m;
        const T* psaa = psa + 2 * m;
        const T* psbb = psa + 3 * m;
        const T* psab = psa + 4 * m;
        const T gl = -self.grad[0] / static_cast<T>(m);
        std::vector<T> g_sa(m), g_sb(m), g_saa(m), g_sbb(m), g_sab(m);
        for (std::size_t i = 0; i < m; ++i) {
          const T cov = psab[i] - psa[i] * psb[i];
          const T va_raw = psaa[i] - psa[i] * psa[i];
          const T vb_raw = psbb[i] - psb[i] * psb[i];
          const T va = std::max(va_raw, eps);
          const T vb = std::max(vb_raw, eps);
          const T cc2 = cov * cov / (va * vb);
          const T dcov = gl * T(2) * cov / (va * vb);
          const T dva = va_raw > eps ? -gl * cc2 / va : T(0);
          const T dvb = vb_raw > eps ? -gl * cc2 / vb : T(0);
          g_sab[i] = dcov;
          g_sa[i] = -psb[i] * dcov - T(2) * psa[i] * dva;
          g_sb[i] = -psa[i] * dcov - T(2) * psb[i] * dvb;
          g_saa[i] = dva;
          g_sbb[i] = dvb;
        }
        const auto t_sa = detail::box_filter_adjoint(std::move(g_sa), e, n, r);
        const auto t_sb = detail::box_filter_adjoint(std::move(g_sb), e, n, r);
        const auto t_saa = detail::box_filter_adjoint(std::move(g_saa), e, n, r);
        const auto t_sbb = detail::box_filter_adjoint(std::move(g_sbb), e, n, r);
        const auto t_sab = detail::box_filter_adjoint(std::move(g_sab), e, n, r);
        const Tensor<T>& xa = self.parent_value(0);
        const Tensor<T>& xb = self.parent_value(1);
        if (self.parent_needs_grad(0)) {
          Tensor<T>& ga = self.parents[0]->grad_buffer();
          for (std::size_t i = 0; i < m; ++i) ga[i] += t_sa[i] + T(2) * xa[i] * t_saa[i] + xb[i] * t_sab[i];
        }
        if (self.parent_needs_grad(1)) {
          Tensor<T>& gb = self.parents[1]->grad_buffer();
          for (std::size_t i = 0; i < m; ++i) gb[i] += t_sb[i] + T(2) * xb[i] * t_sbb[i] + xa[i] * t_sab[i];
        }
      },
      {stats});
}

/// Squared forward-difference gradients of a displacement field [n, spatial...]:
/// for every spatial axis, the mean over channels and valid voxels, summed
/// over axes. A field varying with slope a along one axis in every channel
/// scores a^2.
template <typename T>
Var<T> grad_l2_penalty(const Var<T>& disp) {
  const Shape& s = disp.shape();
  const std::size_t n = s.size() - 1;
  if (n < 2 || n > 3 || s[0] != n)
    throw DimensionError("grad_l2_penalty expects a displacement field [n, spatial...], got " + shape_string(s));
  const Extent3 e = spatial_extent(s, n);
  const T* d = disp.value().data();
  double total = 0;
  for (int axis = 3 - static_cast<int>(n); axis < 3; ++axis) {
    if (e[axis] < 2) continue;
    const std::size_t stride = axis == 0 ? e.h * e.w : axis == 1 ? e.w : 1;
    const std::size_t count = n * e.size() / e[axis] * (e[axis] - 1);
    double acc = 0;
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t z = 0; z < e.d; ++z)
        for (std::size_t y = 0; y < e.h; ++y)
          for (std::size_t x = 0; x < e.w; ++x) {
            const std::size_t pos[3] = {z, y, x};
            if (pos[axis] + 1 >= e[axis]) continue;
            const std::size_t i = c * e.size() + (z * e.h + y) * e.w + x;
            const double f = static_cast<double>(d[i + stride]) - static_cast<double>(d[i]);
            acc += f * f;
          }
    total += acc / static_cast<double>(count);
  }
  return make_result<T>(Tensor<T>({1}, static_cast<T>(total)), {disp}, "grad_l2", [=](Node<T>& self) {
    const T* dv = self.parent_value(0).data();
    Tensor<T>& g = self.parents[0]->grad_buffer();
    for (int axis = 3 - static_cast<int>(n); axis < 3; ++axis) {
      if (e[axis] < 2) continue;
      const std::size_t stride = axis == 0 ? e.h * e.w : axis == 1 ? e.w : 1;
      const std::size_t count = n * e.size() / e[axis] * (e[axis] - 1);
      const T k = T(2) * self.grad[0] / static_cast<T>(count);
      for (std::size_t c = 0; c < n; ++c)
        for (std::size_t z = 0; z < e.d; ++z)
          for (std::size_t y = 0; y < e.h; ++y)
            for (std::size_t x = 0; x < e.w; ++x) {
              const std::size_t pos[3] = {z, y, x};
              if (pos[axis] + 1 >= e[axis]) continue;
              const std::size_t i = c * e.size() + (z * e.h + y) * e.w + x;
              const T f = dv[i + stride] - dv[i];
              g[i + stride] += k * f;
              g[i] -= k * f;
            }
    }
  });
}

}  // namespace hwreg
