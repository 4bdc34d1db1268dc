#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "hwreg/autodiff.hpp"
#include "hwreg/parallel.hpp"
#include "hwreg/tensor.hpp"

namespace hwreg {

namespace detail {

struct ConvGeometry {
  std::size_t batch = 1, cin = 1, cout = 1;
  Extent3 in, out, kernel;
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> pad{0, 0, 0};
  bool batched = false;
};

inline std::array<std::size_t, 3> expand_param(const std::vector<int>& v, std::size_t n, const char* what) {
  std::array<std::size_t, 3> out{0, 0, 0};
  if (v.size() != 1 && v.size() != n)
    throw ValidationError(std::string("conv_nd: ") + what + " needs 1 or " + std::to_string(n) + " entries");
  for (std::size_t i = 0; i < n; ++i) {
    const int x = v.size() == 1 ? v[0] : v[i];
    if (x < 0) throw ValidationError(std::string("conv_nd: negative ") + what);
    out[3 - n + i] = static_cast<std::size_t>(x);
  }
  return out;
}

inline ConvGeometry conv_geometry(const Shape& input, const Shape& weights, const Shape& bias,
                                  const std::vector<int>& stride, const std::vector<int>& padding) {
  if (weights.size() < 4 || weights.size() > 5)
    throw DimensionError("conv_nd: weights must be [Cout, Cin, k...] with 2 or 3 spatial axes, got " +
                         shape_string(weights));
  const std::size_t n = weights.size() - 2;
  ConvGeometry g;
  if (input.size() == n + 2) {
    g.batched = true;
    g.batch = input[0];
  } else if (input.size() != n + 1) {
    throw DimensionError("conv_nd: input " + shape_string(input) + " incompatible with weights " +
                         shape_string(weights));
  }
  g.cin = input[input.size() - n - 1];
  g.cout = weights[0];
  if (weights[1] != g.cin)
    throw DimensionError("conv_nd: input has " + std::to_string(g.cin) + " channels, weights expect " +
                         std::to_string(weights[1]));
  if (bias.size() != 1 || bias[0] != g.cout)
    throw DimensionError("conv_nd: bias must be [" + std::to_string(g.cout) + "], got " + shape_string(bias));
  g.in = spatial_extent(input, n);
  g.kernel = spatial_extent(weights, n);
  auto st = expand_param(stride, n, "stride");
  g.pad = expand_param(padding, n, "padding");
  for (std::size_t a = 0; a < 3; ++a) g.stride[a] = std::max<std::size_t>(st[a], 1);
  for (std::size_t a = 3 - n; a < 3; ++a)
    if (st[a] < 1) throw ValidationError("conv_nd: stride must be >= 1");
  std::array<std::size_t, 3> out{};
  for (int a = 0; a < 3; ++a) {
    const std::size_t span = g.in[a] + 2 * g.pad[a];
    if (span < g.kernel[a])
      throw DimensionError("conv_nd: spatial extent " + std::to_string(g.in[a]) + " with padding " +
                           std::to_string(g.pad[a]) + " is smaller than kernel " + std::to_string(g.kernel[a]));
    out[a] = (span - g.kernel[a]) / g.stride[a] + 1;
  }
  g.out = {out[0], out[1], out[2]};
  return g;
}

inline Shape conv_output_shape(const ConvGeometry& g, std::size_t n) {
  Shape s;
  if (g.batched) s.push_back(g.batch);
  s.push_back(g.cout);
  if (n == 3) s.push_back(g.out.d);
  s.push_back(g.out.h);
  s.push_back(g.out.w);
  return s;
}

// Range of output indices o with 0 <= o*s + k - p < in.
inline std::pair<std::ptrdiff_t, std::ptrdiff_t> valid_range(std::size_t out, std::size_t in, std::size_t s,
                                                             std::size_t k, std::size_t p) {
  const auto ip = static_cast<std::ptrdiff_t>(p), ik = static_cast<std::ptrdiff_t>(k);
  const auto is = static_cast<std::ptrdiff_t>(s), iin = static_cast<std::ptrdiff_t>(in);
  std::ptrdiff_t lo = 0;
  if (ip > ik) lo = (ip - ik + is - 1) / is;
  std::ptrdiff_t hi = (iin - 1 + ip - ik);
  hi = hi < 0 ? -1 : hi / is;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out) - 1);
  return {lo, hi + 1};
}

template <typename T>
void conv_forward(const ConvGeometry& g, const T* in, const T* w, const T* bias, T* out) {
  const std::size_t in_vol = g.in.size(), out_vol = g.out.size(), kvol = g.kernel.size();
  parallel_for(static_cast<std::ptrdiff_t>(g.batch * g.cout), [&](std::ptrdiff_t job) {
    const std::size_t b = static_cast<std::size_t>(job) / g.cout, co = static_cast<std::size_t>(job) % g.cout;
    T* o = out + (b * g.cout + co) * out_vol;
    std::fill(o, o + out_vol, bias[co]);
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
      const T* src = in + (b * g.cin + ci) * in_vol;
      const T* wk = w + (co * g.cin + ci) * kvol;
      for (std::size_t kz = 0; kz < g.kernel.d; ++kz)
        for (std::size_t ky = 0; ky < g.kernel.h; ++ky)
          for (std::size_t kx = 0; kx < g.kernel.w; ++kx) {
            const T wv = wk[(kz * g.kernel.h + ky) * g.kernel.w + kx];
            const auto [z0, z1] = valid_range(g.out.d, g.in.d, g.stride[0], kz, g.pad[0]);
            const auto [y0, y1] = valid_range(g.out.h, g.in.h, g.stride[1], ky, g.pad[1]);
            const auto [x0, x1] = valid_range(g.out.w, g.in.w, g.stride[2], kx, g.pad[2]);
            for (std::ptrdiff_t oz = z0; oz < z1; ++oz) {
              const std::size_t iz = oz * g.stride[0] + kz - g.pad[0];
              for (std::ptrdiff_t oy = y0; oy < y1; ++oy) {
                const std::size_t iy = oy * g.stride[1] + ky - g.pad[1];
                const T* srow = src + (iz * g.in.h + iy) * g.in.w;
                T* orow = o + (oz * g.out.h + oy) * g.out.w;
                if (g.stride[2] == 1) {
                  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad[2]);
                  for (std::ptrdiff_t ox = x0; ox < x1; ++ox) orow[ox] += wv * srow[ox + shift];
                } else {
                  for (std::ptrdiff_t ox = x0; ox < x1; ++ox) orow[ox] += wv * srow[ox * g.stride[2] + kx - g.pad[2]];
                }
              }
            }
          }
    }
  });
}

template <typename T>
void conv_backward_input(const ConvGeometry& g, const T* gout, const T* w, T* gin) {
  const std::size_t in_vol = g.in.size(), out_vol = g.out.size(), kvol = g.kernel.size();
  parallel_for(static_cast<std::ptrdiff_t>(g.batch * g.cin), [&](std::ptrdiff_t job) {
    const std::size_t b = static_cast<std::size_t>(job) / g.cin, ci = static_cast<std::size_t>(job) % g.cin;
    T* dst = gin + (b * g.cin + ci) * in_vol;
    for (std::size_t co = 0; co < g.cout; ++co) {
      const T* go = gout + (b * g.cout + co) * out_vol;
      const T* wk = w + (co * g.cin + ci) * kvol;
      for (std::size_t kz = 0; kz < g.kernel.d; ++kz)
        for (std::size_t ky = 0; ky < g.kernel.h; ++ky)
          for (std::size_t kx = 0; kx < g.kernel.w; ++kx) {
            const T wv = wk[(kz * g.kernel.h + ky) * g.kernel.w + kx];
            const auto [z0, z1] = valid_range(g.out.d, g.in.d, g.stride[0], kz, g.pad[0]);
            const auto [y0, y1] = valid_range(g.out.h, g.in.h, g.stride[1], ky, g.pad[1]);
            const auto [x0, x1] = valid_range(g.out.w, g.in.w, g.stride[2], kx, g.pad[2]);
            for (std::ptrdiff_t oz = z0; oz < z1; ++oz) {
              const std::size_t iz = oz * g.stride[0] + kz - g.pad[0];
              for (std::ptrdiff_t oy = y0; oy < y1; ++oy) {
                const std::size_t iy = oy * g.stride[1] + ky - g.pad[1];
                T* drow = dst + (iz * g.in.h + iy) * g.in.w;
                const T* grow = go + (oz * g.out.h + oy) * g.out.w;
                for (std::ptrdiff_t ox = x0; ox < x1; ++ox) drow[ox * g.stride[2] + kx - g.pad[2]] += wv * grow[ox];
              }
            }
          }
    }
  });
}

template <typename T>
void conv_backward_weights(const ConvGeometry& g, const T* gout, const T* in, T* gw, T* gb) {
  const std::size_t in_vol = g.in.size(), out_vol = g.out.size(), kvol = g.kernel.size();
  parallel_for(static_cast<std::ptrdiff_t>(g.cout), [&](std::ptrdiff_t job) {
    const auto co = static_cast<std::size_t>(job);
    for (std::size_t b = 0; b < g.batch; ++b) {
      const T* go = gout + (b * g.cout + co) * out_vol;
      if (gb) {
        T s = 0;
        for (std::size_t i = 0; i < out_vol; ++i) s += go[i];
        gb[co] += s;
      }
      if (!gw) continue;
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const T* src = in + (b * g.cin + ci) * in_vol;
        T* wk = gw + (co * g.cin + ci) * kvol;
        for (std::size_t kz = 0; kz < g.kernel.d; ++kz)
          for (std::size_t ky = 0; ky < g.kernel.h; ++ky)
            for (std::size_t kx = 0; kx < g.kernel.w; ++kx) {
              const auto [z0, z1] = valid_range(g.out.d, g.in.d, g.stride[0], kz, g.pad[0]);
              const auto [y0, y1] = valid_range(g.out.h, g.in.h, g.stride[1], ky, g.pad[1]);
              const auto [x0, x1] = valid_range(g.out.w, g.in.w, g.stride[2], kx, g.pad[2]);
              T acc = 0;
              for (std::ptrdiff_t oz = z0; oz < z1; ++oz) {
                const std::size_t iz = oz * g.stride[0] + kz - g.pad[0];
                for (std::ptrdiff_t oy = y0; oy < y1; ++oy) {
                  const std::size_t iy = oy * g.stride[1] + ky - g.pad[1];
                  const T* srow = src + (iz * g.in.h + iy) * g.in.w;
                  const T* grow = go + (oz * g.out.h + oy) * g.out.w;
                  for (std::ptrdiff_t ox = x0; ox < x1; ++ox) acc += grow[ox] * srow[ox * g.stride[2] + kx - g.pad[2]];
                }
              }
              wk[(kz * g.kernel.h + ky) * g.kernel.w + kx] += acc;
            }
      }
    }
  });
}

}  // namespace detail

/// N-d cross-correlation with zero padding. Input is [C, spatial...] or
/// [N, C, spatial...]; weights are [Cout, Cin, k...]; bias is [Cout].
template <typename T>
Var<T> conv_nd(const Var<T>& input, const Var<T>& weights, const Var<T>& bias, const std::vector<int>& stride,
               const std::vector<int>& padding) {
  const auto g = detail::conv_geometry(input.shape(), weights.shape(), bias.shape(), stride, padding);
  const std::size_t n = weights.shape().size() - 2;
  Tensor<T> out(detail::conv_output_shape(g, n));
  detail::conv_forward(g, input.value().data(), weights.value().data(), bias.value().data(), out.data());
  return make_result<T>(std::move(out), {input, weights, bias}, "conv_nd", [g](Node<T>& self) {
    if (self.parent_needs_grad(0))
      detail::conv_backward_input(g, self.grad.data(), self.parent_value(1).data(),
                                  self.parents[0]->grad_buffer().data());
    T* gw = self.parent_needs_grad(1) ? self.parents[1]->grad_buffer().data() : nullptr;
    T* gb = self.parent_needs_grad(2) ? self.parents[2]->grad_buffer().data() : nullptr;
    if (gw || gb) detail::conv_backward_weights(g, self.grad.data(), self.parent_value(0).data(), gw, gb);
  });
}

namespace detail {

struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace detail

/// Strided transposed convolution along one axis:
///   out[p] = sum_c in[c] * taps[p - stride*c + origin]
/// with out_len outputs. The default geometry (origin 0, out_len 0) produces
/// stride * len outputs. The adjoint w.r.t. the input is the strided
/// correlation with the same taps; taps are constants.
template <typename T>
Var<T> transposed_conv_1d_axis(const Var<T>& input, const std::vector<T>& taps, std::size_t axis, int stride,
                               std::ptrdiff_t origin = 0, std::size_t out_len = 0) {
  if (stride < 1) throw ValidationError("transposed_conv_1d_axis: stride must be >= 1");
  if (axis >= input.shape().size()) throw DimensionError("transposed_conv_1d_axis: axis out of range");
  if (taps.empty()) throw ValidationError("transposed_conv_1d_axis: empty taps");
  const auto v = detail::axis_view(input.shape(), axis);
  const std::size_t s = static_cast<std::size_t>(stride);
  if (out_len == 0) out_len = s * v.len;
  Shape os = input.shape();
  os[axis] = out_len;
  Tensor<T> out(os);
  const T* in = input.value().data();
  const auto ntaps = static_cast<std::ptrdiff_t>(taps.size());

  // For output p the contributing inputs are c with 0 <= p - s*c + origin < ntaps.
  auto input_range = [=](std::size_t p) {
    const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(p) + origin;
    const auto is = static_cast<std::ptrdiff_t>(s);
    std::ptrdiff_t hi = q >= 0 ? q / is : -((-q + is - 1) / is);
    std::ptrdiff_t lo_num = q - ntaps + 1;
    std::ptrdiff_t lo = lo_num >= 0 ? (lo_num + is - 1) / is : -((-lo_num) / is);
    lo = std::max<std::ptrdiff_t>(lo, 0);
    hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(v.len) - 1);
    return std::pair{lo, hi};
  };

  parallel_for(static_cast<std::ptrdiff_t>(v.outer), [&](std::ptrdiff_t o) {
    for (std::size_t p = 0; p < out_len; ++p) {
      const auto [lo, hi] = input_range(p);
      T* dst = out.data() + (o * out_len + p) * v.inner;
      for (std::ptrdiff_t c = lo; c <= hi; ++c) {
        const T t = taps[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(p) - static_cast<std::ptrdiff_t>(s) * c + origin)];
        const T* src = in + (o * v.len + c) * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) dst[i] += t * src[i];
      }
    }
  });

  return make_result<T>(std::move(out), {input}, "transposed_conv_1d", [=](Node<T>& self) {
    T* gin = self.parents[0]->grad_buffer().data();
    const T* gout = self.grad.data();
    parallel_for(static_cast<std::ptrdiff_t>(v.outer), [&](std::ptrdiff_t o) {
      for (std::size_t p = 0; p < out_len; ++p) {
        const auto [lo, hi] = input_range(p);
        const T* go = gout + (o * out_len + p) * v.inner;
        for (std::ptrdiff_t c = lo; c <= hi; ++c) {
          const T t = taps[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(p) - static_cast<std::ptrdiff_t>(s) * c + origin)];
          T* dst = gin + (o * v.len + c) * v.inner;
          for (std::size_t i = 0; i < v.inner; ++i) dst[i] += t * go[i];
        }
      }
    });
  });
}

/// Average pooling of a [C, spatial...] tensor by `factor` along each of the
/// trailing n spatial axes.
template <typename T>
Var<T> avg_pool(const Var<T>& input, std::size_t n, std::size_t factor) {
  if (factor == 1) return input;
  const Shape& s = input.shape();
  const Extent3 in = spatial_extent(s, n);
  for (int a = 3 - static_cast<int>(n); a < 3; ++a)
    if (in[a] % factor != 0)
      throw DimensionError("avg_pool: extent " + shape_string(s) + " not divisible by " + std::to_string(factor));
  const std::size_t fd = n == 3 ? factor : 1;
  const Extent3 out{in.d / fd, in.h / factor, in.w / factor};
  const std::size_t channels = input.value().size() / in.size();
  Shape os(s.begin(), s.end() - static_cast<std::ptrdiff_t>(n));
  if (n == 3) os.push_back(out.d);
  os.push_back(out.h);
  os.push_back(out.w);
  Tensor<T> result(os);
  const T inv = T(1) / static_cast<T>(fd * factor * factor);
  const T* src = input.value().data();
  parallel_for(static_cast<std::ptrdiff_t>(channels), [&](std::ptrdiff_t c) {
    for (std::size_t z = 0; z < in.d; ++z)
      for (std::size_t y = 0; y < in.h; ++y)
        for (std::size_t x = 0; x < in.w; ++x)
          result[c * out.size() + ((z / fd) * out.h + y / factor) * out.w + x / factor] +=
              src[c * in.size() + (z * in.h + y) * in.w + x] * inv;
  });
  return make_result<T>(std::move(result), {input}, "avg_pool", [=](Node<T>& self) {
    T* g = self.parents[0]->grad_buffer().data();
    parallel_for(static_cast<std::ptrdiff_t>(channels), [&](std::ptrdiff_t c) {
      for (std::size_t z = 0; z < in.d; ++z)
        for (std::size_t y = 0; y < in.h; ++y)
          for (std::size_t x = 0; x < in.w; ++x)
            g[c * in.size() + (z * in.h + y) * in.w + x] +=
                self.grad[c * out.size() + ((z / fd) * out.h + y / factor) * out.w + x / factor] * inv;
    });
  });
}

}  // namespace hwreg
