#pragma once

#include <cstdint>
#include <random>

#include "hwreg/tensor.hpp"

namespace hwreg::testing {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

// Smooth random field: a few low-frequency sinusoids per channel.
inline Tensor<double> smooth_field(const Shape& spatial, double amplitude, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = spatial.size();
  Tensor<double> f(with_channels(n, spatial));
  const Extent3 e = spatial_extent(f.shape(), n);
  for (std::size_t c = 0; c < n; ++c) {
    double fr[3], ph[3];
    for (int a = 0; a < 3; ++a) {
      fr[a] = 0.05 + 0.1 * u(rng);
      ph[a] = 6.28 * u(rng);
    }
    for (std::size_t z = 0; z < e.d; ++z)
      for (std::size_t y = 0; y < e.h; ++y)
        for (std::size_t x = 0; x < e.w; ++x)
          f[c * e.size() + (z * e.h + y) * e.w + x] =
              amplitude * std::sin(fr[0] * z + ph[0]) * std::sin(fr[1] * y + ph[1]) * std::sin(fr[2] * x + ph[2]);
  }
  return f;
}

}  // namespace hwreg::testing
