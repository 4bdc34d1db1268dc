#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "hwreg/autodiff.hpp"

namespace hwreg {

using ScalarFn = std::function<Var<double>(const Var<double>&)>;

/// Compares the reverse-mode gradient of a scalar function at `point` with
/// central differences of step eps. Returns the largest
/// |analytic - numeric| / (|analytic| + 1e-12) over all coordinates.
inline double finite_diff_check(const ScalarFn& fn, const Tensor<double>& point, double eps = 1e-5) {
  Tensor<double> analytic;
  {
    Tape<double> tape;
    auto x = tape.leaf(point);
    auto y = fn(x);
    if (y.value().size() != 1) throw DimensionError("finite_diff_check: function must return a scalar");
    if (y.requires_grad())
      tape.backward(y);
    analytic = x.grad();
  }
  auto eval = [&](const Tensor<double>& p) { return fn(Var<double>::constant(p)).value()[0]; };
  double worst = 0;
  Tensor<double> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval(probe);
    probe[i] = orig - eps;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-12));
  }
  return worst;
}

}  // namespace hwreg
