#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <memory>
#include <vector>

#include "hwreg/autodiff.hpp"
#include "hwreg/error.hpp"
#include "hwreg/field.hpp"
#include "hwreg/parallel.hpp"

namespace hwreg {

struct FixedPointConfig {
  double tol = 0.01;               // max displacement error in voxels
  int max_iter = 50;
  int anderson_m = 4;
  double anderson_reg = 1e-8;
  double backward_tol = 1e-4;      // relative to the cotangent's max norm
  int backward_max_iter = 200;

  void validate() const {
    if (!(tol > 0)) throw ValidationError("fixed point: tol must be positive");
    if (max_iter < 1) throw ValidationError("fixed point: max_iter must be >= 1");
    if (anderson_m < 1) throw ValidationError("fixed point: anderson history must be >= 1");
    if (!(anderson_reg >= 0)) throw ValidationError("fixed point: anderson regularization must be >= 0");
    if (!(backward_tol > 0) || backward_max_iter < 1) throw ValidationError("fixed point: bad backward settings");
  }
};

struct InversionStats {
  int iterations = 0;
  double residual = 0;
  int fallbacks = 0;
};

/// One Anderson mixing step over the stored iterates xs[i] and their images
/// gs[i] (oldest first). Minimises |sum_i a_i (g_i - x_i)| subject to
/// sum_i a_i = 1 with Tikhonov regularisation reg * trace / m and returns
/// sum_i a_i g_i. Returns false (and leaves `out` untouched) when the
/// regularised normal system is too ill-conditioned to trust.
inline bool anderson_step(const std::deque<std::vector<double>>& xs, const std::deque<std::vector<double>>& gs,
                          double reg, std::vector<double>& out) {
  const std::size_t m = xs.size();
  if (m == 0) throw ValidationError("anderson_step: empty history");
  if (m == 1) {
    out = gs.back();
    return true;
  }
  const std::size_t len = xs.back().size();
  std::vector<double> G(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < len; ++p) s += (gs[i][p] - xs[i][p]) * (gs[j][p] - xs[j][p]);
      G[i * m + j] = G[j * m + i] = s;
    }
  double trace = 0;
  for (std::size_t i = 0; i < m; ++i) trace += G[i * m + i];
  if (!(trace > 0)) {
    out = gs.back();
    return true;
  }
  const double lambda = reg * trace / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) G[i * m + i] += lambda;
  // Cholesky; the pivot spread estimates the condition number.
  std::vector<double> L(m * m, 0.0);
  double dmin = std::numeric_limits<double>::infinity(), dmax = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = G[i * m + j];
      for (std::size_t k = 0; k < j; ++k) s -= L[i * m + k] * L[j * m + k];
      if (i == j) {
        if (!(s > 0)) return false;
        L[i * m + i] = std::sqrt(s);
        dmin = std::min(dmin, L[i * m + i]);
        dmax = std::max(dmax, L[i * m + i]);
      } else {
        L[i * m + j] = s / L[j * m + j];
      }
    }
  }
  const double cond = (dmax / dmin) * (dmax / dmin);
  if (reg > 0 && cond > 1.0 / (10.0 * reg)) return false;
  std::vector<double> y(m, 1.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < i; ++k) y[i] -= L[i * m + k] * y[k];
    y[i] /= L[i * m + i];
  }
  for (std::size_t ii = m; ii-- > 0;) {
    for (std::size_t k = ii + 1; k < m; ++k) y[ii] -= L[k * m + ii] * y[k];
    y[ii] /= L[ii * m + ii];
  }
  double total = 0;
  for (double v : y) total += v;
  if (!std::isfinite(total) || total == 0) return false;
  out.assign(len, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double a = y[i] / total;
    for (std::size_t p = 0; p < len; ++p) out[p] += a * gs[i][p];
  }
  return true;
}

/// Anderson-accelerated fixed-point driver with bounded history. When the
/// mixing system is ill-conditioned the history is cleared and a plain step
/// is taken.
class AndersonMixer {
 public:
  AndersonMixer(int m, double reg) : m_(static_cast<std::size_t>(m)), reg_(reg) {}

  std::vector<double> step(const std::vector<double>& x, const std::vector<double>& gx) {
    xs_.push_back(x);
    gs_.push_back(gx);
    if (xs_.size() > m_) {
      xs_.pop_front();
      gs_.pop_front();
    }
    std::vector<double> next;
    if (!anderson_step(xs_, gs_, reg_, next)) {
      ++fallbacks_;
      xs_.erase(xs_.begin(), xs_.end() - 1);
      gs_.erase(gs_.begin(), gs_.end() - 1);
      next = gx;
    }
    return next;
  }

  int fallbacks() const { return fallbacks_; }

 private:
  std::size_t m_;
  double reg_;
  int fallbacks_ = 0;
  std::deque<std::vector<double>> xs_, gs_;
};

namespace detail {

// Largest per-voxel Euclidean norm of a field stored channel-major.
inline double max_vector_norm(const std::vector<double>& v, std::size_t n, std::size_t m) {
  double worst = 0;
  for (std::size_t p = 0; p < m; ++p) {
    double s = 0;
    for (std::size_t c = 0; c < n; ++c) s += v[c * m + p] * v[c * m + p];
    worst = std::max(worst, s);
  }
  return std::sqrt(worst);
}

// g(z) = -a(x + z(x)).
template <typename T>
std::vector<double> inversion_map(const Tensor<T>& a, const std::vector<double>& z) {
  const std::size_t n = field_rank(a.shape());
  const Extent3 e = spatial_extent(a.shape(), n);
  std::vector<T> zt(z.begin(), z.end());
  std::vector<T> out(a.size());
  warp_forward(a.data(), n, e, zt.data(), n, e, out.data());
  std::vector<double> g(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) g[i] = -static_cast<double>(out[i]);
  return g;
}

}  // namespace detail

template <typename T>
struct InversionResult {
  Tensor<T> inverse;
  InversionStats stats;
};

/// Solves z = -a(x + z) for the inverse displacement of a contractive
/// displacement a. Stops once max_x |a(x + z(x)) + z(x)| <= tol, i.e. once
/// compose(a, z) is within tol of the identity. Starts from -a.
template <typename T>
InversionResult<T> fixed_point_invert(const Tensor<T>& a, const FixedPointConfig& cfg = {}) {
  cfg.validate();
  const std::size_t n = field_rank(a.shape());
  const std::size_t m = a.size() / n;
  std::vector<double> x(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) x[i] = -static_cast<double>(a[i]);
  AndersonMixer mixer(cfg.anderson_m, cfg.anderson_reg);
  std::vector<double> best = x;
  double best_res = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= cfg.max_iter; ++it) {
    const auto gx = detail::inversion_map(a, x);
    std::vector<double> diff(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) diff[i] = gx[i] - x[i];
    const double res = detail::max_vector_norm(diff, n, m);
    if (!std::isfinite(res)) throw NumericError("fixed_point_invert: non-finite residual");
    if (res < best_res) {
      best_res = res;
      best = x;
    }
    if (res <= cfg.tol) {
      InversionResult<T> r{Tensor<T>(a.shape(), std::vector<T>(x.begin(), x.end())), {it, res, mixer.fallbacks()}};
      return r;
    }
    if (it == cfg.max_iter) break;
    x = mixer.step(x, gx);
  }
  throw ConvergenceError("fixed_point_invert: tolerance " + std::to_string(cfg.tol) + " not reached", best_res,
                         cfg.max_iter, std::move(best));
}

/// Vector-Jacobian product of the inversion at `a` for the converged inverse
/// z. With g(z, a) = -a(x + z) the implicit function theorem gives
/// grad_a = J_a^T w where w solves w = v + J_z^T w; both products are formed
/// from one differentiated application of g without storing Jacobians.
template <typename T>
Tensor<T> invert_backward(const Tensor<T>& inverse, const Tensor<T>& a, const Tensor<T>& cotangent,
                          const FixedPointConfig& cfg = {}, InversionStats* stats = nullptr) {
  cfg.validate();
  a.require_same_shape(inverse, "invert_backward");
  a.require_same_shape(cotangent, "invert_backward");
  const std::size_t n = field_rank(a.shape());
  const Extent3 e = spatial_extent(a.shape(), n);
  const std::size_t m = e.size();
  const double vmax = detail::max_vector_norm(std::vector<double>(cotangent.storage().begin(), cotangent.storage().end()), n, m);
  if (vmax == 0) {
    if (stats) *stats = {};
    return Tensor<T>::zeros_like(a);
  }
  auto corners_at = [&](std::size_t p) {
    const auto q = detail::unravel(p, e);
    double pos[3] = {double(q[0]), double(q[1]), double(q[2])};
    for (std::size_t c = 0; c < n; ++c) pos[3 - n + c] += static_cast<double>(inverse[c * m + p]);
    return detail::Corners<double>(e, pos[0], pos[1], pos[2]);
  };
  std::vector<double> ad(a.storage().begin(), a.storage().end());
  std::vector<double> v(cotangent.storage().begin(), cotangent.storage().end());
  // J_z is block diagonal: dg_p/dz_p = -grad a(x_p + z_p).
  auto apply = [&](const std::vector<double>& w) {
    std::vector<double> out(v);
    parallel_for(static_cast<std::ptrdiff_t>(m), [&](std::ptrdiff_t pi) {
      const auto p = static_cast<std::size_t>(pi);
      const auto c = corners_at(p);
      for (std::size_t b = 0; b < n; ++b) {
        double acc = 0;
        for (std::size_t r = 0; r < n; ++r)
          acc += c.derivative(ad.data() + r * m, static_cast<int>(3 - n + b)) * w[r * m + p];
        out[b * m + p] -= acc;
      }
    });
    return out;
  };
  AndersonMixer mixer(cfg.anderson_m, cfg.anderson_reg);
  std::vector<double> w = v;
  double res = std::numeric_limits<double>::infinity();
  int it = 1;
  for (;; ++it) {
    const auto gw = apply(w);
    std::vector<double> diff(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) diff[i] = gw[i] - w[i];
    res = detail::max_vector_norm(diff, n, m);
    if (!std::isfinite(res)) throw NumericError("invert_backward: non-finite residual");
    if (res <= cfg.backward_tol * vmax) {
      w = gw;
      break;
    }
    if (it >= cfg.backward_max_iter)
      throw ConvergenceError("invert_backward: adjoint solve did not converge", res, it, std::move(w));
    w = mixer.step(w, gw);
  }
  if (stats) *stats = {it, res, mixer.fallbacks()};
  // J_a^T w: adjoint of -sample(a, x + z), i.e. scatter -w to the corners.
  std::vector<double> grad(a.size(), 0.0);
  parallel_for(static_cast<std::ptrdiff_t>(n), [&](std::ptrdiff_t ch) {
    for (std::size_t p = 0; p < m; ++p) {
      const auto c = corners_at(p);
      for (int k = 0; k < 8; ++k) grad[ch * m + c.idx[k]] -= c.w[k] * w[ch * m + p];
    }
  });
  return Tensor<T>(a.shape(), std::vector<T>(grad.begin(), grad.end()));
}

/// Differentiable inversion. The tape node keeps only the converged inverse
/// (its own output); the backward pass solves the implicit adjoint system.
template <typename T>
Var<T> invert(const Var<T>& a, const FixedPointConfig& cfg = {}, InversionStats* stats = nullptr) {
  auto r = fixed_point_invert(a.value(), cfg);
  if (stats) *stats = r.stats;
  auto out = make_result<T>(std::move(r.inverse), {a}, "invert", [cfg](Node<T>& self) {
    const Tensor<T>& inverse = *self.saved.at(0);
    Tensor<T>& g = self.parents[0]->grad_buffer();
    g += invert_backward(inverse, self.parent_value(0), self.grad, cfg);
  });
  if (out.node()->backward) out.node()->saved = {out.node()->value};
  return out;
}

}  // namespace hwreg
