#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <vector>

#include "hwreg/error.hpp"
#include "hwreg/field.hpp"
#include "hwreg/parallel.hpp"
#include "hwreg/pipeline.hpp"

namespace hwreg {

struct DiceResult {
  std::map<std::uint16_t, double> per_label;
  double mean = 0;
};

/// Per-label Dice over the foreground labels present in either map; the mean
/// skips background (label 0).
inline DiceResult dice(const LabelMap& a, const LabelMap& b) {
  if (a.shape != b.shape) throw DimensionError("dice: " + shape_string(a.shape) + " vs " + shape_string(b.shape));
  std::map<std::uint16_t, std::array<std::size_t, 3>> counts;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto la = a.labels[i], lb = b.labels[i];
    if (la) ++counts[la][0];
    if (lb) ++counts[lb][1];
    if (la && la == lb) ++counts[la][2];
  }
  DiceResult r;
  for (const auto& [label, c] : counts) r.per_label[label] = 2.0 * double(c[2]) / double(c[0] + c[1]);
  if (r.per_label.empty()) {
    r.mean = 1.0;  // both maps empty
    return r;
  }
  for (const auto& [label, d] : r.per_label) r.mean += d;
  r.mean /= static_cast<double>(r.per_label.size());
  return r;
}

namespace detail {

/// Voxels carrying `label` with at least one face neighbour that does not
/// (outside the volume counts as a different label).
inline std::vector<std::array<std::size_t, 3>> surface_voxels(const LabelMap& m, std::uint16_t label) {
  const std::size_t n = m.shape.size();
  const Extent3 e = spatial_extent(with_channels(1, m.shape), n);
  std::vector<std::array<std::size_t, 3>> out;
  for (std::size_t p = 0; p < e.size(); ++p) {
    if (m.labels[p] != label) continue;
    const auto q = unravel(p, e);
    bool edge = false;
    for (int ax = 3 - static_cast<int>(n); ax < 3 && !edge; ++ax)
      for (int dir : {-1, 1}) {
        auto r = q;
        if ((dir < 0 && q[ax] == 0) || (dir > 0 && q[ax] + 1 == e[ax])) {
          edge = true;
          break;
        }
        r[ax] = dir < 0 ? q[ax] - 1 : q[ax] + 1;
        if (m.labels[(r[0] * e.h + r[1]) * e.w + r[2]] != label) {
          edge = true;
          break;
        }
      }
    if (edge) out.push_back(q);
  }
  return out;
}

// 1-D squared distance transform (lower envelope of parabolas) over f, in place.
inline void edt_1d(std::vector<double>& f) {
  const std::size_t len = f.size();
  std::vector<double> d(len), z(len + 1);
  std::vector<std::size_t> v(len);
  const double inf = std::numeric_limits<double>::infinity();
  std::size_t k = 0;
  std::size_t first = 0;
  while (first < len && f[first] == inf) ++first;
  if (first == len) return;
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  auto meet = [&](std::size_t q, std::size_t p) {
    const double qd = static_cast<double>(q), pd = static_cast<double>(p);
    return ((f[q] + qd * qd) - (f[p] + pd * pd)) / (2 * qd - 2 * pd);
  };
  for (std::size_t q = first + 1; q < len; ++q) {
    if (f[q] == inf) continue;
    double s = meet(q, v[k]);
    while (s <= z[k]) s = meet(q, v[--k]);  // z[0] = -inf stops the loop
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < len; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
  f = std::move(d);
}

/// Exact squared Euclidean distance to the nearest seed voxel.
inline std::vector<double> squared_edt(const Extent3& e, const std::vector<std::array<std::size_t, 3>>& seeds) {
  std::vector<double> g(e.size(), std::numeric_limits<double>::infinity());
  for (const auto& s : seeds) g[(s[0] * e.h + s[1]) * e.w + s[2]] = 0;
  for (int ax = 0; ax < 3; ++ax) {
    if (e[ax] < 2) continue;
    const std::size_t stride = ax == 0 ? e.h * e.w : ax == 1 ? e.w : 1;
    const std::size_t lines = e.size() / e[ax];
    parallel_for(static_cast<std::ptrdiff_t>(lines), [&](std::ptrdiff_t line) {
      std::size_t base;
      if (ax == 0) base = static_cast<std::size_t>(line);
      else if (ax == 1) base = (static_cast<std::size_t>(line) / e.w) * e.h * e.w + static_cast<std::size_t>(line) % e.w;
      else base = static_cast<std::size_t>(line) * e.w;
      std::vector<double> f(e[ax]);
      for (std::size_t i = 0; i < e[ax]; ++i) f[i] = g[base + i * stride];
      edt_1d(f);
      for (std::size_t i = 0; i < e[ax]; ++i) g[base + i * stride] = f[i];
    });
  }
  return g;
}

inline double quantile_linear(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

/// Volumes with fewer voxels than this use all-pairs surface distances.
inline constexpr std::size_t kHd95BruteForceLimit = 32 * 32 * 32;

/// 95th percentile (linear interpolation) of the pooled nearest-surface
/// distances from a's surface to b's and from b's to a's, in voxels.
inline double hd95(const LabelMap& a, const LabelMap& b, std::uint16_t label, bool force_brute = false) {
  if (a.shape != b.shape) throw DimensionError("hd95: " + shape_string(a.shape) + " vs " + shape_string(b.shape));
  const auto sa = detail::surface_voxels(a, label), sb = detail::surface_voxels(b, label);
  if (sa.empty() || sb.empty()) throw ValidationError("hd95: label " + std::to_string(label) + " missing from a map");
  std::vector<double> dist;
  dist.reserve(sa.size() + sb.size());
  if (force_brute || a.size() < kHd95BruteForceLimit) {
    auto nearest = [](const std::vector<std::array<std::size_t, 3>>& from,
                      const std::vector<std::array<std::size_t, 3>>& to, std::vector<double>& out) {
      std::vector<double> d(from.size());
      parallel_for(static_cast<std::ptrdiff_t>(from.size()), [&](std::ptrdiff_t i) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& t : to) {
          double s = 0;
          for (int ax = 0; ax < 3; ++ax) {
            const double diff = static_cast<double>(from[static_cast<std::size_t>(i)][ax]) - static_cast<double>(t[ax]);
            s += diff * diff;
          }
          best = std::min(best, s);
        }
        d[static_cast<std::size_t>(i)] = std::sqrt(best);
      });
      out.insert(out.end(), d.begin(), d.end());
    };
    nearest(sa, sb, dist);
    nearest(sb, sa, dist);
  } else {
    const Extent3 e = spatial_extent(with_channels(1, a.shape), a.shape.size());
    const auto to_b = detail::squared_edt(e, sb), to_a = detail::squared_edt(e, sa);
    for (const auto& q : sa) dist.push_back(std::sqrt(to_b[(q[0] * e.h + q[1]) * e.w + q[2]]));
    for (const auto& q : sb) dist.push_back(std::sqrt(to_a[(q[0] * e.h + q[1]) * e.w + q[2]]));
  }
  return detail::quantile_linear(std::move(dist), 0.95);
}

/// Two-sided paired sign-flip permutation test on the mean difference.
/// Enumerates all 2^n sign patterns when that is at most n_perm; otherwise
/// draws n_perm random patterns and returns (hits + 1) / (n_perm + 1).
inline double permutation_test(const std::vector<double>& a, const std::vector<double>& b, std::size_t n_perm = 10000,
                               std::uint64_t seed = 0) {
  if (a.empty() || b.empty()) throw ValidationError("permutation_test: empty sample");
  if (a.size() != b.size()) throw ValidationError("permutation_test: samples must be paired (equal length)");
  if (n_perm == 0) throw ValidationError("permutation_test: n_perm must be positive");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  auto stat = [&](auto&& sign) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += sign(i) * d[i];
    return std::abs(s) / static_cast<double>(n);
  };
  const double observed = stat([](std::size_t) { return 1.0; });
  // Ties within rounding of the observed statistic count as at least as extreme.
  const double threshold = observed * (1 - 1e-12);
  if (n < 63 && (std::uint64_t{1} << n) <= n_perm) {
    std::size_t hits = 0;
    const std::uint64_t total = std::uint64_t{1} << n;
    for (std::uint64_t mask = 0; mask < total; ++mask)
      if (stat([mask](std::size_t i) { return (mask >> i) & 1 ? -1.0 : 1.0; }) >= threshold) ++hits;
    return static_cast<double>(hits) / static_cast<double>(total);
  }
  std::mt19937_64 rng(seed);
  std::size_t hits = 0;
  std::vector<double> signs(n);
  for (std::size_t p = 0; p < n_perm; ++p) {
    for (auto& s : signs) s = (rng() & 1) ? -1.0 : 1.0;
    if (stat([&](std::size_t i) { return signs[i]; }) >= threshold) ++hits;
  }
  return static_cast<double>(hits + 1) / static_cast<double>(n_perm + 1);
}

// ---------------------------------------------------------------------------
// Per-pair metric suite

struct PairMetrics {
  double dice_baseline = 0;
  double dice_mean = 0;
  std::map<std::uint16_t, double> dice_per_label;
  double hd95 = 0;  // mean over labels present in both maps
  double folding_fraction = 0;
  double folding_complete = 0;
  double det_std = 0;
  double inverse_err = 0;
  double cycle_err = 0;
  std::vector<int> inversion_iterations;
};

struct Aggregate {
  double mean = 0, std = 0;
};

/// Mean and population standard deviation.
inline Aggregate aggregate(const std::vector<double>& v) {
  Aggregate a;
  if (v.empty()) return a;
  for (double x : v) a.mean += x;
  a.mean /= static_cast<double>(v.size());
  for (double x : v) a.std += (x - a.mean) * (x - a.mean);
  a.std = std::sqrt(a.std / static_cast<double>(v.size()));
  return a;
}

struct MetricReport {
  std::vector<PairMetrics> pairs;

  template <typename Get>
  Aggregate column(Get get) const {
    std::vector<double> v;
    for (const auto& p : pairs) v.push_back(get(p));
    return aggregate(v);
  }
};

struct EvalPair {
  Tensor<double> x_a, x_b;
  LabelMap labels_a, labels_b;
};

struct EvalOptions {
  PipelineConfig pipeline;
  std::size_t complete_samples = 0;  // 0: skip the complete-variant folding check
  std::uint64_t seed = 0;
  bool consistency = true;
};

/// Jacobian sample count: 20 per voxel, at most one million.
inline std::size_t jacobian_sample_count(std::size_t voxels) { return std::min<std::size_t>(1'000'000, 20 * voxels); }

template <typename T>
PairMetrics evaluate_pair(const BoundWeights<T>& b, const EvalPair& p, const EvalOptions& opt = {}) {
  auto xa = Var<T>::constant(p.x_a.template cast<T>());
  auto xb = Var<T>::constant(p.x_b.template cast<T>());
  const auto r = register_images(b, xa, xb, opt.pipeline);
  PairMetrics m;
  const LabelMap warped = warp_labels(p.labels_a, r.f12.value());
  m.dice_baseline = dice(p.labels_a, p.labels_b).mean;
  const auto d = dice(warped, p.labels_b);
  m.dice_mean = d.mean;
  m.dice_per_label = d.per_label;
  std::size_t labels = 0;
  for (const auto& [label, score] : d.per_label) {
    const bool in_w = std::find(warped.labels.begin(), warped.labels.end(), label) != warped.labels.end();
    const bool in_b = std::find(p.labels_b.labels.begin(), p.labels_b.labels.end(), label) != p.labels_b.labels.end();
    if (!in_w || !in_b) continue;
    m.hd95 += hd95(warped, p.labels_b, label);
    ++labels;
  }
  if (labels) m.hd95 /= static_cast<double>(labels);
  const Tensor<double> f12 = r.f12.value().template cast<double>();
  const std::size_t voxels = f12.size() / field_rank(f12.shape());
  const auto js = jacobian_stats(f12, jacobian_sample_count(voxels), 1e-7, opt.seed);
  m.folding_fraction = js.folding_fraction;
  m.det_std = js.det_std;
  if (opt.complete_samples) {
    const std::size_t n = field_rank(f12.shape());
    m.folding_complete = jacobian_stats_fn(complete_point_map(r), spatial_extent(f12.shape(), n), n,
                                           opt.complete_samples, 1e-6, opt.seed)
                             .folding_fraction;
  }
  if (opt.consistency) {
    const auto c = consistency_errors(b, p.x_a.template cast<T>(), p.x_b.template cast<T>(), opt.pipeline);
    m.inverse_err = c.inverse_err;
    m.cycle_err = c.cycle_err;
  }
  for (const auto& s : r.inversions) m.inversion_iterations.push_back(s.iterations);
  return m;
}

template <typename T>
MetricReport evaluate(const ModelWeights<T>& w, const std::vector<EvalPair>& pairs, const EvalOptions& opt = {}) {
  const auto b = bind_constant(w);
  MetricReport rep;
  for (const auto& p : pairs) rep.pairs.push_back(evaluate_pair(b, p, opt));
  return rep;
}

}  // namespace hwreg
