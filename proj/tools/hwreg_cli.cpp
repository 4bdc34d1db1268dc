#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "hwreg/io.hpp"
#include "hwreg/metrics.hpp"
#include "hwreg/parallel.hpp"
#include "hwreg/pipeline.hpp"
#include "hwreg/spline.hpp"
#include "hwreg/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace hwreg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitConvergence = 3;
constexpr int kExitOther = 1;

struct Global {
  std::uint64_t seed = 0;
  int threads = 0;
  std::string dtype = "f32";
};

std::string fmt(double v, int precision = 9) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// bounds

struct BoundsArgs {
  std::size_t max_level = 8;
  std::string csv;
};

int run_bounds(const BoundsArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::vector<std::string>> rows;
  std::printf("%-3s %-14s %-14s %-14s %-14s\n", "k", "K2", "K3", "gamma2", "gamma3");
  for (std::size_t k = 0; k <= a.max_level; ++k) {
    const double k2 = compute_K(2, k), k3 = compute_K(3, k);
    std::printf("%-3zu %-14.9f %-14.9f %-14.9f %-14.9f\n", k, k2, k3, 0.99 / k2, 0.99 / k3);
    rows.push_back({std::to_string(k), fmt(k2, 12), fmt(k3, 12), fmt(0.99 / k2, 12), fmt(0.99 / k3, 12)});
  }
  if (!a.csv.empty()) write_csv(a.csv, {"k", "K2", "K3", "gamma2", "gamma3"}, rows);
  std::printf("seconds %.2f\n", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out_dir;
  std::size_t count = 1;
  std::size_t size = 64;
  std::size_t dims = 2;
  bool validation = false;
};

int run_synth(const Global& g, const SynthArgs& a) {
  SynthConfig c;
  c.size = a.size;
  c.dims = a.dims;
  fs::create_directories(a.out_dir);
  for (std::size_t i = 0; i < a.count; ++i) {
    const auto seed = a.validation ? validation_pair_seed(g.seed, i) : train_pair_seed(g.seed, i);
    const auto p = synth_pair(seed, c);
    const std::string stem = (fs::path(a.out_dir) / ("pair" + std::to_string(i))).string();
    write_volume(stem + "_a", p.x_a.cast<float>());
    write_volume(stem + "_b", p.x_b.cast<float>());
    write_labels(stem + "_a_labels", p.labels_a);
    write_labels(stem + "_b_labels", p.labels_b);
    write_field(stem + "_g_true", p.g_true.cast<float>());
    if (c.dims == 2) {
      write_slice_pgm(stem + "_a.pgm", p.x_a.cast<float>());
      write_slice_pgm(stem + "_b.pgm", p.x_b.cast<float>());
    }
  }
  std::printf("wrote %zu pairs to %s\n", a.count, a.out_dir.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string out_dir = "run";
  long steps = -1;
  std::string mode;
};

template <typename T>
int run_train(const Global& g, const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) {
    try {
      cfg = read_json(a.config).get<TrainConfig>();
    } catch (const json::exception& e) {
      throw ValidationError(a.config + ": " + e.what());
    }
  }
  cfg.seed = g.seed;
  if (a.steps >= 0) cfg.steps = static_cast<std::size_t>(a.steps);
  if (!a.mode.empty()) cfg.pipeline.mode = parse_mode(a.mode);
  cfg.encoder.dims = cfg.synth.dims;
  cfg.validate();
  fs::create_directories(a.out_dir);
  write_json((fs::path(a.out_dir) / "config.json").string(), cfg);

  auto hook = [&](std::size_t step, const ModelWeights<T>& w) {
    save_weights(w, (fs::path(a.out_dir) / ("checkpoint_" + std::to_string(step) + ".json")).string());
  };
  auto log = [](const std::string& line) { std::printf("%s\n", line.c_str()); std::fflush(stdout); };
  const auto r = train<T>(cfg, hook, log);
  save_weights(r.weights, (fs::path(a.out_dir) / "weights.json").string());
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < r.loss_history.size(); ++i) rows.push_back({std::to_string(i + 1), fmt(r.loss_history[i])});
  write_csv((fs::path(a.out_dir) / "loss.csv").string(), {"step", "loss"}, rows);
  std::printf("trained %zu steps in %.1f s, weights in %s\n", cfg.steps, r.seconds, a.out_dir.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// register

struct RegisterArgs {
  std::string weights, a, b, out;
  std::string mode = "sym";
  std::string variant = "standard";
};

// Dense field from the complete variant, sampled at the voxel centres.
template <typename T>
Tensor<float> complete_field(const RegistrationResult<T>& r, const Shape& field_shape, bool forward) {
  const std::size_t n = field_rank(field_shape);
  const Extent3 e = spatial_extent(field_shape, n);
  std::vector<Point> pts(e.size());
  for (std::size_t p = 0; p < e.size(); ++p) {
    const auto q = detail::unravel(p, e);
    pts[p] = {double(q[0]), double(q[1]), double(q[2])};
  }
  const auto d = infer_complete(r, pts, forward);
  Tensor<float> out(field_shape);
  for (std::size_t p = 0; p < e.size(); ++p)
    for (std::size_t c = 0; c < n; ++c) out[c * e.size() + p] = static_cast<float>(d[p][3 - n + c]);
  return out;
}

template <typename T>
int run_register(const RegisterArgs& a) {
  if (a.variant != "standard" && a.variant != "complete")
    throw ValidationError("unknown variant '" + a.variant + "' (expected standard or complete)");
  const auto w = load_weights<T>(a.weights);
  const auto xa = read_volume(a.a), xb = read_volume(a.b);
  PipelineConfig cfg;
  cfg.mode = parse_mode(a.mode);
  const auto b = bind_constant(w);
  const auto r = register_images(b, Var<T>::constant(xa.cast<T>()), Var<T>::constant(xb.cast<T>()), cfg);
  Tensor<float> f12, f21;
  if (a.variant == "complete") {
    f12 = complete_field(r, r.f12.shape(), true);
    f21 = complete_field(r, r.f21.shape(), false);
  } else {
    f12 = r.f12.value().template cast<float>();
    f21 = r.f21.value().template cast<float>();
  }
  write_field(a.out + "_f12", f12);
  write_field(a.out + "_f21", f21);
  const auto warped = warp_image(xa, f12);
  write_volume(a.out + "_a_warped", warped);
  if (xa.rank() == 3) write_slice_pgm(a.out + "_a_warped.pgm", warped);
  int iters = 0;
  for (const auto& s : r.inversions) iters = std::max(iters, s.iterations);
  std::printf("mode %s variant %s max inversion iterations %d\n", mode_name(cfg.mode), a.variant.c_str(), iters);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// invert

struct InvertArgs {
  std::string field, out, report;
  double tol = 0.01;
  int max_iter = 50;
};

template <typename T>
int run_invert(const InvertArgs& a) {
  FixedPointConfig cfg;
  cfg.tol = a.tol;
  cfg.max_iter = a.max_iter;
  const auto d = read_field(a.field).cast<T>();
  const auto r = fixed_point_invert(d, cfg);
  write_field(a.out, r.inverse.template cast<float>());
  const auto check = compose(d, r.inverse).template cast<double>();
  const json rep{{"iterations", r.stats.iterations},
                 {"residual", r.stats.residual},
                 {"anderson_fallbacks", r.stats.fallbacks},
                 {"tol", cfg.tol},
                 {"max_abs_composition", check.max_abs()}};
  if (!a.report.empty()) write_json(a.report, rep);
  std::printf("%s\n", rep.dump().c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string weights;
  std::vector<std::string> pairs;  // stems written by `synth`
  std::size_t synthetic = 0;
  std::string csv;
  std::string mode = "sym";
  std::size_t complete_samples = 0;
  std::size_t n_perm = 10000;
};

const std::vector<std::string> kReportColumns{
    "pair",      "dice_baseline", "dice",      "hd95",      "folding_fraction", "folding_complete",
    "det_std",   "inverse_err",   "cycle_err", "max_inversion_iterations"};

template <typename T>
int run_evaluate(const Global& g, const EvaluateArgs& a) {
  const auto w = load_weights<T>(a.weights);
  std::vector<EvalPair> pairs;
  for (const auto& stem : a.pairs)
    pairs.push_back({read_volume(stem + "_a").cast<double>(), read_volume(stem + "_b").cast<double>(),
                     read_labels(stem + "_a_labels"), read_labels(stem + "_b_labels")});
  SynthConfig sc;
  sc.dims = w.config.dims;
  for (std::size_t i = 0; i < a.synthetic; ++i) {
    auto p = synth_pair(validation_pair_seed(g.seed, i), sc);
    pairs.push_back({std::move(p.x_a), std::move(p.x_b), std::move(p.labels_a), std::move(p.labels_b)});
  }
  if (pairs.empty()) throw ValidationError("evaluate: no pairs given (use --pair or --synthetic)");
  EvalOptions opt;
  opt.pipeline.mode = parse_mode(a.mode);
  opt.complete_samples = a.complete_samples;
  opt.seed = g.seed;
  const auto rep = evaluate(w, pairs, opt);

  std::vector<std::vector<std::string>> rows;
  std::vector<double> base, reg;
  for (std::size_t i = 0; i < rep.pairs.size(); ++i) {
    const auto& m = rep.pairs[i];
    int iters = 0;
    for (int it : m.inversion_iterations) iters = std::max(iters, it);
    rows.push_back({std::to_string(i), fmt(m.dice_baseline), fmt(m.dice_mean), fmt(m.hd95), fmt(m.folding_fraction),
                    fmt(m.folding_complete), fmt(m.det_std), fmt(m.inverse_err), fmt(m.cycle_err),
                    std::to_string(iters)});
    base.push_back(m.dice_baseline);
    reg.push_back(m.dice_mean);
  }
  if (!a.csv.empty()) write_csv(a.csv, kReportColumns, rows);
  auto show = [&](const char* name, auto get) {
    const auto s = rep.column(get);
    std::printf("%-18s %.6g +- %.3g\n", name, s.mean, s.std);
  };
  show("dice_baseline", [](const PairMetrics& m) { return m.dice_baseline; });
  show("dice", [](const PairMetrics& m) { return m.dice_mean; });
  show("hd95", [](const PairMetrics& m) { return m.hd95; });
  show("folding_fraction", [](const PairMetrics& m) { return m.folding_fraction; });
  if (a.complete_samples) show("folding_complete", [](const PairMetrics& m) { return m.folding_complete; });
  show("det_std", [](const PairMetrics& m) { return m.det_std; });
  show("inverse_err", [](const PairMetrics& m) { return m.inverse_err; });
  show("cycle_err", [](const PairMetrics& m) { return m.cycle_err; });
  std::printf("p_dice_vs_baseline %.6g\n", permutation_test(reg, base, a.n_perm, g.seed));
  return kExitOk;
}

template <typename F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const ConvergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConvergence;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitOther;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hwreg deformable image registration"};
  app.require_subcommand(1);
  Global g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "OpenMP threads (0: runtime default)")->check(CLI::NonNegativeNumber);
  app.add_option("--dtype", g.dtype, "Compute precision")->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();

  BoundsArgs bounds;
  auto* cb = app.add_subcommand("bounds", "Print the spline Lipschitz bound table");
  cb->add_option("--max-level", bounds.max_level)->capture_default_str();
  cb->add_option("--csv", bounds.csv, "Also write the table as CSV");

  SynthArgs synth;
  auto* cs = app.add_subcommand("synth", "Write synthetic image pairs with labels and ground-truth warps");
  cs->add_option("--out-dir", synth.out_dir)->required();
  cs->add_option("--count", synth.count)->capture_default_str();
  cs->add_option("--size", synth.size)->capture_default_str();
  cs->add_option("--dims", synth.dims)->check(CLI::IsMember({2, 3}))->capture_default_str();
  cs->add_flag("--validation", synth.validation, "Use the held-out seed range");

  TrainArgs tr;
  auto* ct = app.add_subcommand("train", "Train on synthetic pairs");
  ct->add_option("--config", tr.config, "JSON training config (missing keys use defaults)");
  ct->add_option("--out-dir", tr.out_dir)->capture_default_str();
  ct->add_option("--steps", tr.steps, "Override the step count");
  ct->add_option("--mode", tr.mode, "sym or non-sym");

  RegisterArgs rg;
  auto* cr = app.add_subcommand("register", "Register two volumes in both directions");
  cr->add_option("--weights", rg.weights)->required();
  cr->add_option("--a", rg.a, "Moving volume")->required();
  cr->add_option("--b", rg.b, "Fixed volume")->required();
  cr->add_option("--out", rg.out, "Output stem")->required();
  cr->add_option("--mode", rg.mode)->capture_default_str();
  cr->add_option("--variant", rg.variant, "standard or complete")->capture_default_str();

  InvertArgs iv;
  auto* ci = app.add_subcommand("invert", "Invert a displacement field by fixed-point iteration");
  ci->add_option("--field", iv.field)->required();
  ci->add_option("--out", iv.out)->required();
  ci->add_option("--report", iv.report, "JSON convergence report");
  ci->add_option("--tol", iv.tol)->capture_default_str();
  ci->add_option("--max-iter", iv.max_iter)->capture_default_str();

  EvaluateArgs ev;
  auto* ce = app.add_subcommand("evaluate", "Metric report for a set of pairs");
  ce->add_option("--weights", ev.weights)->required();
  ce->add_option("--pair", ev.pairs, "Pair stem written by synth (repeatable)");
  ce->add_option("--synthetic", ev.synthetic, "Number of held-out synthetic pairs");
  ce->add_option("--csv", ev.csv, "Per-pair CSV output");
  ce->add_option("--mode", ev.mode)->capture_default_str();
  ce->add_option("--complete-samples", ev.complete_samples, "Points for the complete-variant folding check");
  ce->add_option("--n-perm", ev.n_perm)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }
  set_num_threads(g.threads);
  const bool f64 = g.dtype == "f64";

  return guarded([&] {
    if (*cb) return run_bounds(bounds);
    if (*cs) return run_synth(g, synth);
    if (*ct) return f64 ? run_train<double>(g, tr) : run_train<float>(g, tr);
    if (*cr) return f64 ? run_register<double>(rg) : run_register<float>(rg);
    if (*ci) return f64 ? run_invert<double>(iv) : run_invert<float>(iv);
    return f64 ? run_evaluate<double>(g, ev) : run_evaluate<float>(g, ev);
  });
}
