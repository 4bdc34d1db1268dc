#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "hwreg/autodiff.hpp"
#include "hwreg/conv.hpp"
#include "hwreg/error.hpp"
#include "hwreg/field.hpp"
#include "hwreg/spline.hpp"

namespace hwreg {

struct EncoderConfig {
  std::size_t dims = 2;
  std::size_t num_levels = 3;
  std::vector<std::size_t> channels{8, 16, 32};
  std::size_t kernel = 3;
  std::size_t res_blocks = 1;
  std::size_t in_channels = 1;
  double leaky_slope = 0.2;

  void validate() const {
    if (dims != 2 && dims != 3) throw ValidationError("EncoderConfig: dims must be 2 or 3");
    if (num_levels < 2) throw ValidationError("EncoderConfig: need at least 2 levels");
    if (channels.size() != num_levels)
      throw ValidationError("EncoderConfig: " + std::to_string(channels.size()) + " channel entries for " +
                            std::to_string(num_levels) + " levels");
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (channels[i] == 0) throw ValidationError("EncoderConfig: zero channels");
      if (i > 0 && channels[i] < channels[i - 1]) throw ValidationError("EncoderConfig: channels must not decrease");
    }
    if (kernel % 2 == 0) throw ValidationError("EncoderConfig: kernel must be odd");
    if (in_channels == 0) throw ValidationError("EncoderConfig: in_channels must be positive");
  }

  std::size_t divisor() const { return level_factor(num_levels - 1); }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"dims", c.dims},           {"num_levels", c.num_levels}, {"channels", c.channels},
       {"kernel", c.kernel},       {"res_blocks", c.res_blocks}, {"in_channels", c.in_channels},
       {"leaky_slope", c.leaky_slope}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  const EncoderConfig d;
  c.dims = j.value("dims", d.dims);
  c.num_levels = j.value("num_levels", d.num_levels);
  c.channels = j.value("channels", d.channels);
  c.kernel = j.value("kernel", d.kernel);
  c.res_blocks = j.value("res_blocks", d.res_blocks);
  c.in_channels = j.value("in_channels", d.in_channels);
  c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
}

/// Encoder and per-level predictor parameters, kept in creation order.
template <typename T>
struct ModelWeights {
  EncoderConfig config;
  std::vector<Parameter<T>> params;
  std::map<std::string, std::size_t> index;

  void add(std::string name, Tensor<T> value) {
    index[name] = params.size();
    params.emplace_back(std::move(name), std::move(value));
  }
  std::size_t find(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ValidationError("no parameter named " + name);
    return it->second;
  }
  Parameter<T>& at(const std::string& name) { return params[find(name)]; }
  const Parameter<T>& at(const std::string& name) const { return params[find(name)]; }

  std::size_t num_scalars() const {
    std::size_t s = 0;
    for (const auto& p : params) s += p.value.size();
    return s;
  }
  void zero_grad() {
    for (auto& p : params) p.zero_grad();
  }
  /// gamma^(k) for this model's dimensionality.
  double gamma(std::size_t k) const { return gamma_for_level(config.dims, k); }
};

/// Parameter values as Vars for one forward pass: recorded on `tape` when
/// given, constants otherwise. Entries may be swapped (e.g. for leaf checks).
template <typename T>
struct BoundWeights {
  const ModelWeights<T>* weights = nullptr;
  std::vector<Var<T>> vars;

  const Var<T>& operator[](const std::string& name) const { return vars[weights->find(name)]; }
  const EncoderConfig& config() const { return weights->config; }
};

template <typename T>
BoundWeights<T> bind(ModelWeights<T>& w, Tape<T>* tape) {
  BoundWeights<T> b{&w, {}};
  b.vars.reserve(w.params.size());
  for (auto& p : w.params) b.vars.push_back(tape ? tape->param(p) : Var<T>::constant(p.value));
  return b;
}

template <typename T>
BoundWeights<T> bind_constant(const ModelWeights<T>& w) {
  BoundWeights<T> b{&w, {}};
  for (const auto& p : w.params) b.vars.push_back(Var<T>::constant(p.value));
  return b;
}

namespace detail {

inline Shape kernel_shape(std::size_t cout, std::size_t cin, std::size_t k, std::size_t n) {
  Shape s{cout, cin};
  for (std::size_t i = 0; i < n; ++i) s.push_back(k);
  return s;
}

template <typename T>
Tensor<T> he_uniform(const Shape& s, std::mt19937_64& rng) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < s.size(); ++i) fan_in *= s[i];
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
void add_conv(ModelWeights<T>& w, const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
              std::mt19937_64& rng, bool zero = false) {
  const Shape s = kernel_shape(cout, cin, k, w.config.dims);
  w.add(name + ".w", zero ? Tensor<T>(s) : he_uniform<T>(s, rng));
  w.add(name + ".b", Tensor<T>({cout}));
}

template <typename T>
Var<T> conv(const BoundWeights<T>& b, const std::string& name, const Var<T>& x, int pad) {
  const std::size_t n = b.config().dims;
  return conv_nd(x, b[name + ".w"], b[name + ".b"], std::vector<int>(n, 1), std::vector<int>(n, pad));
}

template <typename T>
Var<T> act(const BoundWeights<T>& b, const Var<T>& x) {
  return leaky_relu(x, static_cast<T>(b.config().leaky_slope));
}

}  // namespace detail

/// Fresh weights: fan-in scaled uniform kernels, zero biases, and zero final
/// predictor kernels so every update starts as the identity.
template <typename T>
ModelWeights<T> init_weights(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelWeights<T> w;
  w.config = cfg;
  std::mt19937_64 rng(seed);
  const std::size_t k = cfg.kernel;
  for (std::size_t l = 0; l < cfg.num_levels; ++l) {
    const std::string p = "enc" + std::to_string(l);
    const std::size_t cin = l == 0 ? cfg.in_channels : cfg.channels[l - 1];
    detail::add_conv(w, p + ".in", cfg.channels[l], cin, k, rng);
    for (std::size_t r = 0; r < cfg.res_blocks; ++r) {
      detail::add_conv(w, p + ".res" + std::to_string(r) + ".a", cfg.channels[l], cfg.channels[l], k, rng);
      detail::add_conv(w, p + ".res" + std::to_string(r) + ".b", cfg.channels[l], cfg.channels[l], k, rng);
    }
  }
  for (std::size_t l = 0; l < cfg.num_levels; ++l) {
    const std::string p = "pred" + std::to_string(l);
    detail::add_conv(w, p + ".hidden", cfg.channels[l], 2 * cfg.channels[l], k, rng);
    detail::add_conv(w, p + ".out", cfg.dims, cfg.channels[l], 3, rng, true);
  }
  return w;
}

/// Features h^(0..K-1) of a [C, spatial...] volume. Level k is 2^k coarser.
template <typename T>
std::vector<Var<T>> extract_features(const BoundWeights<T>& b, const Var<T>& x) {
  const EncoderConfig& cfg = b.config();
  const std::size_t n = cfg.dims;
  if (x.shape().size() != n + 1 || x.dim(0) != cfg.in_channels)
    throw DimensionError("extract_features: expected [" + std::to_string(cfg.in_channels) + ", spatial...] with " +
                         std::to_string(n) + " spatial axes, got " + shape_string(x.shape()));
  for (std::size_t a = 1; a <= n; ++a)
    if (x.dim(a) % cfg.divisor() != 0)
      throw DimensionError("extract_features: spatial shape " + shape_string(x.shape()) + " not divisible by " +
                           std::to_string(cfg.divisor()));
  const int pad = static_cast<int>(cfg.kernel / 2);
  std::vector<Var<T>> out;
  Var<T> h = x;
  for (std::size_t l = 0; l < cfg.num_levels; ++l) {
    const std::string p = "enc" + std::to_string(l);
    if (l > 0) h = avg_pool(h, n, 2);
    h = detail::act(b, detail::conv(b, p + ".in", h, pad));
    for (std::size_t r = 0; r < cfg.res_blocks; ++r) {
      const std::string q = p + ".res" + std::to_string(r);
      auto t = detail::act(b, detail::conv(b, q + ".a", h, pad));
      h = detail::act(b, add(h, detail::conv(b, q + ".b", t, pad)));
    }
    out.push_back(h);
  }
  return out;
}

/// Control grid values [n, S+2, ...] from level-k features of both images,
/// bounded in magnitude by gamma^(k).
template <typename T>
Var<T> predict_control_grid(const BoundWeights<T>& b, std::size_t k, const Var<T>& z1, const Var<T>& z2) {
  const EncoderConfig& cfg = b.config();
  if (k >= cfg.num_levels) throw ValidationError("predict_control_grid: level " + std::to_string(k) + " out of range");
  if (z1.shape() != z2.shape())
    throw DimensionError("predict_control_grid: " + shape_string(z1.shape()) + " vs " + shape_string(z2.shape()));
  if (z1.shape().size() != cfg.dims + 1 || z1.dim(0) != cfg.channels[k])
    throw DimensionError("predict_control_grid: features " + shape_string(z1.shape()) + " do not match level " +
                         std::to_string(k));
  const std::string p = "pred" + std::to_string(k);
  auto in = concat_channels(sub(z1, z2), add(z1, z2));
  auto h = detail::act(b, detail::conv(b, p + ".hidden", in, static_cast<int>(cfg.kernel / 2)));
  auto raw = detail::conv(b, p + ".out", h, 2);
  return tanh_clamp(raw, static_cast<T>(b.weights->gamma(k)));
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest next to a little-endian f32 blob.

template <typename T>
void save_weights(const ModelWeights<T>& w, const std::string& path) {
  const std::string blob = path + ".bin";
  nlohmann::json m;
  m["format"] = "hwreg-weights";
  m["version"] = 1;
  m["config"] = w.config;
  m["blob"] = blob.substr(blob.find_last_of('/') + 1);
  std::ofstream bin(blob, std::ios::binary);
  if (!bin) throw IoError("cannot write " + blob);
  std::size_t offset = 0;
  for (const auto& p : w.params) {
    m["tensors"].push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const float f = static_cast<float>(p.value[i]);
      bin.write(reinterpret_cast<const char*>(&f), sizeof f);
    }
    offset += p.value.size();
  }
  if (!bin) throw IoError("short write to " + blob);
  std::ofstream js(path);
  if (!js) throw IoError("cannot write " + path);
  js << m.dump(2) << "\n";
}

template <typename T>
ModelWeights<T> load_weights(const std::string& path) {
  std::ifstream js(path);
  if (!js) throw IoError("cannot open " + path);
  nlohmann::json m;
  try {
    js >> m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
  if (m.value("format", "") != "hwreg-weights") throw IoError(path + ": not a weight manifest");
  ModelWeights<T> w = init_weights<T>(m.at("config").get<EncoderConfig>(), 0);
  const std::string dir = path.find('/') == std::string::npos ? "" : path.substr(0, path.find_last_of('/') + 1);
  const std::string blob = dir + m.at("blob").get<std::string>();
  std::ifstream bin(blob, std::ios::binary);
  if (!bin) throw IoError("cannot open " + blob);
  std::vector<float> data;
  float f;
  while (bin.read(reinterpret_cast<char*>(&f), sizeof f)) data.push_back(f);
  std::size_t seen = 0;
  for (const auto& t : m.at("tensors")) {
    auto& p = w.at(t.at("name").get<std::string>());
    const Shape shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::size_t>();
    if (shape != p.value.shape())
      throw IoError(path + ": tensor " + p.name + " has shape " + shape_string(shape) + ", config expects " +
                    shape_string(p.value.shape()));
    if (offset + p.value.size() > data.size()) throw IoError(blob + ": truncated at tensor " + p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(data[offset + i]);
    ++seen;
  }
  if (seen != w.params.size()) throw IoError(path + ": missing tensors");
  return w;
}

}  // namespace hwreg
