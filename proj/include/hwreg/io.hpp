#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hwreg/error.hpp"
#include "hwreg/field.hpp"
#include "hwreg/tensor.hpp"

// On-disk layout: <stem>.json header plus <stem>.bin little-endian row-major
// blob. Header: {"kind", "shape" (spatial), "channels", "dtype", "spacing"}.

namespace hwreg {

namespace detail {

inline std::string io_stem(const std::string& path) {
  if (path.size() > 5 && path.compare(path.size() - 5, 5, ".json") == 0) return path.substr(0, path.size() - 5);
  if (path.size() > 4 && path.compare(path.size() - 4, 4, ".bin") == 0) return path.substr(0, path.size() - 4);
  return path;
}

inline void check_little_endian() {
  const std::uint16_t probe = 1;
  unsigned char b;
  std::memcpy(&b, &probe, 1);
  if (b != 1) throw IoError("big-endian hosts are not supported");
}

template <typename V>
void write_blob(const std::string& stem, const nlohmann::json& header, const std::vector<V>& data) {
  check_little_endian();
  {
    std::ofstream js(stem + ".json");
    if (!js) throw IoError("cannot write " + stem + ".json");
    js << header.dump(2) << "\n";
  }
  std::ofstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw IoError("cannot write " + stem + ".bin");
  bin.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(V)));
  if (!bin) throw IoError("short write to " + stem + ".bin");
}

struct Header {
  std::string kind, dtype;
  Shape shape;
  std::size_t channels = 1;
  std::vector<double> spacing;
};

inline Header read_header(const std::string& stem) {
  std::ifstream js(stem + ".json");
  if (!js) throw IoError("cannot open " + stem + ".json");
  Header h;
  try {
    nlohmann::json j;
    js >> j;
    h.kind = j.value("kind", "volume");
    h.dtype = j.at("dtype").get<std::string>();
    h.shape = j.at("shape").get<Shape>();
    h.channels = j.value("channels", std::size_t{1});
    h.spacing = j.value("spacing", std::vector<double>(h.shape.size(), 1.0));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(stem + ".json: malformed header (" + e.what() + ")");
  }
  if (h.shape.empty() || h.shape.size() > 3) throw IoError(stem + ".json: shape must have 1 to 3 axes");
  return h;
}

template <typename V>
std::vector<V> read_blob(const std::string& stem, std::size_t count) {
  check_little_endian();
  std::ifstream bin(stem + ".bin", std::ios::binary | std::ios::ate);
  if (!bin) throw IoError("cannot open " + stem + ".bin");
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  if (bytes != count * sizeof(V))
    throw IoError(stem + ".bin: expected " + std::to_string(count * sizeof(V)) + " bytes for the header shape, found " +
                  std::to_string(bytes));
  bin.seekg(0);
  std::vector<V> data(count);
  bin.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
  if (!bin) throw IoError(stem + ".bin: read failed");
  return data;
}

inline nlohmann::json make_header(const char* kind, const char* dtype, const Shape& spatial, std::size_t channels,
                                  std::vector<double> spacing) {
  if (spacing.empty()) spacing.assign(spatial.size(), 1.0);
  return {{"kind", kind}, {"shape", spatial}, {"channels", channels}, {"dtype", dtype}, {"spacing", spacing}};
}

}  // namespace detail

/// Writes a [C, spatial...] tensor as f32.
inline void write_volume(const std::string& path, const Tensor<float>& v, std::vector<double> spacing = {},
                         const char* kind = "volume") {
  if (v.rank() < 2) throw DimensionError("write_volume: expected [C, spatial...], got " + shape_string(v.shape()));
  const Shape spatial(v.shape().begin() + 1, v.shape().end());
  detail::write_blob(detail::io_stem(path), detail::make_header(kind, "f32", spatial, v.dim(0), std::move(spacing)),
                     v.storage());
}

inline Tensor<float> read_volume(const std::string& path) {
  const std::string stem = detail::io_stem(path);
  const auto h = detail::read_header(stem);
  if (h.dtype != "f32") throw IoError(stem + ".json: expected dtype f32, found " + h.dtype);
  Shape s{h.channels};
  s.insert(s.end(), h.shape.begin(), h.shape.end());
  return Tensor<float>(s, detail::read_blob<float>(stem, shape_size(s)));
}

inline void write_field(const std::string& path, const Tensor<float>& d, std::vector<double> spacing = {}) {
  field_rank(d.shape());
  write_volume(path, d, std::move(spacing), "field");
}

inline Tensor<float> read_field(const std::string& path) {
  auto t = read_volume(path);
  field_rank(t.shape());
  return t;
}

inline void write_labels(const std::string& path, const LabelMap& m, std::vector<double> spacing = {}) {
  detail::write_blob(detail::io_stem(path), detail::make_header("labels", "u16", m.shape, 1, std::move(spacing)),
                     m.labels);
}

inline LabelMap read_labels(const std::string& path) {
  const std::string stem = detail::io_stem(path);
  const auto h = detail::read_header(stem);
  if (h.dtype != "u16") throw IoError(stem + ".json: expected dtype u16, found " + h.dtype);
  if (h.channels != 1) throw IoError(stem + ".json: label maps have one channel");
  return LabelMap(h.shape, detail::read_blob<std::uint16_t>(stem, shape_size(h.shape)));
}

/// 8-bit binary PGM of one 2-D slice (channel 0), min-max scaled. For 3-D
/// volumes `slice` indexes the leading spatial axis.
inline void write_slice_pgm(const std::string& path, const Tensor<float>& v, std::size_t slice = 0) {
  const std::size_t n = v.rank() - 1;
  if (n != 2 && n != 3) throw DimensionError("write_slice_pgm: expected 2-D or 3-D volume");
  const Extent3 e = spatial_extent(v.shape(), n);
  if (slice >= e.d) throw ValidationError("write_slice_pgm: slice " + std::to_string(slice) + " out of range");
  const float* src = v.data() + slice * e.h * e.w;
  const auto [lo, hi] = std::minmax_element(src, src + e.h * e.w);
  const float range = *hi - *lo;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "P5\n" << e.w << " " << e.h << "\n255\n";
  for (std::size_t i = 0; i < e.h * e.w; ++i) {
    const float t = range > 0 ? (src[i] - *lo) / range : 0.0f;
    out.put(static_cast<char>(static_cast<unsigned char>(std::clamp(t, 0.0f, 1.0f) * 255.0f + 0.5f)));
  }
  if (!out) throw IoError("short write to " + path);
}

/// Comma-separated table with a header row; cells are written as given.
inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << "\n";
  };
  line(header);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw ValidationError("write_csv: row width does not match header");
    line(r);
  }
}

}  // namespace hwreg
