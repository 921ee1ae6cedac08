#pragma once

// Checkpoint container: an 8-byte magic, a little-endian u64 header length, a
// UTF-8 JSON header, then the raw little-endian float32 payload. For weight
// files the payload is, per layer, the row-major weight matrix followed by
// the bias vector.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fednia/nn.hpp"

namespace fednia {

inline constexpr char kWeightsMagic[8] = {'F', 'N', 'I', 'A', 'W', 'T', 'S', '1'};
inline constexpr char kProfilesMagic[8] = {'F', 'N', 'I', 'A', 'P', 'R', 'F', '1'};
inline constexpr int kWeightsFormatVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

template <class Scalar>
void put_le(std::string& out, Scalar v) {
  unsigned char buf[sizeof(Scalar)];
  std::memcpy(buf, &v, sizeof(Scalar));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(Scalar));
  out.append(reinterpret_cast<const char*>(buf), sizeof(Scalar));
}

template <class Scalar>
Scalar get_le(const unsigned char* p) {
  unsigned char buf[sizeof(Scalar)];
  std::memcpy(buf, p, sizeof(Scalar));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(Scalar));
  Scalar v;
  std::memcpy(&v, buf, sizeof(Scalar));
  return v;
}

inline std::string frame(const char (&magic)[8], const nlohmann::json& header, const std::string& payload) {
  std::string out(magic, 8);
  const std::string h = header.dump();
  put_u64_le(out, h.size());
  out += h;
  out += payload;
  return out;
}

struct Frame {
  nlohmann::json header;
  std::size_t payload_offset = 0;
};

inline Frame unframe(const char (&magic)[8], std::span<const unsigned char> bytes) {
  require(bytes.size() >= 16, ErrorKind::Format, "container truncated at byte 0");
  require(std::memcmp(bytes.data(), magic, 8) == 0, ErrorKind::Format, "bad magic at byte 0");
  const std::uint64_t hlen = get_u64_le(bytes.data() + 8);
  require(hlen <= bytes.size() - 16, ErrorKind::Format, "header truncated at byte 16");
  Frame f;
  try {
    f.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed header JSON at byte 16: ") + e.what());
  }
  f.payload_offset = 16 + hlen;
  return f;
}

}  // namespace detail

inline nlohmann::json specs_to_json(std::span<const LayerSpec> specs) {
  auto arr = nlohmann::json::array();
  for (const auto& s : specs)
    arr.push_back({{"input_size", s.input_size}, {"output_size", s.output_size}, {"activation", to_string(s.activation)}});
  return arr;
}

inline std::vector<LayerSpec> specs_from_json(const nlohmann::json& arr) {
  std::vector<LayerSpec> specs;
  for (const auto& j : arr)
    specs.push_back({j.at("input_size").get<std::size_t>(), j.at("output_size").get<std::size_t>(),
                     activation_from_string(j.at("activation").get<std::string>())});
  return specs;
}

inline std::string encode_weights(const WeightSet& w, std::uint64_t seed = 0) {
  nlohmann::json header = {{"format", "fednia-weights"},
                           {"version", kWeightsFormatVersion},
                           {"seed", seed},
                           {"dtype", "float32"},
                           {"layers", specs_to_json(w.specs())}};
  std::string payload;
  payload.reserve(w.parameter_count() * sizeof(float));
  for (const auto& l : w.layers) {
    for (Eigen::Index i = 0; i < l.weights.size(); ++i) detail::put_le(payload, l.weights.data()[i]);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) detail::put_le(payload, l.bias.data()[i]);
  }
  return detail::frame(kWeightsMagic, header, payload);
}

struct DecodedWeights {
  WeightSet weights;
  std::uint64_t seed = 0;
};

inline DecodedWeights decode_weights(std::span<const unsigned char> bytes) {
  const auto f = detail::unframe(kWeightsMagic, bytes);
  DecodedWeights out;
  std::vector<LayerSpec> specs;
  try {
    require(f.header.at("version").get<int>() == kWeightsFormatVersion, ErrorKind::Format, "unsupported version");
    out.seed = f.header.at("seed").get<std::uint64_t>();
    specs = specs_from_json(f.header.at("layers"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("bad weights header: ") + e.what());
  }
  validate_specs(specs);
  std::size_t offset = f.payload_offset;
  for (const auto& s : specs) {
    DenseLayer layer{s, Matrix(s.output_size, s.input_size), Vector(s.output_size)};
    const std::size_t need = (s.output_size * s.input_size + s.output_size) * sizeof(float);
    require(offset + need <= bytes.size(), ErrorKind::Format, "payload truncated at byte " + std::to_string(offset));
    for (Eigen::Index i = 0; i < layer.weights.size(); ++i, offset += 4)
      layer.weights.data()[i] = detail::get_le<float>(bytes.data() + offset);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i, offset += 4)
      layer.bias.data()[i] = detail::get_le<float>(bytes.data() + offset);
    out.weights.layers.push_back(std::move(layer));
  }
  require(offset == bytes.size(), ErrorKind::Format, "trailing bytes after payload at byte " + std::to_string(offset));
  return out;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
}

inline void save_weights(const std::filesystem::path& path, const WeightSet& w, std::uint64_t seed = 0) {
  write_file_bytes(path, encode_weights(w, seed));
}

inline DecodedWeights load_weights(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_weights(bytes);
}

/// Raw activation profiles (one row per model) for offline analysis. The
/// payload is float64 little-endian, row-major [rows x length].
inline std::string encode_profiles(std::span<const ActivationProfile> rows, const nlohmann::json& labels) {
  nlohmann::json header = {{"format", "fednia-profiles"}, {"version", 1}, {"dtype", "float64"}, {"rows", rows.size()}};
  header["length"] = rows.empty() ? 0 : rows.front().size();
  auto seg = nlohmann::json::array();
  if (!rows.empty())
    for (const auto& s : rows.front().layer_offsets) seg.push_back({s.start, s.length});
  header["layer_offsets"] = seg;
  header["labels"] = labels;
  std::string payload;
  for (const auto& p : rows)
    for (double v : p.values) detail::put_le(payload, v);
  return detail::frame(kProfilesMagic, header, payload);
}

}  // namespace fednia
