#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fednia/common.hpp"
#include "fednia/nn.hpp"
#include "fednia/serialize.hpp"

namespace fednia {

/// Samples are stored one per row with pixels in [0, 1].
struct LabeledDataset {
  Matrix samples;
  std::vector<int> labels;
  int num_classes = 10;
  std::size_t image_rows = 0;  // 0 when the data is not an image grid
  std::size_t image_cols = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t features() const { return static_cast<std::size_t>(samples.cols()); }

  void validate() const {
    require(static_cast<std::size_t>(samples.rows()) == labels.size(), ErrorKind::Input,
            "sample rows and label count differ");
    require(num_classes >= 1, ErrorKind::Input, "num_classes must be positive");
    for (int y : labels)
      require(y >= 0 && y < num_classes, ErrorKind::Input, "label " + std::to_string(y) + " outside [0, num_classes)");
    require(samples.allFinite() && (samples.size() == 0 || (samples.minCoeff() >= 0.f && samples.maxCoeff() <= 1.f)),
            ErrorKind::Input, "pixels must be finite and within [0, 1]");
  }

  friend bool operator==(const LabeledDataset& a, const LabeledDataset& b) {
    return a.labels == b.labels && a.num_classes == b.num_classes && a.samples.rows() == b.samples.rows() &&
           a.samples.cols() == b.samples.cols() && a.samples == b.samples;
  }
};

inline LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> rows) {
  LabeledDataset out{gather_rows(ds.samples, rows), {}, ds.num_classes, ds.image_rows, ds.image_cols};
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) out.labels.push_back(ds.labels[r]);
  return out;
}

inline LabeledDataset head(const LabeledDataset& ds, std::size_t n) {
  std::vector<std::size_t> rows(std::min(n, ds.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return subset(ds, rows);
}

// ---------------------------------------------------------------------------
// IDX container: big-endian u32 magic (0x00 0x00 type ndims), big-endian u32
// dimension sizes, then unsigned-byte payload.

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::uint32_t read_be32(std::span<const unsigned char> bytes, std::size_t offset, const std::string& what) {
  require(offset + 4 <= bytes.size(), ErrorKind::Format, what + ": truncated header at byte " + std::to_string(offset));
  return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
         (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

inline void write_be32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v >> 24));
  out.push_back(static_cast<char>(v >> 16));
  out.push_back(static_cast<char>(v >> 8));
  out.push_back(static_cast<char>(v));
}

}  // namespace detail

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::span<const unsigned char> pixels;
};

inline IdxImages parse_idx_images(std::span<const unsigned char> bytes, const std::string& name = "images") {
  const auto magic = detail::read_be32(bytes, 0, name);
  require(magic == kIdxImageMagic, ErrorKind::Format, name + ": bad magic at byte 0");
  IdxImages img;
  img.count = detail::read_be32(bytes, 4, name);
  img.rows = detail::read_be32(bytes, 8, name);
  img.cols = detail::read_be32(bytes, 12, name);
  const std::size_t need = img.count * img.rows * img.cols;
  require(bytes.size() - 16 >= need, ErrorKind::Format,
          name + ": payload truncated at byte " + std::to_string(bytes.size()) + " (expected " +
              std::to_string(16 + need) + ")");
  img.pixels = bytes.subspan(16, need);
  return img;
}

inline std::span<const unsigned char> parse_idx_labels(std::span<const unsigned char> bytes,
                                                       const std::string& name = "labels") {
  const auto magic = detail::read_be32(bytes, 0, name);
  require(magic == kIdxLabelMagic, ErrorKind::Format, name + ": bad magic at byte 0");
  const std::size_t count = detail::read_be32(bytes, 4, name);
  require(bytes.size() - 8 >= count, ErrorKind::Format,
          name + ": payload truncated at byte " + std::to_string(bytes.size()) + " (expected " +
              std::to_string(8 + count) + ")");
  return bytes.subspan(8, count);
}

inline LabeledDataset decode_idx(std::span<const unsigned char> image_bytes, std::span<const unsigned char> label_bytes,
                                 int num_classes = 10) {
  const auto img = parse_idx_images(image_bytes);
  const auto lab = parse_idx_labels(label_bytes);
  require(img.count == lab.size(), ErrorKind::Format,
          "count mismatch: " + std::to_string(img.count) + " images vs " + std::to_string(lab.size()) +
              " labels (label header byte 4)");
  LabeledDataset ds;
  ds.num_classes = num_classes;
  ds.image_rows = img.rows;
  ds.image_cols = img.cols;
  const std::size_t n = img.rows * img.cols;
  ds.samples.resize(static_cast<Eigen::Index>(img.count), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < img.count * n; ++i) ds.samples.data()[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  ds.labels.reserve(img.count);
  for (std::size_t i = 0; i < lab.size(); ++i) {
    require(lab[i] < num_classes, ErrorKind::Format,
            "label " + std::to_string(lab[i]) + " >= num_classes at byte " + std::to_string(8 + i));
    ds.labels.push_back(lab[i]);
  }
  return ds;
}

inline LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                               int num_classes = 10) {
  const auto images = read_file_bytes(images_path);
  const auto labels = read_file_bytes(labels_path);
  try {
    return decode_idx(images, labels, num_classes);
  } catch (const Error& e) {
    fail(e.kind(), std::string(e.what()) + " [" + images_path.string() + ", " + labels_path.string() + "]");
  }
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(static_cast<double>(v) * 255.0), 0L, 255L));
}

inline std::pair<std::string, std::string> encode_idx(const LabeledDataset& ds) {
  const std::size_t rows = ds.image_rows ? ds.image_rows : 1;
  const std::size_t cols = ds.image_cols ? ds.image_cols : ds.features();
  require(rows * cols == ds.features(), ErrorKind::Shape, "image grid does not match feature count");
  std::string images, labels;
  detail::write_be32(images, kIdxImageMagic);
  detail::write_be32(images, static_cast<std::uint32_t>(ds.size()));
  detail::write_be32(images, static_cast<std::uint32_t>(rows));
  detail::write_be32(images, static_cast<std::uint32_t>(cols));
  images.reserve(16 + ds.size() * ds.features());
  for (Eigen::Index i = 0; i < ds.samples.size(); ++i) images.push_back(static_cast<char>(to_byte(ds.samples.data()[i])));
  detail::write_be32(labels, kIdxLabelMagic);
  detail::write_be32(labels, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) labels.push_back(static_cast<char>(y));
  return {images, labels};
}

inline void save_idx(const LabeledDataset& ds, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  const auto [images, labels] = encode_idx(ds);
  write_file_bytes(images_path, images);
  write_file_bytes(labels_path, labels);
}

// ---------------------------------------------------------------------------
// Partitioning

enum class PartitionScheme { UniformRandom, LabelSkew };

struct PartitionPlan {
  std::size_t num_clients = 2;
  std::uint64_t seed = 0;
  PartitionScheme scheme = PartitionScheme::UniformRandom;
  std::size_t classes_per_client = 2;  // LabelSkew only
};

/// Sample indices per client, each list of size floor(m / num_clients). The
/// remainder is dropped. Indices are disjoint across clients.
inline std::vector<std::vector<std::size_t>> partition_indices(const LabeledDataset& ds, const PartitionPlan& plan) {
  const std::size_t m = ds.size();
  require(plan.num_clients >= 2, ErrorKind::Config, "partition needs at least 2 clients");
  require(m >= plan.num_clients, ErrorKind::Config,
          "dataset has " + std::to_string(m) + " samples for " + std::to_string(plan.num_clients) + " clients");
  const std::size_t per_client = m / plan.num_clients;
  std::vector<std::vector<std::size_t>> parts(plan.num_clients);

  if (plan.scheme == PartitionScheme::UniformRandom) {
    const auto order = permutation(m, derive_seed(plan.seed, "partition"));
    for (std::size_t c = 0; c < plan.num_clients; ++c)
      parts[c].assign(order.begin() + static_cast<std::ptrdiff_t>(c * per_client),
                      order.begin() + static_cast<std::ptrdiff_t>((c + 1) * per_client));
    return parts;
  }

  // LabelSkew: client c draws round-robin from classes (c*k + j) mod C, j < k.
  const auto C = static_cast<std::size_t>(ds.num_classes);
  const std::size_t k = plan.classes_per_client;
  require(k >= 1 && k <= C, ErrorKind::Config, "classes_per_client must lie in [1, num_classes]");
  std::vector<std::vector<std::size_t>> pools(C);
  for (std::size_t i : permutation(m, derive_seed(plan.seed, "partition")))
    pools[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  std::vector<std::size_t> cursor(C, 0);
  for (std::size_t c = 0; c < plan.num_clients; ++c) {
    std::vector<std::size_t> classes;
    for (std::size_t j = 0; j < k; ++j) classes.push_back((c * k + j) % C);
    std::size_t exhausted = 0;
    for (std::size_t t = 0; parts[c].size() < per_client; ++t) {
      const std::size_t cls = classes[t % k];
      if (cursor[cls] < pools[cls].size()) {
        parts[c].push_back(pools[cls][cursor[cls]++]);
        exhausted = 0;
      } else if (++exhausted >= k) {
        fail(ErrorKind::Config, "label-skew partition ran out of samples for client " + std::to_string(c));
      }
    }
  }
  return parts;
}

inline std::vector<LabeledDataset> partition(const LabeledDataset& ds, const PartitionPlan& plan) {
  std::vector<LabeledDataset> out;
  for (const auto& idx : partition_indices(ds, plan)) out.push_back(subset(ds, idx));
  return out;
}

struct Batch {
  Matrix samples;
  std::vector<int> labels;
};

/// Shuffled mini-batches; the last one may be partial.
inline std::vector<Batch> batches(const LabeledDataset& ds, std::size_t batch_size, std::uint64_t seed) {
  std::vector<Batch> out;
  for (const auto& idx : batch_plan(ds.size(), batch_size, seed)) {
    Batch b{gather_rows(ds.samples, idx), {}};
    for (std::size_t i : idx) b.labels.push_back(ds.labels[i]);
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<std::size_t> class_counts(const LabeledDataset& ds) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(ds.num_classes), 0);
  for (int y : ds.labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

}  // namespace fednia
