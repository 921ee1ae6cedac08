#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "fednia/fednia.hpp"

namespace fednia::testing {

/// Random weights of the given architecture in (-scale, scale), scalar T.
template <class T = float>
BasicWeightSet<T> random_weights(std::span<const LayerSpec> specs, std::uint64_t seed, double scale = 1.0) {
  auto w = init_weights<T>(specs, seed);
  Rng rng(derive_seed(seed, "test-bias"));
  for (auto& l : w.layers) {
    for (Eigen::Index i = 0; i < l.weights.size(); ++i) l.weights.data()[i] = static_cast<T>(rng.uniform(-scale, scale));
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = static_cast<T>(rng.uniform(-scale, scale));
  }
  return w;
}

template <class T = float>
MatrixT<T> random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  MatrixT<T> m(rows, cols);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(lo, hi));
  return m;
}

/// Dataset whose label is encoded in the first pixel block, so a small
/// classifier can learn it quickly.
inline LabeledDataset toy_dataset(std::size_t m, int classes, std::size_t side, std::uint64_t seed) {
  LabeledDataset ds;
  ds.num_classes = classes;
  ds.image_rows = ds.image_cols = side;
  ds.samples = random_matrix(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(side * side), seed, 0.0, 0.3);
  ds.labels.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    ds.labels[i] = static_cast<int>(i % static_cast<std::size_t>(classes));
    ds.samples(static_cast<Eigen::Index>(i), ds.labels[i] % static_cast<int>(side * side)) = 1.0f;
  }
  return ds;
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fednia_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

}  // namespace fednia::testing
