#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "support.hpp"

using namespace fednia;

namespace {

// Two 2x2 images and labels [3, 1], written byte by byte from the IDX layout.
const std::vector<unsigned char> kImages = {0x00, 0x00, 0x08, 0x03,  // magic: ubyte, 3 dims
                                            0x00, 0x00, 0x00, 0x02,  // count
                                            0x00, 0x00, 0x00, 0x02,  // rows
                                            0x00, 0x00, 0x00, 0x02,  // cols
                                            0,    255,  128,  1,     // image 0
                                            255,  0,    0,    64};   // image 1
const std::vector<unsigned char> kLabels = {0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 3, 1};

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::Config;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Idx, DecodesHandBuiltFixture) {
  const auto ds = decode_idx(kImages, kLabels);
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.features(), 4u);
  EXPECT_EQ(ds.image_rows, 2u);
  EXPECT_EQ(ds.labels, (std::vector<int>{3, 1}));
  EXPECT_EQ(ds.samples(0, 0), 0.0f);
  EXPECT_EQ(ds.samples(0, 1), 1.0f);
  EXPECT_FLOAT_EQ(ds.samples(0, 2), 128.0f / 255.0f);
  EXPECT_EQ(ds.samples(1, 0), 1.0f);
}

TEST(Idx, BadMagicTruncationAndCountMismatch) {
  auto bad = kImages;
  bad[3] = 0x01;
  EXPECT_EQ(kind_of([&] { decode_idx(bad, kLabels); }), ErrorKind::Format);
  EXPECT_NE(message_of([&] { decode_idx(bad, kLabels); }).find("byte 0"), std::string::npos);

  const std::vector<unsigned char> truncated(kImages.begin(), kImages.end() - 1);
  EXPECT_EQ(kind_of([&] { decode_idx(truncated, kLabels); }), ErrorKind::Format);
  EXPECT_NE(message_of([&] { decode_idx(truncated, kLabels); }).find("byte 23"), std::string::npos);

  const std::vector<unsigned char> short_header(kImages.begin(), kImages.begin() + 10);
  EXPECT_EQ(kind_of([&] { decode_idx(short_header, kLabels); }), ErrorKind::Format);

  // Header claims 5 images but only 4 labels exist.
  std::vector<unsigned char> five(kImages.begin(), kImages.begin() + 16);
  five[7] = 5;
  five.insert(five.end(), 20, 0);
  std::vector<unsigned char> four = {0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x04, 0, 1, 2, 3};
  EXPECT_EQ(kind_of([&] { decode_idx(five, four); }), ErrorKind::Format);
  EXPECT_NE(message_of([&] { decode_idx(five, four); }).find("count mismatch"), std::string::npos);
}

TEST(Idx, MissingFileNamesThePath) {
  const auto msg = message_of([] { load_idx("/definitely/missing/images", "/definitely/missing/labels"); });
  EXPECT_NE(msg.find("/definitely/missing/images"), std::string::npos);
  EXPECT_EQ(kind_of([] { load_idx("/definitely/missing/images", "/definitely/missing/labels"); }), ErrorKind::Io);
}

TEST(Idx, FileRoundTripIsExact) {
  const auto dir = fednia::testing::scratch_dir("idx");
  const auto ds = synth::make_digits(30, 4);
  save_idx(ds, dir / "img", dir / "lab");
  const auto back = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(back, ds);
  const auto [img, lab] = encode_idx(back);
  const auto raw = read_file_bytes(dir / "img");
  EXPECT_EQ(std::string(raw.begin(), raw.end()), img);
}

TEST(Idx, ByteScalingInverts) {
  for (int b = 0; b <= 255; ++b) EXPECT_EQ(to_byte(static_cast<float>(b) / 255.0f), b);
}

TEST(Partition, EqualDisjointDeterministic) {
  auto ds = fednia::testing::toy_dataset(1003, 10, 4, 1);
  const PartitionPlan plan{10, 42};
  const auto parts = partition_indices(ds, plan);
  ASSERT_EQ(parts.size(), 10u);
  std::set<std::size_t> seen;
  for (const auto& p : parts) {
    EXPECT_EQ(p.size(), 100u);
    for (std::size_t i : p) EXPECT_TRUE(seen.insert(i).second) << "duplicate index " << i;
  }
  EXPECT_EQ(parts, partition_indices(ds, plan));
  EXPECT_NE(parts, partition_indices(ds, PartitionPlan{10, 43}));
}

TEST(Partition, SixtyThousandOverFifty) {
  LabeledDataset ds;
  ds.samples = Matrix::Zero(60000, 1);
  ds.labels.assign(60000, 0);
  for (std::size_t i = 0; i < 60000; ++i) ds.labels[i] = static_cast<int>(i % 10);
  for (const auto& p : partition_indices(ds, PartitionPlan{50, 1})) EXPECT_EQ(p.size(), 1200u);
}

TEST(Partition, TooFewSamplesIsConfigError) {
  auto ds = fednia::testing::toy_dataset(3, 2, 2, 1);
  EXPECT_EQ(kind_of([&] { partition(ds, PartitionPlan{4, 1}); }), ErrorKind::Config);
}

TEST(Partition, LabelSkewRestrictsClasses) {
  auto ds = fednia::testing::toy_dataset(2000, 10, 4, 2);
  const PartitionPlan plan{10, 5, PartitionScheme::LabelSkew, 2};
  const auto parts = partition(ds, plan);
  std::set<std::size_t> seen;
  for (const auto& local : parts) {
    EXPECT_EQ(local.size(), 200u);
    std::set<int> classes(local.labels.begin(), local.labels.end());
    EXPECT_LE(classes.size(), 2u);
  }
  for (const auto& idx : partition_indices(ds, plan))
    for (std::size_t i : idx) EXPECT_TRUE(seen.insert(i).second);
}

TEST(Batches, SizesAndPermutation) {
  auto ds = fednia::testing::toy_dataset(45, 5, 3, 3);
  const auto b = batches(ds, 20, 7);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].labels.size(), 20u);
  EXPECT_EQ(b[2].labels.size(), 5u);
  std::vector<int> all;
  for (const auto& x : b) all.insert(all.end(), x.labels.begin(), x.labels.end());
  auto sorted_all = all, sorted_orig = ds.labels;
  std::sort(sorted_all.begin(), sorted_all.end());
  std::sort(sorted_orig.begin(), sorted_orig.end());
  EXPECT_EQ(sorted_all, sorted_orig);

  const auto c = batches(ds, 20, 8);
  std::vector<int> other;
  for (const auto& x : c) other.insert(other.end(), x.labels.begin(), x.labels.end());
  EXPECT_NE(all, other);
  std::sort(other.begin(), other.end());
  EXPECT_EQ(other, sorted_orig);
}

TEST(Dataset, ValidateRejectsBadLabelsAndPixels) {
  auto ds = fednia::testing::toy_dataset(10, 3, 2, 1);
  EXPECT_NO_THROW(ds.validate());
  auto bad = ds;
  bad.labels[0] = 3;
  EXPECT_THROW(bad.validate(), Error);
  bad = ds;
  bad.samples(0, 0) = 1.5f;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Synthetic, DeterministicBalancedAndInRange) {
  const auto a = synth::make_digits(200, 9);
  EXPECT_EQ(a, synth::make_digits(200, 9));
  EXPECT_FALSE(a == synth::make_digits(200, 10));
  EXPECT_EQ(a.features(), 784u);
  for (auto c : class_counts(a)) EXPECT_EQ(c, 20u);
  EXPECT_GE(a.samples.minCoeff(), 0.0f);
  EXPECT_LE(a.samples.maxCoeff(), 1.0f);
  // Every digit has some ink, and the image is mostly background.
  for (Eigen::Index r = 0; r < a.samples.rows(); ++r) {
    const double ink = a.samples.row(r).sum();
    EXPECT_GT(ink, 20.0);
    EXPECT_LT(ink, 400.0);
  }
}
