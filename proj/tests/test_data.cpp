// Copyright 2026 The DLF Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "dlf/data.hpp"

namespace dlf {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("dlf_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                                                  ::testing::UnitTest::GetInstance()->current_test_info()->name())) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// A deterministic stand-in for the dequantization RNG.
struct FixedUniform {
  using result_type = std::uint64_t;
  std::uint64_t v;
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~std::uint64_t{0}; }
  result_type operator()() { return v; }
};

TEST(Dequantize, Boundaries) {
  FixedUniform zero{0};
  EXPECT_EQ(dequantize(Tensor(Shape{1}, 0.0), 8, zero)[0], 0.0);
  FixedUniform top{~std::uint64_t{0}};
  const double v = dequantize(Tensor(Shape{1}, 255.0), 8, top)[0];
  EXPECT_LT(v, 1.0);
  EXPECT_GT(v, 255.0 / 256.0);
}

TEST(Dequantize, ConstantBatchMean) {
  std::mt19937_64 rng(1);
  Tensor x(Shape{1000000}, 128.0);
  Tensor y = dequantize(x, 8, rng);
  double mean = 0.0;
  for (double v : y.data()) mean += v;
  mean /= static_cast<double>(y.size());
  EXPECT_NEAR(mean, 128.5 / 256.0, 1e-3);
}

TEST(Dequantize, RejectsOutOfRange) {
  std::mt19937_64 rng(2);
  try {
    dequantize(Tensor(Shape{3}, std::vector<double>{1, 256, 2}), 8, rng);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(dequantize(Tensor(Shape{1}, 0.5), 8, rng), DataError);
}

TEST(Toy2d, StandardizedAndDeterministic) {
  for (auto kind : {Toy2d::two_moons, Toy2d::eight_gaussians, Toy2d::checkerboard}) {
    auto a = toy2d(kind, 5000, 3);
    auto b = toy2d(kind, 5000, 3);
    EXPECT_EQ(a.data.x, b.data.x);
    EXPECT_EQ(a.data.labels, b.data.labels);
    for (std::size_t ax = 0; ax < 2; ++ax) {
      double mean = 0.0, var = 0.0;
      for (std::size_t i = 0; i < 5000; ++i) mean += a.data.x[2 * i + ax];
      mean /= 5000;
      for (std::size_t i = 0; i < 5000; ++i) var += (a.data.x[2 * i + ax] - mean) * (a.data.x[2 * i + ax] - mean);
      var /= 5000;
      EXPECT_LE(std::abs(mean), 1e-10);
      EXPECT_NEAR(var, 1.0, 1e-6);
    }
    EXPECT_NE(toy2d(kind, 100, 4).data.x, toy2d(kind, 100, 5).data.x);
  }
}

TEST(Toy2d, EightGaussiansNearestCenterAssignment) {
  auto t = toy2d(Toy2d::eight_gaussians, 20000, 6);
  ASSERT_EQ(t.centers.size(), 8u);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < 20000; ++i) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < 8; ++k) {
      const double dx = t.data.x[2 * i] - t.centers[k][0], dy = t.data.x[2 * i + 1] - t.centers[k][1];
      if (dx * dx + dy * dy < best_d) {
        best_d = dx * dx + dy * dy;
        best = k;
      }
    }
    correct += best == static_cast<std::size_t>(t.data.labels[i]);
  }
  EXPECT_GE(static_cast<double>(correct) / 20000.0, 0.99);
}

TEST(Toy2d, CheckerboardIsBalancedAcrossHalves) {
  auto t = toy2d(Toy2d::checkerboard, 2000, 7);
  std::size_t left = 0;
  for (std::size_t i = 0; i < 2000; ++i) left += t.data.x[2 * i] < 0.0;
  EXPECT_NEAR(static_cast<double>(left) / 2000.0, 0.5, 0.05);
}

TEST(Split, NinetyTenAndDisjoint) {
  auto t = toy2d(Toy2d::two_moons, 1000, 8);
  auto s = split_dataset(t.data, 0.1, 9);
  EXPECT_EQ(s.train.size(), 900u);
  EXPECT_EQ(s.valid.size(), 100u);
  EXPECT_EQ(s.train.labels.size(), 900u);
  auto s2 = split_dataset(t.data, 0.1, 9);
  EXPECT_EQ(s.valid.x, s2.valid.x);
}

TEST(Batching, OrderIsPureFunctionOfSeedAndEpoch) {
  EXPECT_EQ(epoch_order(100, 1, 3), epoch_order(100, 1, 3));
  EXPECT_NE(epoch_order(100, 1, 3), epoch_order(100, 1, 4));
  EXPECT_NE(epoch_order(100, 1, 3), epoch_order(100, 2, 3));
  auto order = epoch_order(10, 0, 0);
  EXPECT_EQ(batches_per_epoch(10, 4), 3u);
  EXPECT_EQ(batch_indices(order, 4, 2).size(), 2u);
  EXPECT_THROW(batch_indices(order, 4, 3), ContractError);
}

TEST(Idx, ImagesAndLabels) {
  TempDir dir;
  std::vector<unsigned char> img{0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28};
  for (int i = 0; i < 2 * 28 * 28; ++i) img.push_back(static_cast<unsigned char>(i % 256));
  write_bytes(dir.file("img"), img);
  Tensor t = load_idx_images(dir.file("img"));
  EXPECT_EQ(t.shape(), (Shape{2, 28, 28, 1}));
  EXPECT_EQ(t.at(1, 0, 1, 0), static_cast<double>((28 * 28 + 1) % 256));

  write_bytes(dir.file("lab"), {0, 0, 8, 1, 0, 0, 0, 3, 7, 0, 9});
  EXPECT_EQ(load_idx_labels(dir.file("lab")), (std::vector<int>{7, 0, 9}));
}

TEST(Idx, TruncatedAndBadMagic) {
  TempDir dir;
  std::vector<unsigned char> img{0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3};
  write_bytes(dir.file("short"), img);
  try {
    load_idx_images(dir.file("short"));
    FAIL();
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 24 bytes"), std::string::npos) << msg;
    EXPECT_NE(msg.find("has 19"), std::string::npos) << msg;
  }
  write_bytes(dir.file("magic"), {0, 0, 8, 1, 0, 0, 0, 0});
  EXPECT_THROW(load_idx_images(dir.file("magic")), DataError);
  write_bytes(dir.file("hdr"), {0, 0, 8, 3, 0, 0});
  try {
    load_idx_images(dir.file("hdr"));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 4"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_idx_images(dir.file("missing")), DataError);
}

TEST(TensorFile, RoundTripBothDtypes) {
  TempDir dir;
  Tensor f(Shape{3, 2}, std::vector<double>{0.5, -1.25, 1e-300, 3.0, -0.0, 7.75});
  save_tensor_file(dir.file("f.dlft"), f, DType::f64);
  TensorFile tf = load_tensor_file(dir.file("f.dlft"));
  EXPECT_EQ(tf.tensor, f);
  EXPECT_EQ(tf.dtype, DType::f64);
  Dataset d = dataset_from_tensor_file(dir.file("f.dlft"));
  EXPECT_EQ(d.x.shape(), (Shape{3, 1, 1, 2}));
  EXPECT_FALSE(d.quantized);

  Tensor u(Shape{1, 2, 2, 1}, std::vector<double>{0, 64, 128, 255});
  save_tensor_file(dir.file("u.dlft"), u, DType::u8);
  Dataset du = dataset_from_tensor_file(dir.file("u.dlft"));
  EXPECT_EQ(du.x, u);
  EXPECT_TRUE(du.quantized);
  EXPECT_THROW(save_tensor_file(dir.file("bad"), Tensor(Shape{1}, 256.0), DType::u8), DataError);
}

TEST(TensorFile, CorruptionIsReported) {
  TempDir dir;
  save_tensor_file(dir.file("t"), Tensor(Shape{4}, 1.0), DType::f64);
  std::ifstream in(dir.file("t"), std::ios::binary);
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  write_bytes(dir.file("trunc"), truncated);
  EXPECT_THROW(load_tensor_file(dir.file("trunc")), DataError);
  auto version = bytes;
  version[4] = 9;
  write_bytes(dir.file("ver"), version);
  try {
    load_tensor_file(dir.file("ver"));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version 9"), std::string::npos);
  }
}

TEST(SyntheticImages, QuantizedAndDeterministic) {
  Dataset a = synthetic_images(50, 1, 3), b = synthetic_images(50, 1, 3);
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.x.shape(), (Shape{50, 8, 8, 1}));
  for (double v : a.x.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 255.0);
    EXPECT_EQ(v, std::floor(v));
  }
  EXPECT_EQ(synthetic_images(5, 3, 1).x.shape(), (Shape{5, 8, 8, 3}));
  EXPECT_THROW(synthetic_images(5, 2, 1), ConfigError);
}

TEST(Downsample, CropAndPool) {
  Dataset d;
  d.x = Tensor(Shape{1, 28, 28, 1});
  for (std::size_t y = 0; y < 28; ++y) {
    for (std::size_t x = 0; x < 28; ++x) d.x[y * 28 + x] = static_cast<double>(y);
  }
  Dataset s = downsample(d, 8);
  EXPECT_EQ(s.x.shape(), (Shape{1, 8, 8, 1}));
  // Crop offset 2, pool 3: row 0 averages rows 2, 3, 4.
  EXPECT_EQ(s.x.at(0, 0, 5, 0), 3.0);
  EXPECT_EQ(s.x.at(0, 7, 0, 0), 24.0);
}

}  // namespace
}  // namespace dlf
