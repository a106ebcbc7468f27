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

#pragma once

// Datasets: toy 2-D densities, IDX and DLFT ingestion, a synthetic 8x8 image
// generator, dequantization and deterministic batching.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dlf/errors.hpp"
#include "dlf/tensor.hpp"

namespace dlf {

// A batch-major collection of samples. Quantized data holds integer values in
// [0, 2^n_bits) and is dequantized on the way into the model.
struct Dataset {
  Tensor x;                 // [N, H, W, C]; flat data is [N, 1, 1, D]
  std::vector<int> labels;  // empty when unlabeled
  std::size_t num_classes = 0;
  bool quantized = false;
  int n_bits = 8;

  std::size_t size() const { return x.empty() ? 0 : x.dim(0); }
  std::size_t sample_size() const { return size() ? x.size() / size() : 0; }
  bool labeled() const { return !labels.empty(); }

  // Rows `idx` of this dataset, in order.
  Dataset gather(const std::vector<std::size_t>& idx) const {
    if (idx.empty()) throw ContractError("dataset gather: empty index list");
    Dataset out;
    Shape s = x.shape();
    s[0] = idx.size();
    out.x = Tensor(s);
    const std::size_t d = sample_size();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= size()) throw ContractError("dataset gather: index out of range");
      std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                  out.x.data().begin() + static_cast<std::ptrdiff_t>(i * d));
      if (labeled()) out.labels.push_back(labels[idx[i]]);
    }
    out.num_classes = num_classes;
    out.quantized = quantized;
    out.n_bits = n_bits;
    return out;
  }
};

struct DataSplit {
  Dataset train;
  Dataset valid;
};

// Seeded permutation, then the first (1 - valid_fraction) for training.
inline DataSplit split_dataset(const Dataset& d, double valid_fraction, std::uint64_t seed) {
  if (!(valid_fraction > 0.0 && valid_fraction < 1.0)) throw ConfigError("valid fraction must be in (0, 1)");
  const std::size_t n = d.size();
  const auto n_valid = static_cast<std::size_t>(std::llround(valid_fraction * static_cast<double>(n)));
  if (n_valid == 0 || n_valid >= n) {
    throw DataError("dataset of " + std::to_string(n) + " samples is too small for a train/valid split");
  }
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> tr(perm.begin(), perm.end() - static_cast<std::ptrdiff_t>(n_valid));
  std::vector<std::size_t> va(perm.end() - static_cast<std::ptrdiff_t>(n_valid), perm.end());
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  return {d.gather(tr), d.gather(va)};
}

// Sample order for one epoch; a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline std::size_t batches_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

// Indices of batch `b` of `order`; the last batch may be short.
inline std::vector<std::size_t> batch_indices(const std::vector<std::size_t>& order, std::size_t batch,
                                              std::size_t b) {
  const std::size_t lo = b * batch, hi = std::min(order.size(), lo + batch);
  if (lo >= hi) throw ContractError("batch index out of range");
  return {order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi)};
}

// x~ = (x + u) / 2^n_bits with u ~ U[0, 1).
template <class Rng>
Tensor dequantize(const Tensor& x, int n_bits, Rng& rng) {
  if (n_bits < 1 || n_bits > 16) throw ConfigError("n_bits must be in [1, 16]");
  const double levels = std::ldexp(1.0, n_bits);
  Tensor out(x.shape());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (!(v >= 0.0 && v < levels) || v != std::floor(v)) {
      throw DataError("dequantize: value " + std::to_string(v) + " at index " + std::to_string(i) +
                      " is not an integer in [0, " + std::to_string(static_cast<long>(levels)) + ")");
    }
    // v + u can round up to v + 1 near the top of the range; stay in the cell.
    out[i] = std::min((v + u(rng)) / levels, std::nextafter((v + 1.0) / levels, 0.0));
  }
  return out;
}

// The model input for a batch: dequantized when the data is quantized.
template <class Rng>
Tensor model_input(const Dataset& batch, Rng& rng) {
  return batch.quantized ? dequantize(batch.x, batch.n_bits, rng) : batch.x;
}

// ---------------------------------------------------------------- toy 2-D

enum class Toy2d { two_moons, eight_gaussians, checkerboard };

inline Toy2d parse_toy2d(const std::string& s) {
  if (s == "two_moons") return Toy2d::two_moons;
  if (s == "eight_gaussians") return Toy2d::eight_gaussians;
  if (s == "checkerboard") return Toy2d::checkerboard;
  throw ConfigError("unknown toy2d kind '" + s + "' (expected two_moons, eight_gaussians or checkerboard)");
}

struct Toy2dData {
  Dataset data;                                // [n, 1, 1, 2], standardized
  std::vector<std::array<double, 2>> centers;  // eight_gaussians only, in standardized coordinates
};

inline constexpr double kEightGaussiansRadius = 4.0;
inline constexpr double kEightGaussiansStd = kEightGaussiansRadius / 8.0;

inline Toy2dData toy2d(Toy2d kind, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ConfigError("toy2d needs at least 2 samples");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Toy2dData out;
  Dataset& d = out.data;
  d.x = Tensor(Shape{n, 1, 1, 2});
  std::vector<std::array<double, 2>> raw_centers;
  if (kind == Toy2d::eight_gaussians) {
    for (int k = 0; k < 8; ++k) {
      const double a = 2.0 * std::numbers::pi * k / 8.0;
      raw_centers.push_back({kEightGaussiansRadius * std::cos(a), kEightGaussiansRadius * std::sin(a)});
    }
    d.num_classes = 8;
  } else if (kind == Toy2d::two_moons) {
    d.num_classes = 2;
  }
  for (std::size_t i = 0; i < n; ++i) {
    double px = 0.0, py = 0.0;
    switch (kind) {
      case Toy2d::two_moons: {
        const int moon = static_cast<int>(i % 2);
        const double t = std::numbers::pi * unif(rng);
        px = moon ? 1.0 - std::cos(t) : std::cos(t);
        py = moon ? 0.5 - std::sin(t) : std::sin(t);
        px += 0.1 * normal(rng);
        py += 0.1 * normal(rng);
        d.labels.push_back(moon);
        break;
      }
      case Toy2d::eight_gaussians: {
        const auto k = static_cast<int>(std::uniform_int_distribution<int>(0, 7)(rng));
        px = raw_centers[static_cast<std::size_t>(k)][0] + kEightGaussiansStd * normal(rng);
        py = raw_centers[static_cast<std::size_t>(k)][1] + kEightGaussiansStd * normal(rng);
        d.labels.push_back(k);
        break;
      }
      case Toy2d::checkerboard: {
        // 4x4 board on [-2, 2)^2, occupied cells where floor(x) + floor(y) is even.
        px = 4.0 * unif(rng) - 2.0;
        const double cell_y = static_cast<double>(std::uniform_int_distribution<int>(0, 1)(rng)) * 2.0 - 2.0;
        const double fx = std::floor(px);
        py = cell_y + unif(rng) + (std::fmod(fx + 4.0, 2.0) == 0.0 ? 0.0 : 1.0);
        break;
      }
    }
    d.x[2 * i] = px;
    d.x[2 * i + 1] = py;
  }
  // Standardize per axis; centers follow the same affine map.
  for (std::size_t a = 0; a < 2; ++a) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += d.x[2 * i + a];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (d.x[2 * i + a] - mean) * (d.x[2 * i + a] - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) d.x[2 * i + a] = (d.x[2 * i + a] - mean) / sd;
    for (auto& c : raw_centers) c[a] = (c[a] - mean) / sd;
  }
  out.centers = std::move(raw_centers);
  return out;
}

// ---------------------------------------------------------------- synthetic images

// 8x8 images of one or two soft blobs on a dark background; the class is the
// number of blobs minus one. RGB images give each blob its own tint.
inline Dataset synthetic_images(std::size_t n, std::size_t channels, std::uint64_t seed, std::size_t size = 8) {
  if (channels != 1 && channels != 3) throw ConfigError("synthetic images must have 1 or 3 channels");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Dataset d;
  d.x = Tensor(Shape{n, size, size, channels});
  d.quantized = true;
  d.n_bits = 8;
  d.num_classes = 2;
  const double extent = static_cast<double>(size);
  for (std::size_t i = 0; i < n; ++i) {
    const int blobs = 1 + static_cast<int>(unif(rng) < 0.5);
    std::vector<double> img(size * size * channels, 0.0);
    for (int b = 0; b < blobs; ++b) {
      const double cy = 1.5 + (extent - 3.0) * unif(rng);
      const double cx = 1.5 + (extent - 3.0) * unif(rng);
      const double r = 0.8 + 0.8 * unif(rng);
      const double amp = 0.6 + 0.35 * unif(rng);
      std::array<double, 3> tint{1.0, 1.0, 1.0};
      if (channels == 3) tint = {0.3 + 0.7 * unif(rng), 0.3 + 0.7 * unif(rng), 0.3 + 0.7 * unif(rng)};
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const double v = amp * std::exp(-(dx * dx + dy * dy) / (2.0 * r * r));
          for (std::size_t c = 0; c < channels; ++c) img[(y * size + x) * channels + c] += v * tint[c];
        }
      }
    }
    for (std::size_t q = 0; q < img.size(); ++q) {
      d.x[i * img.size() + q] = std::min(255.0, std::floor(256.0 * std::min(img[q], 0.999)));
    }
    d.labels.push_back(blobs - 1);
  }
  return d;
}

// Average-pools integer images by `factor` after a centered crop to a
// multiple of it (28x28 -> crop 24x24 -> pool 3 -> 8x8).
inline Dataset downsample(const Dataset& d, std::size_t out_size) {
  const std::size_t n = d.size(), h = d.x.dim(1), w = d.x.dim(2), c = d.x.dim(3);
  if (out_size == 0 || out_size > std::min(h, w)) throw ConfigError("downsample target must be in [1, min(H, W)]");
  const std::size_t f = std::min(h, w) / out_size;
  const std::size_t oy = (h - f * out_size) / 2, ox = (w - f * out_size) / 2;
  Dataset out = d;
  out.x = Tensor(Shape{n, out_size, out_size, c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t y = 0; y < out_size; ++y) {
      for (std::size_t x = 0; x < out_size; ++x) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          double s = 0.0;
          for (std::size_t dy = 0; dy < f; ++dy) {
            for (std::size_t dx = 0; dx < f; ++dx) s += d.x.at(b, oy + y * f + dy, ox + x * f + dx, ch);
          }
          out.x[((b * out_size + y) * out_size + x) * c + ch] = std::floor(s / static_cast<double>(f * f));
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- binary readers

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) {
    throw DataError(path + ": truncated header at byte offset " + std::to_string(off) + " (file has " +
                    std::to_string(b.size()) + " bytes)");
  }
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

template <class T>
T read_le(const std::vector<unsigned char>& b, std::size_t& off, const std::string& path, const char* what) {
  if (off + sizeof(T) > b.size()) {
    throw DataError(path + ": truncated " + what + " at byte offset " + std::to_string(off));
  }
  T v{};
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v = static_cast<T>(v | (static_cast<T>(b[off + i]) << (8 * i)));
  }
  off += sizeof(T);
  return v;
}

inline void check_payload(const std::vector<unsigned char>& b, std::size_t off, std::size_t expected,
                          const std::string& path) {
  if (b.size() - off != expected) {
    throw DataError(path + ": expected " + std::to_string(off + expected) + " bytes, file has " +
                    std::to_string(b.size()) + " (payload starts at byte offset " + std::to_string(off) + ")");
  }
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// IDX image file -> [N, H, W, 1] integer-valued tensor.
inline Tensor load_idx_images(const std::string& path) {
  const auto b = detail::read_file(path);
  const std::uint32_t magic = detail::read_be32(b, 0, path);
  if (magic != kIdxImagesMagic) {
    throw DataError(path + ": bad magic at byte offset 0 (expected 0x00000803 for images)");
  }
  const std::size_t n = detail::read_be32(b, 4, path);
  const std::size_t h = detail::read_be32(b, 8, path);
  const std::size_t w = detail::read_be32(b, 12, path);
  if (n == 0 || h == 0 || w == 0) throw DataError(path + ": zero dimension in header at byte offset 4");
  detail::check_payload(b, 16, n * h * w, path);
  Tensor t(Shape{n, h, w, 1});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = b[16 + i];
  return t;
}

inline std::vector<int> load_idx_labels(const std::string& path) {
  const auto b = detail::read_file(path);
  const std::uint32_t magic = detail::read_be32(b, 0, path);
  if (magic != kIdxLabelsMagic) {
    throw DataError(path + ": bad magic at byte offset 0 (expected 0x00000801 for labels)");
  }
  const std::size_t n = detail::read_be32(b, 4, path);
  detail::check_payload(b, 8, n, path);
  return {b.begin() + 8, b.end()};
}

// ---------------------------------------------------------------- DLFT tensor files

enum class DType : std::uint8_t { u8 = 0, f64 = 1 };

inline constexpr std::uint16_t kTensorFileVersion = 1;

inline void save_tensor_file(const std::string& path, const Tensor& t, DType dtype) {
  std::string buf = "DLFT";
  auto put = [&](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put(kTensorFileVersion, 2);
  put(t.rank(), 4);
  for (std::size_t d : t.shape()) put(d, 4);
  put(static_cast<std::uint8_t>(dtype), 1);
  for (double v : t.data()) {
    if (dtype == DType::u8) {
      if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v)) throw DataError("u8 tensor file: value out of range");
      put(static_cast<std::uint64_t>(v), 1);
    } else {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put(bits, 8);
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

struct TensorFile {
  Tensor tensor;
  DType dtype = DType::f64;
};

inline TensorFile load_tensor_file(const std::string& path) {
  const auto b = detail::read_file(path);
  if (b.size() < 4 || std::string(b.begin(), b.begin() + 4) != "DLFT") {
    throw DataError(path + ": bad magic at byte offset 0 (expected DLFT)");
  }
  std::size_t off = 4;
  const auto version = detail::read_le<std::uint16_t>(b, off, path, "version");
  if (version != kTensorFileVersion) {
    throw DataError(path + ": unsupported tensor file version " + std::to_string(version));
  }
  const auto rank = detail::read_le<std::uint32_t>(b, off, path, "rank");
  if (rank == 0 || rank > 8) throw DataError(path + ": bad rank " + std::to_string(rank) + " at byte offset 6");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(detail::read_le<std::uint32_t>(b, off, path, "dimension"));
  const auto tag = detail::read_le<std::uint8_t>(b, off, path, "dtype");
  if (tag > 1) throw DataError(path + ": unknown dtype tag " + std::to_string(tag) + " at byte offset " + std::to_string(off - 1));
  TensorFile tf;
  tf.dtype = static_cast<DType>(tag);
  const std::size_t width = tf.dtype == DType::u8 ? 1 : 8;
  detail::check_payload(b, off, numel(shape) * width, path);
  tf.tensor = Tensor(shape);
  for (std::size_t i = 0; i < tf.tensor.size(); ++i) {
    if (tf.dtype == DType::u8) {
      tf.tensor[i] = b[off + i];
    } else {
      std::size_t o = off + 8 * i;
      const auto bits = detail::read_le<std::uint64_t>(b, o, path, "payload");
      std::memcpy(&tf.tensor[i], &bits, sizeof bits);
    }
  }
  return tf;
}

// Rank-2 [N, D] becomes flat data; rank-4 is taken as NHWC. u8 payloads are
// treated as 8-bit pixels.
inline Dataset dataset_from_tensor_file(const std::string& path) {
  TensorFile tf = load_tensor_file(path);
  Dataset d;
  const Shape& s = tf.tensor.shape();
  if (s.size() == 2) {
    d.x = tf.tensor.reshaped(Shape{s[0], 1, 1, s[1]});
  } else if (s.size() == 4) {
    d.x = std::move(tf.tensor);
  } else {
    throw DataError(path + ": dataset tensors must be rank 2 or 4, got " + to_string(s));
  }
  d.quantized = tf.dtype == DType::u8;
  return d;
}

}  // namespace dlf
