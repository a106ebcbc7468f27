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

// Sample grids as binary PGM (P5, one channel) or PPM (P6, three channels).

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "dlf/errors.hpp"
#include "dlf/tensor.hpp"

namespace dlf {

struct ImageGrid {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<unsigned char> pixels;  // row-major, interleaved channels
};

inline constexpr std::size_t kGutter = 2;

// floor(v * 256) clamped to 0..255.
inline unsigned char to_byte(double v) {
  if (!std::isfinite(v)) return v > 0 ? 255 : 0;
  return static_cast<unsigned char>(std::clamp(std::floor(v * 256.0), 0.0, 255.0));
}

// Tiles [N, H, W, C] samples row-major into ceil(sqrt(N)) columns; cells and
// the border are separated by 2-pixel black gutters.
inline ImageGrid make_image_grid(const Tensor& samples) {
  if (samples.rank() != 4) throw UsageError("image grid needs [N,H,W,C] samples, got " + to_string(samples.shape()));
  const std::size_t n = samples.dim(0), h = samples.dim(1), w = samples.dim(2), c = samples.dim(3);
  if (c != 1 && c != 3) {
    throw UsageError("image grid supports 1 or 3 channels, got " + std::to_string(c));
  }
  if (n == 0) throw UsageError("image grid needs at least one sample");
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  const std::size_t rows = (n + cols - 1) / cols;
  ImageGrid g;
  g.channels = c;
  g.width = cols * w + (cols + 1) * kGutter;
  g.height = rows * h + (rows + 1) * kGutter;
  g.pixels.assign(g.width * g.height * c, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ox = kGutter + (i % cols) * (w + kGutter);
    const std::size_t oy = kGutter + (i / cols) * (h + kGutter);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          g.pixels[((oy + y) * g.width + ox + x) * c + ch] = to_byte(samples.at(i, y, x, ch));
        }
      }
    }
  }
  return g;
}

inline void write_image_grid(const Tensor& samples, const std::string& path) {
  const ImageGrid g = make_image_grid(samples);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << (g.channels == 1 ? "P5" : "P6") << "\n" << g.width << " " << g.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
  if (!out) throw DataError("failed writing " + path);
}

}  // namespace dlf
