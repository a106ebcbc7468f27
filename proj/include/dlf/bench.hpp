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

// Decode latency of a frozen model per batch size.

#include <algorithm>
#include <chrono>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlf/errors.hpp"
#include "dlf/model.hpp"

namespace dlf {

struct TimingRow {
  std::size_t batch_size = 0;
  std::size_t runs = 0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  double mean_ms = 0.0;

  nlohmann::json to_json() const {
    return {{"split", "bench"}, {"batch_size", batch_size}, {"runs", runs},
            {"median_ms", median_ms}, {"p95_ms", p95_ms}, {"mean_ms", mean_ms}};
  }
};

struct TimingOptions {
  std::size_t runs = 30;
  std::size_t warmup = 5;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

// Nearest-rank percentile of an ascending sample.
inline double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ContractError("percentile of an empty sample");
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
  return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

inline std::vector<TimingRow> report_timing(const Model& model, const std::vector<std::size_t>& batch_sizes,
                                            const TimingOptions& opt = {},
                                            const std::optional<std::size_t>& label = std::nullopt) {
  if (opt.runs == 0) throw UsageError("bench needs at least one timed run");
  if (batch_sizes.empty()) throw UsageError("bench needs at least one batch size");
  std::vector<TimingRow> rows;
  std::mt19937_64 rng(opt.seed);
  for (std::size_t b : batch_sizes) {
    if (b == 0) throw UsageError("bench batch sizes must be positive");
    std::optional<Tensor> cond;
    if (model.config().conditional()) {
      cond = one_hot(std::vector<int>(b, static_cast<int>(label.value_or(0))), model.config().num_classes);
    }
    std::vector<double> ms;
    for (std::size_t r = 0; r < opt.warmup + opt.runs; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const Sample s = model.sample(b, opt.temperature, rng, cond);
      const auto t1 = std::chrono::steady_clock::now();
      if (!s.x.all_finite()) throw NumericError("bench: non-finite sample at batch size " + std::to_string(b));
      if (r >= opt.warmup) ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    TimingRow row;
    row.batch_size = b;
    row.runs = opt.runs;
    for (double v : ms) row.mean_ms += v / static_cast<double>(ms.size());
    std::sort(ms.begin(), ms.end());
    row.median_ms = percentile(ms, 0.5);
    row.p95_ms = percentile(ms, 0.95);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace dlf
