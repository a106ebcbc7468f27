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

// Seeded batteries of the oracle checks over configuration matrices. Every
// failure line carries the configuration label and seed that reproduce it.

#include <chrono>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlf/data.hpp"
#include "dlf/verify.hpp"

namespace dlf::verify {

struct SuiteResult {
  std::string name;
  std::size_t checks = 0;
  double worst = 0.0;  // roundtrip: max abs error; logdet: max abs diff; gradients: max error ratio
  std::string worst_label;
  std::vector<std::string> failures;
  double seconds = 0.0;

  bool passed() const { return failures.empty() && checks > 0; }

  std::string summary() const {
    std::ostringstream os;
    os.precision(4);
    os << name << ": " << (passed() ? "pass" : "FAIL") << " checks=" << checks << " worst=" << worst << " ("
       << worst_label << ") failures=" << failures.size() << " time=" << seconds << "s";
    return os.str();
  }

  nlohmann::json to_json() const {
    return {{"suite", name},   {"passed", passed()}, {"checks", checks},    {"worst", worst},
            {"worst_label", worst_label}, {"failures", failures}, {"seconds", seconds}};
  }

  void observe(double metric, const std::string& label) {
    ++checks;
    if (metric > worst || worst_label.empty()) {
      worst = std::max(worst, metric);
      worst_label = label;
    }
  }
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::string label_of(const ModelConfig& c) {
  std::ostringstream os;
  os << (c.mode == ModelMode::flat ? "flat D=" + std::to_string(c.channels)
                                   : "image " + std::to_string(c.height) + "x" + std::to_string(c.width) + "x" +
                                         std::to_string(c.channels))
     << " K=" << c.partitions << " " << to_string(c.variant) << (c.conditional() ? " cond" : "");
  return os.str();
}

template <class Rng>
Tensor gaussian(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = std::normal_distribution<double>(0.0, 1.0)(rng);
  return t;
}

template <class Rng>
std::optional<Tensor> random_condition(const ModelConfig& c, std::size_t n, Rng& rng) {
  if (!c.conditional()) return std::nullopt;
  std::vector<int> labels(n);
  for (int& l : labels) l = std::uniform_int_distribution<int>(0, static_cast<int>(c.num_classes) - 1)(rng);
  return one_hot(labels, c.num_classes);
}

}  // namespace detail

// decode(encode(x)) over K x variant x conditioning x {flat D=4, flat D=8,
// image 8x8x2}, with every layer also round-tripped in place.
inline SuiteResult roundtrip_suite(std::uint64_t base_seed, std::size_t seeds = 20) {
  detail::Stopwatch clock;
  SuiteResult r;
  r.name = "roundtrip";
  std::uint64_t counter = 0;
  for (std::size_t k : {1, 2, 4}) {
    for (auto variant : {DynLinVariant::standard, DynLinVariant::inverse}) {
      for (bool cond : {false, true}) {
        for (int shape = 0; shape < 3; ++shape) {
          for (std::size_t s = 0; s < seeds; ++s) {
            ModelConfig c = shape == 2 ? ModelConfig::image(8, 8, 2, 2, 2, k, 8)
                                       : ModelConfig::flat(shape == 0 ? 4 : 8, 3, k, 8);
            c.variant = variant;
            c.num_classes = cond ? 10 : 0;
            c.actnorm = true;
            c.actnorm_data_init = false;
            c.seed = base_seed * 100003 + counter++;
            Model m(c);
            std::mt19937_64 rng(c.seed);
            perturb(m.parameters(), rng, 0.1);
            const Tensor x = detail::gaussian(m.input_shape(3), rng);
            const auto h = detail::random_condition(c, 3, rng);
            const std::string label = detail::label_of(c) + " seed=" + std::to_string(c.seed);
            const RoundtripReport rep = check_roundtrip(m, x, h, label, c.seed);
            r.observe(std::max(rep.max_layer_error, std::max(rep.max_model_error, rep.max_latent_error)), label);
            if (!rep.passed()) {
              std::ostringstream os;
              os << label << ": layer=" << rep.max_layer_error << " model=" << rep.max_model_error
                 << " latent=" << rep.max_latent_error;
              r.failures.push_back(os.str());
            }
          }
        }
      }
    }
  }
  r.seconds = clock.seconds();
  return r;
}

// Numeric-Jacobian log-determinants for flat models (D <= 12) and single
// layers, plus the triangular pattern of the standard dynamic linear layer.
inline SuiteResult logdet_suite(std::uint64_t base_seed, std::size_t seeds = 20) {
  detail::Stopwatch clock;
  SuiteResult r;
  r.name = "logdet";
  std::uint64_t counter = 0;
  auto record = [&](const JacobianReport& rep, double tol = 1e-4) {
    const std::string label = rep.label + " seed=" + std::to_string(rep.seed);
    r.observe(rep.discrepancy, label);
    if (rep.max_off_pattern) r.observe(*rep.max_off_pattern, label + " (off-pattern)");
    if (!rep.passed(tol)) r.failures.push_back(rep.summary());
  };
  // Full models.
  for (std::size_t k : {1, 2, 3, 4}) {
    for (auto variant : {DynLinVariant::standard, DynLinVariant::inverse}) {
      for (bool cond : {false, true}) {
        for (std::size_t s = 0; s < seeds; ++s) {
          ModelConfig c = ModelConfig::flat(12, 2, k, 8);
          c.variant = variant;
          c.num_classes = cond ? 3 : 0;
          c.actnorm = true;
          c.actnorm_data_init = false;
          c.seed = base_seed * 100003 + counter++;
          Model m(c);
          std::mt19937_64 rng(c.seed);
          perturb(m.parameters(), rng, 0.2);
          JacobianReport rep = check_model_logdet(m, detail::gaussian(m.input_shape(1), rng),
                                                  detail::random_condition(c, 1, rng));
          rep.label = detail::label_of(c);
          rep.seed = c.seed;
          record(rep);
        }
      }
    }
  }
  for (std::size_t s = 0; s < seeds; ++s) {
    ModelConfig c = ModelConfig::flat(4, 8, 2, 16);
    c.seed = base_seed * 100003 + counter++;
    Model m(c);
    std::mt19937_64 rng(c.seed);
    // Eight steps at sd 0.2 can reach activations in the hundreds, where the
    // finite-difference Jacobian of the composite loses ~1e-3 in log|det|.
    perturb(m.parameters(), rng, 0.1);
    JacobianReport rep = check_model_logdet(m, detail::gaussian(m.input_shape(1), rng));
    rep.label = "8-step " + detail::label_of(c);
    rep.seed = c.seed;
    record(rep);
  }
  // Single layers.
  for (std::size_t s = 0; s < seeds; ++s) {
    const std::uint64_t seed = base_seed * 100003 + counter++;
    std::mt19937_64 rng(seed);
    for (std::size_t k : {2, 3}) {
      DynLinConfig dc;
      dc.partitions = k;
      dc.hidden = 8;
      dc.flat = true;
      DynamicLinear layer(6, dc, rng, "dynlin K=" + std::to_string(k));
      perturb(layer.parameters(), rng, 0.4);
      JacobianReport rep = check_layer_logdet(layer, detail::gaussian(Shape{1, 1, 1, 6}, rng), {}, 6 / k);
      rep.seed = seed;
      record(rep);
    }
    ActNorm an(6, false, "actnorm");
    for (double& v : an.params().scale.mutable_value().data()) v = std::uniform_real_distribution<double>(0.2, 3.0)(rng);
    for (double& v : an.params().bias.mutable_value().data()) v = std::normal_distribution<double>(0.0, 1.0)(rng);
    JacobianReport rep = check_layer_logdet(an, detail::gaussian(Shape{1, 1, 2, 6}, rng));
    rep.seed = seed;
    record(rep);
    Inv1x1 conv(6, rng, "inv1x1 orthogonal");
    rep = check_layer_logdet(conv, detail::gaussian(Shape{1, 1, 2, 6}, rng));
    rep.seed = seed;
    record(rep);
    // Orthogonal start: the numeric log-determinant itself is ~0.
    r.observe(std::abs(rep.numeric_logdet), rep.label + " |numeric|");
    if (std::abs(rep.numeric_logdet) > 1e-6) r.failures.push_back(rep.summary() + " (|numeric| > 1e-6)");
  }
  r.seconds = clock.seconds();
  return r;
}

// Finite-difference gradient checks of the mean NLL; every parameter tensor
// (including alpha, beta, V and the first-partition scale and shift) is hit.
inline SuiteResult gradient_suite(std::uint64_t base_seed, std::size_t seeds = 20) {
  detail::Stopwatch clock;
  SuiteResult r;
  r.name = "gradients";
  std::uint64_t counter = 0;
  for (int config = 0; config < 3; ++config) {
    for (std::size_t s = 0; s < seeds; ++s) {
      ModelConfig c;
      Tensor batch;
      std::optional<Tensor> cond;
      const std::uint64_t seed = base_seed * 100003 + counter++;
      std::mt19937_64 rng(seed);
      if (config == 0) {
        // Conditional flat model on a two-moons batch.
        c = ModelConfig::flat(2, 2, 2, 8);
        c.num_classes = 2;
        c.actnorm = true;
        auto toy = toy2d(Toy2d::two_moons, 16, seed);
        batch = toy.data.x;
        cond = one_hot(toy.data.labels, 2);
      } else if (config == 1) {
        c = ModelConfig::flat(4, 2, 4, 6);
        c.variant = DynLinVariant::inverse;
        c.num_classes = 3;
        batch = detail::gaussian(Shape{8, 1, 1, 4}, rng);
        cond = detail::random_condition(c, 8, rng);
      } else {
        c = ModelConfig::image(4, 4, 1, 2, 1, 2, 4);
        c.num_classes = 3;
        c.actnorm = true;
        batch = Tensor(Shape{3, 4, 4, 1});
        for (double& v : batch.data()) v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        cond = detail::random_condition(c, 3, rng);
      }
      c.seed = seed;
      Model m(c);
      m.log_likelihood(batch, cond);  // data-dependent actnorm init
      // Seed 0 of each configuration checks the identity start as built.
      if (s > 0) perturb(m.parameters(), rng, 0.1);
      GradientCheckOptions opt;
      opt.seed = seed;
      const GradientReport rep = check_model_gradients(m, batch, cond, opt);
      const std::string label = detail::label_of(c) + " seed=" + std::to_string(seed) + (s == 0 ? " (identity start)" : "");
      r.observe(rep.worst.error_ratio, label + " " + rep.worst.param);
      if (!rep.passed() || rep.tensors_covered != m.parameters().size() || rep.checked < 200) {
        r.failures.push_back(label + ": " + rep.summary());
      }
    }
  }
  r.seconds = clock.seconds();
  return r;
}

}  // namespace dlf::verify
