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

// Acceptance gate: one "CRITERION n PASS|FAIL ..." line per criterion.
// Usage: acceptance [n ...]   (no arguments runs all ten)

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include "dlf/bench.hpp"
#include "dlf/train.hpp"
#include "dlf/verify_suites.hpp"

namespace {

using namespace dlf;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Config config(const std::vector<std::string>& kv) { return Config::resolve("", kv, "acceptance"); }

struct TrainRun {
  std::unique_ptr<Trainer> trainer;
  std::vector<LogRecord> train;
  std::vector<LogRecord> valid;
};

TrainRun train(const Config& cfg, const std::string& out_dir = {}) {
  TrainRun r;
  r.trainer = std::make_unique<Trainer>(cfg, load_data(cfg), out_dir);
  r.trainer->set_sink([&r](const LogRecord& rec) { (rec.split == "train" ? r.train : r.valid).push_back(rec); });
  r.trainer->run();
  return r;
}

Outcome suite_outcome(const verify::SuiteResult& r, double budget_s) {
  Outcome o;
  o.pass = r.passed() && r.seconds < budget_s;
  o.detail = r.summary() + " budget=" + fmt(budget_s) + "s";
  if (!r.failures.empty()) o.detail += " first failure: " + r.failures.front();
  return o;
}

// 1. decode(encode(x)) over the configuration matrix.
Outcome criterion1() { return suite_outcome(verify::roundtrip_suite(1), 120.0); }

// 2. Analytic log-determinants against numeric Jacobians, plus triangularity.
Outcome criterion2() { return suite_outcome(verify::logdet_suite(2), 60.0); }

// 3. Gradients against central differences, every tensor covered.
Outcome criterion3() {
  const auto r = verify::gradient_suite(3);
  Outcome o = suite_outcome(r, 120.0);
  // The suite insists on full tensor coverage; spot-check the named ones exist.
  Model m([] {
    ModelConfig c = ModelConfig::flat(2, 1, 2, 8);
    c.num_classes = 2;
    return c;
  }());
  std::set<std::string> kinds;
  for (const auto& p : m.parameters()) kinds.insert(p.name.substr(p.name.rfind('/') + 1));
  for (const char* want : {"alpha", "beta", "cond_v", "log_scale", "shift"}) {
    if (!kinds.count(want)) {
      o.pass = false;
      o.detail += std::string(" missing tensor kind ") + want;
    }
  }
  return o;
}

// 4. A fresh model's NLL equals the standard-normal cross-entropy of its input.
Outcome criterion4() {
  double worst = 0.0;
  std::size_t cases = 0;
  std::mt19937_64 rng(4);
  auto check = [&](ModelConfig c, Tensor x, std::optional<Tensor> cond) {
    c.seed = 40 + cases;
    Model m(c);
    const Tensor nll = m.log_likelihood(x, cond).nll;
    const std::size_t d = x.size() / x.dim(0);
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      double sq = 0.0;
      for (std::size_t q = 0; q < d; ++q) sq += x[i * d + q] * x[i * d + q];
      const double ce = 0.5 * sq + 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
      worst = std::max(worst, std::abs(nll[i] - ce));
    }
    ++cases;
  };
  const auto moons = toy2d(Toy2d::two_moons, 64, 4);
  check(ModelConfig::flat(2, 8, 2), moons.data.x, std::nullopt);
  {
    ModelConfig c = ModelConfig::flat(2, 8, 2);
    c.num_classes = 2;
    check(c, moons.data.x, one_hot(moons.data.labels, 2));
  }
  {
    ModelConfig c = ModelConfig::flat(12, 4, 4, 16);
    c.variant = DynLinVariant::inverse;
    Tensor x(Shape{32, 1, 1, 12});
    for (double& v : x.data()) v = std::normal_distribution<double>(0.0, 2.0)(rng);
    check(c, x, std::nullopt);
  }
  for (std::size_t ch : {1, 3}) {
    const Dataset img = synthetic_images(32, ch, 5);
    const Tensor x = model_input(img, rng);
    check(ModelConfig::image(8, 8, ch, ch == 1 ? 2 : 1, 4, ch == 1 ? 2 : 6, 16), x, std::nullopt);
    ModelConfig c = ModelConfig::image(8, 8, ch, 2, 2, 2, 16);
    c.actnorm = true;
    c.actnorm_data_init = false;  // data-dependent init would rescale on the first batch
    c.num_classes = 2;
    check(c, x, one_hot(img.labels, 2));
  }
  return {worst <= 1e-6, "cases=" + std::to_string(cases) + " max|nll - cross-entropy|=" + fmt(worst) + " tol=1e-6"};
}

// 5. Two moons beats the best single Gaussian by at least 0.2 nats.
Outcome criterion5() {
  const auto t0 = std::chrono::steady_clock::now();
  const Config cfg = config({"data.source=toy2d", "data.kind=two_moons", "data.n=10000", "model.mode=flat",
                             "model.channels=2", "model.K=2", "model.steps=8", "train.max_steps=5000", "seed=5"});
  TrainRun run = train(cfg);
  // Maximum-likelihood Gaussian on the training split, scored analytically.
  const Dataset& tr = run.trainer->data().train;
  const auto n = static_cast<double>(tr.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    mx += tr.x[2 * i];
    my += tr.x[2 * i + 1];
  }
  mx /= n;
  my /= n;
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const double dx = tr.x[2 * i] - mx, dy = tr.x[2 * i + 1] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  sxx /= n;
  syy /= n;
  sxy /= n;
  const double det = sxx * syy - sxy * sxy;
  const double baseline = 0.5 * std::log(std::pow(2.0 * std::numbers::pi * std::numbers::e, 2) * det);
  const double final_nll = run.valid.back().nll_nats;
  const double secs = seconds_since(t0);
  return {final_nll <= baseline - 0.2 && secs < 600.0,
          "steps=" + std::to_string(run.trainer->step()) + " valid nll=" + fmt(final_nll) + " gaussian baseline=" +
              fmt(baseline) + " margin=" + fmt(baseline - final_nll) + " (need >= 0.2) time=" + fmt(secs, 3) + "s"};
}

// 6. Image-mode bits/dim on 8x8 grayscale synthetic images.
Config image_config(std::size_t channels, std::size_t levels, std::size_t k, std::size_t hidden,
                    std::size_t max_steps, std::uint64_t seed) {
  return config({"model.mode=image", "model.height=8", "model.width=8",
                 "model.channels=" + std::to_string(channels), "model.L=" + std::to_string(levels), "model.steps=4",
                 "model.K=" + std::to_string(k), "model.hidden=" + std::to_string(hidden), "model.actnorm=true",
                 "data.source=synthetic", "data.channels=" + std::to_string(channels), "data.n=5000",
                 "train.batch_size=32", "train.max_steps=" + std::to_string(max_steps), "seed=" + std::to_string(seed)});
}

std::unique_ptr<Trainer> c6_trainer;  // reused by criterion 10

Outcome criterion6() {
  TrainRun run = train(image_config(1, 2, 2, 32, 2000, 6));
  const double step0 = *run.train.front().bits_per_dim;
  const double final_bpd = *run.valid.back().bits_per_dim;
  c6_trainer = std::move(run.trainer);
  return {final_bpd < 8.0 && final_bpd <= step0 - 1.0,
          "step-0 bpd=" + fmt(step0) + " valid bpd after 2000 steps=" + fmt(final_bpd) + " (need < 8 and <= " +
              fmt(step0 - 1.0) + ")"};
}

// 7. K=2 is no worse than K=6 at matched parameter counts.
Outcome criterion7() {
  const std::size_t steps = 1500;
  const Config k2 = image_config(3, 1, 2, 32, steps, 7);
  const std::size_t target = Model(k2.model()).parameter_count();
  std::size_t best_c = 1, best_gap = SIZE_MAX;
  for (std::size_t c = 1; c <= 64; ++c) {
    const std::size_t p = Model(image_config(3, 1, 6, c, steps, 7).model()).parameter_count();
    const std::size_t gap = p > target ? p - target : target - p;
    if (gap < best_gap) {
      best_gap = gap;
      best_c = c;
    }
  }
  const Config k6 = image_config(3, 1, 6, best_c, steps, 7);
  const std::size_t p6 = Model(k6.model()).parameter_count();
  const double bpd2 = *train(k2).valid.back().bits_per_dim;
  const double bpd6 = *train(k6).valid.back().bits_per_dim;
  return {bpd2 <= bpd6 + 0.02, "K=2 c=32 params=" + std::to_string(target) + " bpd=" + fmt(bpd2) + "; K=6 c=" +
                                   std::to_string(best_c) + " params=" + std::to_string(p6) + " bpd=" + fmt(bpd6) +
                                   "; steps=" + std::to_string(steps) + " (need K2 <= K6 + 0.02)"};
}

// 8. Class-conditional flow on eight Gaussians.
Outcome criterion8() {
  const std::vector<std::string> base{"data.source=toy2d", "data.kind=eight_gaussians", "data.n=10000",
                                      "model.mode=flat",   "model.channels=2",           "model.K=2",
                                      "model.steps=8",     "train.max_steps=3000",       "seed=8"};
  auto cond_kv = base;
  cond_kv.push_back("model.num_classes=8");
  TrainRun cond = train(config(cond_kv));
  TrainRun uncond = train(config(base));
  const double nll_c = cond.valid.back().nll_nats, nll_u = uncond.valid.back().nll_nats;

  const auto centers = toy2d(Toy2d::eight_gaussians, 10000, 0).centers;
  std::mt19937_64 rng(80);
  const std::size_t per_class = 250;
  std::size_t hits = 0, total = 0;
  for (int k = 0; k < 8; ++k) {
    const Tensor h = one_hot(std::vector<int>(per_class, k), 8);
    const Tensor x = cond.trainer->model().sample(per_class, 0.7, rng, h).x;
    for (std::size_t i = 0; i < per_class; ++i) {
      std::size_t nearest = 0;
      double best = 1e300;
      for (std::size_t c = 0; c < centers.size(); ++c) {
        const double dx = x[2 * i] - centers[c][0], dy = x[2 * i + 1] - centers[c][1];
        if (dx * dx + dy * dy < best) {
          best = dx * dx + dy * dy;
          nearest = c;
        }
      }
      hits += nearest == static_cast<std::size_t>(k);
      ++total;
    }
  }
  const double rate = static_cast<double>(hits) / static_cast<double>(total);
  return {nll_c <= nll_u && rate >= 0.9, "conditional nll=" + fmt(nll_c) + " unconditional nll=" + fmt(nll_u) +
                                             " own-center rate at T=0.7=" + fmt(rate, 4) + " (need >= 0.9)"};
}

// 9. Bit-identical reruns and file-based save/resume.
Outcome criterion9() {
  ::setenv("DLF_THREADS", "1", 1);
  const fs::path dir = fs::temp_directory_path() / "dlf_acceptance_c9";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::string detail;
  bool pass = true;
  struct Case {
    std::string name;
    Config cfg;
  };
  Config flat = config({"model.steps=4", "model.hidden=16", "model.num_classes=2", "data.n=2000",
                        "train.batch_size=50", "train.max_steps=200", "seed=9"});
  Config image = image_config(1, 2, 2, 16, 200, 9);
  image.set("data.n", "1000");
  for (const Case& c : {Case{"flat", flat}, Case{"image", image}}) {
    auto losses = [](const TrainRun& r) {
      std::vector<double> v;
      for (const auto& rec : r.train) v.push_back(rec.nll_nats);
      return v;
    };
    const auto a = losses(train(c.cfg));
    const auto b = losses(train(c.cfg));
    const bool same = a == b && a.size() == 200;

    // Stop at step 100, reload from disk, continue to 200.
    const fs::path sub = dir / c.name;
    fs::create_directories(sub);
    Config first = c.cfg;
    first.set("train.max_steps", "100");
    TrainRun head = train(first, sub.string());
    const Checkpoint ck = load_checkpoint((sub / "last.dlfc").string());
    auto resumed = Trainer::from_checkpoint(ck, {"train.max_steps=200"});
    std::vector<double> tail;
    resumed->set_sink([&](const LogRecord& r) {
      if (r.split == "train") tail.push_back(r.nll_nats);
    });
    resumed->run();
    std::vector<double> joined = losses(head);
    joined.insert(joined.end(), tail.begin(), tail.end());
    const bool resume_ok = joined == a;
    pass = pass && same && resume_ok;
    detail += c.name + ": rerun " + (same ? "identical" : "DIFFERENT") + ", resume@100 " +
              (resume_ok ? "identical" : "DIFFERENT") + " (" + std::to_string(joined.size()) + " losses); ";
  }
  fs::remove_all(dir);
  return {pass, detail};
}

// 10. Decode latency, encode(sample) recovery and interpolation endpoints.
Outcome criterion10() {
  if (!c6_trainer) criterion6();
  Model& m = c6_trainer->model();
  const auto rows = report_timing(m, {1, 16, 64});
  std::string detail = "decode latency (median/p95 ms):";
  bool timing_ok = true;
  for (const auto& r : rows) {
    detail += " b" + std::to_string(r.batch_size) + "=" + fmt(r.median_ms, 3) + "/" + fmt(r.p95_ms, 3);
    timing_ok = timing_ok && r.runs >= 30 && r.median_ms > 0.0;
  }
  std::mt19937_64 rng(10);
  const Sample s = m.sample(32, 1.0, rng);
  const double latent_err = max_abs_diff(m.encode(s.x), s.z);

  const Dataset& valid = c6_trainer->data().valid;
  std::mt19937_64 dq(11);
  const Tensor xa = model_input(valid.gather({0}), dq), xb = model_input(valid.gather({1}), dq);
  const auto path = m.interpolate(xa, xb, 8);
  const double end_err = std::max(max_abs_diff(path.front(), xa), max_abs_diff(path.back(), xb));

  // Same mechanics for a conditional flat model.
  ModelConfig fc = ModelConfig::flat(2, 8, 2, 32);
  fc.num_classes = 8;
  Model fm(fc);
  perturb(fm.parameters(), rng, 0.05);
  const Tensor h = one_hot({3, 3, 3, 3}, 8);
  const Sample fs_ = fm.sample(4, 1.0, rng, h);
  const double flat_err = max_abs_diff(fm.encode(fs_.x, h), fs_.z);

  const bool pass = timing_ok && latent_err <= 1e-6 && flat_err <= 1e-6 && end_err <= 1e-6;
  detail += "; max|encode(sample) - z|=" + fmt(std::max(latent_err, flat_err)) +
            " interpolation endpoint error=" + fmt(end_err) + " tol=1e-6";
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria{criterion1, criterion2, criterion3, criterion4, criterion5,
                                                       criterion6, criterion7, criterion8, criterion9, criterion10};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "CRITERION " << n << " " << (o.pass ? "PASS" : "FAIL") << " " << o.detail << " ["
              << fmt(seconds_since(t0), 3) << "s]" << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
