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

// The `dlf` command line. run() returns the process exit code: 0 on success,
// 1 when a check or the input data fails validation, 2 on usage errors.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dlf/bench.hpp"
#include "dlf/checkpoint.hpp"
#include "dlf/config.hpp"
#include "dlf/data.hpp"
#include "dlf/image_io.hpp"
#include "dlf/train.hpp"
#include "dlf/verify_suites.hpp"

namespace dlf::cli {

namespace fs = std::filesystem;

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"train", "eval", "sample", "encode", "decode", "interpolate", "verify", "bench"};
  return c;
}

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string ckpt;
  std::string input;
  std::string labels;
  std::optional<int> label;
  std::size_t n = 64;
  double temperature = 1.0;
  std::size_t steps = 8;
  std::string split = "valid";
  bool all = false;
  std::vector<std::string> suites;
  std::size_t seeds = 20;
  std::vector<std::size_t> batch_sizes{1, 4, 16};
  std::size_t runs = 30;
  std::size_t warmup = 5;
};

// DLF_THREADS caps parallelism. Execution is single-threaded, so any positive
// value is accepted; anything else is a usage error.
inline std::size_t thread_cap() {
  const char* env = std::getenv("DLF_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  const std::string s(env);
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || v == 0) {
    throw UsageError("DLF_THREADS must be a positive integer, got '" + s + "'");
  }
  return v;
}

class Runner {
 public:
  Runner(const Options& opt, std::ostream& out) : opt_(opt), out_(out) {}

  int dispatch(const std::string& command) {
    if (command == "train") return train();
    if (command == "eval") return eval();
    if (command == "sample") return sample();
    if (command == "encode") return encode();
    if (command == "decode") return decode();
    if (command == "interpolate") return interpolate();
    if (command == "verify") return verify();
    if (command == "bench") return bench();
    throw UsageError("unknown command '" + command + "'");
  }

 private:
  std::vector<std::string> overrides() const {
    std::vector<std::string> o = opt_.overrides;
    if (opt_.seed) o.push_back("seed=" + std::to_string(*opt_.seed));
    return o;
  }

  Config config_from_flags() const {
    if (!opt_.config.empty()) return Config::from_file(opt_.config, overrides());
    return Config::resolve("", overrides());
  }

  Checkpoint checkpoint() const {
    if (opt_.ckpt.empty()) throw UsageError("this command needs --ckpt");
    return load_checkpoint(opt_.ckpt);
  }

  Config config_from(const Checkpoint& c) const {
    if (!opt_.config.empty()) throw UsageError("--config cannot be combined with --ckpt; use --override");
    return Config::resolve(c.config, overrides(), opt_.ckpt);
  }

  static std::unique_ptr<Model> model_from(const Checkpoint& c, const Config& cfg) {
    auto m = std::make_unique<Model>(cfg.model());
    restore_parameters(*m, c);
    return m;
  }

  // Creates the output directory and records the resolved configuration.
  fs::path prepare(const fs::path& dir, const Config& cfg) const {
    fs::create_directories(dir);
    std::ofstream f(dir / "config.cfg");
    f << cfg.dump();
    if (!f) throw DataError("cannot write " + (dir / "config.cfg").string());
    return dir;
  }

  fs::path require_out(const Config& cfg) const {
    if (opt_.out.empty()) throw UsageError("this command needs --out");
    return prepare(opt_.out, cfg);
  }

  static void write_ndjson(const fs::path& path, const std::vector<nlohmann::json>& records) {
    std::ofstream f(path);
    for (const auto& r : records) f << r.dump() << "\n";
    if (!f) throw DataError("cannot write " + path.string());
  }

  // One-hot labels for n samples: --label, else --labels file, else `fallback`.
  std::optional<Tensor> condition(const ModelConfig& m, std::size_t n, const std::vector<int>& fallback = {}) const {
    if (!m.conditional()) {
      if (opt_.label || !opt_.labels.empty()) throw UsageError("--label given but the model is unconditional");
      return std::nullopt;
    }
    std::vector<int> labels;
    if (opt_.label) {
      labels.assign(n, *opt_.label);
    } else if (!opt_.labels.empty()) {
      const Tensor t = load_tensor_file(opt_.labels).tensor;
      for (double v : t.data()) labels.push_back(static_cast<int>(v));
    } else if (!fallback.empty()) {
      labels = fallback;
    } else {
      throw UsageError("conditional model needs --label or --labels");
    }
    if (labels.size() != n) {
      throw DataError("have " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " samples");
    }
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= m.num_classes) {
        throw UsageError("label " + std::to_string(l) + " is outside [0, " + std::to_string(m.num_classes) + ")");
      }
    }
    return one_hot(labels, m.num_classes);
  }

  // Model-space inputs: --input (a tensor file) or the first `limit` samples
  // of the validation split, dequantized with the configured seed.
  std::pair<Tensor, std::vector<int>> inputs(const Config& cfg, std::size_t limit) const {
    Dataset d;
    if (!opt_.input.empty()) {
      d = dataset_from_tensor_file(opt_.input);
      d.n_bits = cfg.model().n_bits;
    } else {
      d = load_data(cfg).valid;
    }
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min(limit, d.size()); ++i) idx.push_back(i);
    const Dataset b = d.gather(idx);
    std::mt19937_64 rng(cfg.get_u64("seed"));
    return {model_input(b, rng), b.labels};
  }

  void maybe_grid(const Model& m, const Tensor& x, const fs::path& path) const {
    if (m.config().mode != ModelMode::image) return;
    write_image_grid(x, path.string());
    out_ << "wrote " << path.string() << "\n";
  }

  static std::string grid_ext(const Model& m) { return m.config().channels == 1 ? ".pgm" : ".ppm"; }

  int train() {
    std::unique_ptr<Trainer> t;
    bool resumed = false;
    if (!opt_.ckpt.empty()) {
      const Checkpoint c = checkpoint();
      (void)config_from(c);
      t = Trainer::from_checkpoint(c, overrides(), opt_.out);
      resumed = true;
    } else {
      const Config cfg = config_from_flags();
      if (opt_.out.empty()) throw UsageError("train needs --out");
      t = std::make_unique<Trainer>(cfg, load_data(cfg), opt_.out);
    }
    const fs::path dir = require_out(t->config());
    std::ofstream log(dir / "log.ndjson", resumed ? std::ios::app : std::ios::trunc);
    if (!log) throw DataError("cannot write " + (dir / "log.ndjson").string());
    t->set_sink([&](const LogRecord& r) {
      log << r.to_json().dump() << "\n";
      if (r.split == "valid") out_ << r.to_json().dump() << std::endl;
    });
    if (t->finished()) {
      out_ << "nothing to do: train.epochs and train.max_steps allow no further steps\n";
      return 0;
    }
    t->run();
    out_ << "stopped at step " << t->step() << " (epoch " << t->epoch() << "), best valid nll " << std::setprecision(10)
         << t->best_valid() << " nats\n";
    return 0;
  }

  int eval() {
    const Checkpoint c = checkpoint();
    const Config cfg = config_from(c);
    auto t = Trainer::from_checkpoint(c, overrides());
    if (opt_.split != "valid" && opt_.split != "train") throw UsageError("--split must be train or valid");
    const EvalResult r = t->evaluate(opt_.split == "train" ? t->data().train : t->data().valid);
    LogRecord rec;
    rec.step = c.step;
    rec.epoch = c.epoch;
    rec.split = opt_.split;
    rec.nll_nats = r.nll_nats;
    rec.bits_per_dim = r.bits_per_dim;
    rec.lr = 0.0;
    out_ << std::setprecision(17) << rec.to_json().dump() << "\n";
    if (!opt_.out.empty()) write_ndjson(prepare(opt_.out, cfg) / "eval.ndjson", {rec.to_json()});
    return 0;
  }

  int sample() {
    const Checkpoint c = checkpoint();
    const Config cfg = config_from(c);
    auto m = model_from(c, cfg);
    if (opt_.out.empty()) throw UsageError("sample needs --out");
    // --out may name the grid image itself; other artifacts go beside it.
    fs::path dir = opt_.out, grid;
    const std::string ext = fs::path(opt_.out).extension().string();
    if (ext == ".pgm" || ext == ".ppm") {
      if (m->config().mode != ModelMode::image) throw UsageError("flat models have no image grid; pass a directory");
      if (ext != grid_ext(*m)) {
        throw UsageError(std::to_string(m->config().channels) + "-channel samples are written as " + grid_ext(*m));
      }
      grid = dir;
      dir = dir.parent_path().empty() ? fs::path(".") : dir.parent_path();
    }
    prepare(dir, cfg);
    std::vector<int> cycle;
    for (std::size_t i = 0; i < opt_.n; ++i) cycle.push_back(static_cast<int>(i % std::max<std::size_t>(1, m->config().num_classes)));
    const auto cond = condition(m->config(), opt_.n, cycle);
    std::mt19937_64 rng(cfg.get_u64("seed"));
    const Sample s = m->sample(opt_.n, opt_.temperature, rng, cond);
    save_tensor_file((dir / "samples.dlft").string(), s.x, DType::f64);
    save_tensor_file((dir / "latents.dlft").string(), s.z, DType::f64);
    out_ << "wrote " << opt_.n << " samples at temperature " << opt_.temperature << " to " << dir.string() << "\n";
    maybe_grid(*m, s.x, grid.empty() ? dir / ("samples" + grid_ext(*m)) : grid);
    return 0;
  }

  int encode() {
    const Checkpoint c = checkpoint();
    const Config cfg = config_from(c);
    auto m = model_from(c, cfg);
    const fs::path dir = require_out(cfg);
    auto [x, labels] = inputs(cfg, opt_.n);
    const auto cond = condition(m->config(), x.dim(0), labels);
    const Tensor z = m->encode(x, cond);
    save_tensor_file((dir / "latents.dlft").string(), z, DType::f64);
    if (cond) {
      Tensor l(Shape{x.dim(0)});
      for (std::size_t i = 0; i < x.dim(0); ++i) {
        for (std::size_t k = 0; k < m->config().num_classes; ++k) {
          if (cond->data()[i * m->config().num_classes + k] == 1.0) l[i] = static_cast<double>(k);
        }
      }
      save_tensor_file((dir / "labels.dlft").string(), l, DType::f64);
    }
    out_ << "encoded " << x.dim(0) << " samples to " << (dir / "latents.dlft").string() << "\n";
    return 0;
  }

  int decode() {
    const Checkpoint c = checkpoint();
    const Config cfg = config_from(c);
    auto m = model_from(c, cfg);
    if (opt_.input.empty()) throw UsageError("decode needs --input (a latent tensor file)");
    const Tensor z = load_tensor_file(opt_.input).tensor;
    const fs::path dir = require_out(cfg);
    if (z.rank() != 2) throw DataError(opt_.input + ": latents must be [N, D], got " + to_string(z.shape()));
    const auto cond = condition(m->config(), z.dim(0));
    const Tensor x = m->decode(z, cond);
    save_tensor_file((dir / "decoded.dlft").string(), x, DType::f64);
    out_ << "decoded " << z.dim(0) << " latents to " << (dir / "decoded.dlft").string() << "\n";
    maybe_grid(*m, x, dir / ("decoded" + grid_ext(*m)));
    return 0;
  }

  int interpolate() {
    const Checkpoint c = checkpoint();
    const Config cfg = config_from(c);
    auto m = model_from(c, cfg);
    const fs::path dir = require_out(cfg);
    auto [x, labels] = inputs(cfg, 2);
    if (x.dim(0) < 2) throw DataError("interpolation needs two input samples, have " + std::to_string(x.dim(0)));
    const std::size_t per = x.size() / 2;
    Shape one = x.shape();
    one[0] = 1;
    const Tensor xa(one, std::vector<double>(x.data().begin(), x.data().begin() + per));
    const Tensor xb(one, std::vector<double>(x.data().begin() + per, x.data().end()));
    // Both endpoints share the first sample's class.
    const auto cond = condition(m->config(), 1, labels.empty() ? std::vector<int>{} : std::vector<int>{labels[0]});
    const std::vector<Tensor> path = m->interpolate(xa, xb, opt_.steps, cond);
    Shape all = one;
    all[0] = path.size();
    Tensor grid(all);
    for (std::size_t i = 0; i < path.size(); ++i) {
      std::copy(path[i].data().begin(), path[i].data().end(), grid.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    save_tensor_file((dir / "interpolation.dlft").string(), grid, DType::f64);
    out_ << "endpoint errors: start " << max_abs_diff(path.front(), xa) << " end " << max_abs_diff(path.back(), xb)
         << "\n";
    maybe_grid(*m, grid, dir / ("interpolation" + grid_ext(*m)));
    return 0;
  }

  int verify() {
    std::vector<std::string> suites = opt_.suites;
    if (opt_.all) suites = {"roundtrip", "logdet", "gradients"};
    if (suites.empty()) throw UsageError("verify needs --all or --suite");
    if (opt_.seeds == 0) throw UsageError("--seeds must be positive");
    const std::uint64_t seed = opt_.seed.value_or(0);
    std::vector<nlohmann::json> records;
    bool ok = true;
    for (const auto& name : suites) {
      verify::SuiteResult r;
      if (name == "roundtrip") {
        r = verify::roundtrip_suite(seed, opt_.seeds);
      } else if (name == "logdet") {
        r = verify::logdet_suite(seed, opt_.seeds);
      } else if (name == "gradients") {
        r = verify::gradient_suite(seed, opt_.seeds);
      } else {
        const std::string hint = closest_match(name, {"roundtrip", "logdet", "gradients"});
        throw UsageError("unknown suite '" + name + "'" + (hint.empty() ? "" : " (did you mean '" + hint + "'?)"));
      }
      out_ << r.summary() << "\n";
      for (std::size_t i = 0; i < std::min<std::size_t>(r.failures.size(), 10); ++i) out_ << "  " << r.failures[i] << "\n";
      ok = ok && r.passed();
      records.push_back(r.to_json());
    }
    if (!opt_.out.empty()) {
      Config cfg = config_from_flags();
      write_ndjson(prepare(opt_.out, cfg) / "verify.ndjson", records);
    }
    out_ << (ok ? "verify: all suites passed" : "verify: FAILED") << "\n";
    return ok ? 0 : 1;
  }

  int bench() {
    std::unique_ptr<Model> m;
    Config cfg;
    if (!opt_.ckpt.empty()) {
      const Checkpoint c = checkpoint();
      cfg = config_from(c);
      m = model_from(c, cfg);
    } else {
      cfg = config_from_flags();
      m = std::make_unique<Model>(cfg.model());
    }
    TimingOptions t;
    t.runs = opt_.runs;
    t.warmup = opt_.warmup;
    t.temperature = opt_.temperature;
    t.seed = cfg.get_u64("seed");
    const auto rows = report_timing(*m, opt_.batch_sizes, t, opt_.label ? std::optional<std::size_t>(*opt_.label) : std::nullopt);
    std::vector<nlohmann::json> records;
    out_ << "batch  runs  median_ms  p95_ms\n";
    for (const auto& r : rows) {
      out_ << std::setw(5) << r.batch_size << " " << std::setw(5) << r.runs << " " << std::setw(10) << std::fixed
           << std::setprecision(3) << r.median_ms << " " << std::setw(7) << r.p95_ms << "\n";
      records.push_back(r.to_json());
    }
    out_ << std::defaultfloat;
    if (!opt_.out.empty()) write_ndjson(prepare(opt_.out, cfg) / "bench.ndjson", records);
    return 0;
  }

  const Options& opt_;
  std::ostream& out_;
};

// Names of the long options a subcommand accepts, for "did you mean".
inline std::vector<std::string> option_names(const CLI::App& app) {
  std::vector<std::string> names;
  for (const CLI::Option* o : app.get_options()) {
    for (const auto& l : o->get_lnames()) names.push_back("--" + l);
  }
  return names;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Options opt;
  CLI::App app{"Dynamic linear flows: train, evaluate, sample and verify.", "dlf"};
  app.require_subcommand(1);
  std::map<std::string, CLI::App*> subs;
  auto common = [&](CLI::App* s) {
    s->add_option("--config", opt.config, "key=value configuration file");
    s->add_option("--override", opt.overrides, "configuration override key=value (repeatable)")->allow_extra_args(false);
    s->add_option("--seed", opt.seed, "seed (sets the 'seed' key)");
    s->add_option("--out", opt.out, "output directory");
    s->allow_extras();
  };
  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* s = app.add_subcommand(name, help);
    common(s);
    subs[name] = s;
    return s;
  };
  CLI::App* train = add("train", "train a model; writes log.ndjson, last.dlfc and best.dlfc");
  train->add_option("--ckpt", opt.ckpt, "resume from this checkpoint");
  CLI::App* eval = add("eval", "evaluate a checkpoint on its data split");
  eval->add_option("--ckpt", opt.ckpt, "checkpoint")->required();
  eval->add_option("--split", opt.split, "train or valid");
  CLI::App* sample = add("sample", "draw samples; image models also write a PGM/PPM grid");
  sample->add_option("--ckpt", opt.ckpt, "checkpoint")->required();
  sample->add_option("--n", opt.n, "number of samples");
  sample->add_option("--temperature", opt.temperature, "latent standard deviation");
  sample->add_option("--label", opt.label, "class for every sample (default: cycle through classes)");
  CLI::App* encode = add("encode", "map inputs to latents");
  encode->add_option("--ckpt", opt.ckpt, "checkpoint")->required();
  encode->add_option("--input", opt.input, "tensor file (default: validation split)");
  encode->add_option("--n", opt.n, "maximum number of samples");
  encode->add_option("--label", opt.label, "class for every sample");
  encode->add_option("--labels", opt.labels, "tensor file of per-sample classes");
  CLI::App* decode = add("decode", "map latents back to inputs");
  decode->add_option("--ckpt", opt.ckpt, "checkpoint")->required();
  decode->add_option("--input", opt.input, "latent tensor file [N, D]")->required();
  decode->add_option("--label", opt.label, "class for every sample");
  decode->add_option("--labels", opt.labels, "tensor file of per-sample classes");
  CLI::App* interp = add("interpolate", "decode a straight line between two encoded inputs");
  interp->add_option("--ckpt", opt.ckpt, "checkpoint")->required();
  interp->add_option("--input", opt.input, "tensor file; the first two samples are used");
  interp->add_option("--steps", opt.steps, "points on the path, endpoints included");
  interp->add_option("--label", opt.label, "class for both endpoints");
  CLI::App* verify = add("verify", "run the oracle suites");
  verify->add_flag("--all", opt.all, "roundtrip, logdet and gradients");
  verify->add_option("--suite", opt.suites, "suite name (repeatable)");
  verify->add_option("--seeds", opt.seeds, "seeds per configuration");
  CLI::App* bench = add("bench", "decode latency per batch size");
  bench->add_option("--ckpt", opt.ckpt, "checkpoint (default: a fresh model from --config)");
  bench->add_option("--batch-sizes", opt.batch_sizes, "comma-separated batch sizes")->delimiter(',');
  bench->add_option("--runs", opt.runs, "timed runs per batch size");
  bench->add_option("--warmup", opt.warmup, "untimed warmup runs");
  bench->add_option("--temperature", opt.temperature, "latent standard deviation");
  bench->add_option("--label", opt.label, "class for conditional models");

  if (argc >= 2 && argv[1][0] != '-') {
    const std::string cmd = argv[1];
    if (std::find(commands().begin(), commands().end(), cmd) == commands().end()) {
      const std::string hint = closest_match(cmd, commands());
      err << "usage error: unknown command '" << cmd << "'" << (hint.empty() ? "" : " (did you mean '" + hint + "'?)")
          << "\n";
      return 2;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "usage error: " << e.what() << "\n";
    return 2;
  }
  try {
    thread_cap();
    for (const auto& [name, s] : subs) {
      if (!s->parsed()) continue;
      const auto extras = s->remaining();
      if (!extras.empty()) {
        const std::string hint = extras[0].rfind("--", 0) == 0 ? closest_match(extras[0], option_names(*s)) : "";
        throw UsageError("unexpected argument '" + extras[0] + "' for '" + name + "'" +
                         (hint.empty() ? "" : " (did you mean '" + hint + "'?)"));
      }
      return Runner(opt, out).dispatch(name);
    }
    throw UsageError("no command given");
  } catch (const UsageError& e) {
    err << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace dlf::cli
