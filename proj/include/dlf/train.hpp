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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dlf/checkpoint.hpp"
#include "dlf/config.hpp"
#include "dlf/data.hpp"
#include "dlf/model.hpp"
#include "dlf/optim.hpp"

namespace dlf {

// One line of the training log.
struct LogRecord {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::string split;  // "train" or "valid"
  double nll_nats = 0.0;
  std::optional<double> bits_per_dim;
  std::optional<double> grad_norm;
  double lr = 0.0;
  bool clipped = false;

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step}, {"epoch", epoch},
                     {"split", split}, {"nll_nats", nll_nats},
                     {"bits_per_dim", nullptr}, {"grad_norm", nullptr},
                     {"lr", lr}};
    if (bits_per_dim) j["bits_per_dim"] = *bits_per_dim;
    if (grad_norm) j["grad_norm"] = *grad_norm;
    if (clipped) j["clipped"] = true;
    return j;
  }
};

// Loads the dataset named by the configuration and splits it.
inline DataSplit load_data(const Config& cfg) {
  const std::string& source = cfg.get("data.source");
  const std::uint64_t seed = cfg.get_u64("data.seed");
  Dataset d;
  if (source == "toy2d") {
    d = toy2d(parse_toy2d(cfg.get("data.kind")), cfg.get_size("data.n"), seed).data;
  } else if (source == "synthetic") {
    d = synthetic_images(cfg.get_size("data.n"), cfg.get_size("data.channels"), seed);
  } else if (source == "idx") {
    if (cfg.get("data.path").empty()) throw ConfigError("data.source=idx needs data.path");
    d.x = load_idx_images(cfg.get("data.path"));
    d.quantized = true;
    d.n_bits = 8;
    if (!cfg.get("data.labels").empty()) {
      d.labels = load_idx_labels(cfg.get("data.labels"));
      if (d.labels.size() != d.size()) {
        throw DataError("label count " + std::to_string(d.labels.size()) + " does not match image count " +
                        std::to_string(d.size()));
      }
      d.num_classes = 10;
    }
    if (cfg.get_size("data.resize") > 0) d = downsample(d, cfg.get_size("data.resize"));
  } else if (source == "tensor") {
    if (cfg.get("data.path").empty()) throw ConfigError("data.source=tensor needs data.path");
    d = dataset_from_tensor_file(cfg.get("data.path"));
  } else {
    throw ConfigError("data.source: expected toy2d, synthetic, idx or tensor, got '" + source + "'");
  }
  // Fewer bits: drop low-order bits of 8-bit pixels.
  const auto n_bits = static_cast<int>(cfg.get_size("model.n_bits"));
  if (d.quantized && n_bits < d.n_bits) {
    const double f = std::ldexp(1.0, d.n_bits - n_bits);
    for (double& v : d.x.data()) v = std::floor(v / f);
    d.n_bits = n_bits;
  }
  return split_dataset(d, cfg.get_double("data.valid_fraction"), seed);
}

struct EvalResult {
  double nll_nats = 0.0;  // mean over samples
  std::optional<double> bits_per_dim;
};

// Copies checkpoint tensors into `model` (names and shapes must match) and
// marks the recorded actnorm layers as initialized.
inline void restore_parameters(Model& model, const Checkpoint& c) {
  const ParamList params = model.parameters();
  if (c.params.size() != params.size()) {
    throw DataError("checkpoint has " + std::to_string(c.params.size()) + " tensors, model has " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (c.params[i].name != params[i].name || c.params[i].value.shape() != params[i].var.shape()) {
      throw DataError("checkpoint tensor '" + c.params[i].name + "' does not match model parameter '" +
                      params[i].name + "' " + to_string(params[i].var.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].var.mutable_value() = c.params[i].value;
  for (const auto& name : c.initialized_layers) {
    bool found = false;
    for (const auto& layer : model.layers()) {
      if (layer->name() == name && layer->kind() == LayerKind::actnorm) {
        static_cast<ActNorm&>(*layer).mark_initialized();
        found = true;
      }
    }
    if (!found) throw DataError("checkpoint names unknown actnorm layer '" + name + "'");
  }
}

class Trainer {
 public:
  using Sink = std::function<void(const LogRecord&)>;

  Trainer(Config cfg, DataSplit data, std::string out_dir = {})
      : cfg_(std::move(cfg)), data_(std::move(data)), out_dir_(std::move(out_dir)),
        model_(std::make_unique<Model>(cfg_.model())), optim_(model_->parameters(), cfg_.optimizer()),
        rng_(cfg_.get_u64("seed")) {
    batch_size_ = cfg_.get_size("train.batch_size");
    eval_batch_ = cfg_.get_size("train.eval_batch");
    check_data(data_.train, "train");
    check_data(data_.valid, "valid");
  }

  Model& model() { return *model_; }
  const Config& config() const { return cfg_; }
  const DataSplit& data() const { return data_; }
  std::uint64_t step() const { return step_; }
  std::uint64_t epoch() const { return epoch_; }
  double best_valid() const { return best_valid_; }
  void set_sink(Sink sink) { sink_ = std::move(sink); }

  // Limits may be changed between runs (e.g. to continue a resumed run).
  void set_limits(std::size_t epochs, std::size_t max_steps) {
    cfg_.set("train.epochs", std::to_string(epochs));
    cfg_.set("train.max_steps", std::to_string(max_steps));
  }

  bool finished() const {
    const std::size_t epochs = cfg_.get_size("train.epochs"), max_steps = cfg_.get_size("train.max_steps");
    if (epochs == 0 && max_steps == 0) return true;
    return (epochs > 0 && epoch_ >= epochs) || (max_steps > 0 && step_ >= max_steps);
  }

  // One optimizer update on the next training batch.
  LogRecord train_step() {
    if (order_epoch_ != epoch_ || order_.empty()) {
      order_ = epoch_order(data_.train.size(), cfg_.get_u64("seed"), epoch_);
      order_epoch_ = epoch_;
    }
    const Dataset batch = data_.train.gather(batch_indices(order_, batch_size_, batch_));
    const Tensor x = model_input(batch, rng_);
    const auto cond = condition(batch);
    const ParamList params = model_->parameters();
    zero_grad(params);
    ad::Var loss;
    try {
      loss = model_->loss(x, cond);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + "\n" + diagnostics(x, cond));
    }
    if (!std::isfinite(loss.value().item())) {
      throw NumericError("non-finite training loss at step " + std::to_string(step_) + "\n" + diagnostics(x, cond));
    }
    ad::backward(loss);
    const StepInfo info = optim_.step();
    zero_grad(params);

    LogRecord r;
    r.step = step_;
    r.epoch = epoch_;
    r.split = "train";
    r.nll_nats = loss.value().item();
    if (model_->config().mode == ModelMode::image) r.bits_per_dim = model_->bits_per_dim(loss.value())[0];
    r.grad_norm = info.grad_norm;
    r.lr = info.lr;
    r.clipped = info.clipped;
    emit(r);
    ++step_;
    if (++batch_ == batches_per_epoch(data_.train.size(), batch_size_)) end_epoch();
    return r;
  }

  // Trains until the epoch or step limit; always leaves last.dlfc behind when
  // an output directory is set.
  void run() {
    bool evaluated_here = true;
    while (!finished()) {
      train_step();
      evaluated_here = batch_ == 0;
    }
    if (!evaluated_here) validate_and_checkpoint();
    if (!out_dir_.empty()) save_checkpoint((std::filesystem::path(out_dir_) / "last.dlfc").string(), checkpoint());
  }

  // Mean NLL over `d` with a fixed dequantization seed, in eval_batch chunks.
  EvalResult evaluate(const Dataset& d) {
    std::mt19937_64 rng(cfg_.get_u64("train.valid_seed"));
    double total = 0.0;
    std::vector<std::size_t> idx;
    for (std::size_t lo = 0; lo < d.size(); lo += eval_batch_) {
      idx.clear();
      for (std::size_t i = lo; i < std::min(d.size(), lo + eval_batch_); ++i) idx.push_back(i);
      const Dataset batch = d.gather(idx);
      const Tensor nll = model_->log_likelihood(model_input(batch, rng), condition(batch)).nll;
      for (double v : nll.data()) total += v;
    }
    EvalResult r;
    r.nll_nats = total / static_cast<double>(d.size());
    if (model_->config().mode == ModelMode::image) {
      r.bits_per_dim = model_->bits_per_dim(Tensor(Shape{1}, r.nll_nats))[0];
    }
    return r;
  }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.config = cfg_.dump();
    for (const auto& p : model_->parameters()) c.params.push_back({p.name, p.var.value()});
    for (const auto& layer : model_->layers()) {
      if (layer->kind() == LayerKind::actnorm && static_cast<const ActNorm&>(*layer).params().initialized) {
        c.initialized_layers.push_back(layer->name());
      }
    }
    c.step = step_;
    c.epoch = epoch_;
    c.batch = batch_;
    c.best_valid = best_valid_;
    c.optimizer_step = optim_.step_count();
    c.adam_m = optim_.first_moments();
    c.adam_v = optim_.second_moments();
    std::ostringstream rs;
    rs << rng_;
    c.rng_state = rs.str();
    return c;
  }

  // Restores parameters, optimizer, counters and RNG. The model architecture
  // comes from this trainer's configuration and must match.
  void restore(const Checkpoint& c) {
    restore_parameters(*model_, c);
    optim_.restore(c.optimizer_step, c.adam_m, c.adam_v);
    step_ = c.step;
    epoch_ = c.epoch;
    batch_ = c.batch;
    best_valid_ = c.best_valid;
    std::istringstream rs(c.rng_state);
    rs >> rng_;
    if (!rs) throw DataError("checkpoint RNG state is unreadable");
    order_.clear();
  }

  // Rebuilds a trainer from a checkpoint file using its embedded configuration.
  static std::unique_ptr<Trainer> from_checkpoint(const Checkpoint& c, const std::vector<std::string>& overrides = {},
                                                  std::string out_dir = {}) {
    Config cfg = Config::resolve(c.config, overrides, "checkpoint config");
    auto t = std::make_unique<Trainer>(cfg, load_data(cfg), std::move(out_dir));
    t->restore(c);
    return t;
  }

 private:
  std::optional<Tensor> condition(const Dataset& batch) const {
    if (!model_->config().conditional()) return std::nullopt;
    return one_hot(batch.labels, model_->config().num_classes);
  }

  void check_data(const Dataset& d, const std::string& split) const {
    const ModelConfig& m = model_->config();
    const Shape want{m.height, m.width, m.channels};
    const Shape got(d.x.shape().begin() + 1, d.x.shape().end());
    if (got != want) {
      throw ConfigError("model expects samples of shape " + to_string(want) + " but the " + split +
                        " data has " + to_string(got));
    }
    if (m.conditional()) {
      if (!d.labeled()) throw ConfigError("conditional model (model.num_classes > 0) needs labeled data");
      for (int l : d.labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= m.num_classes) {
          throw DataError(split + " label " + std::to_string(l) + " is outside [0, " + std::to_string(m.num_classes) +
                          ")");
        }
      }
    }
    if (d.quantized && d.n_bits != m.n_bits) {
      throw ConfigError("data has " + std::to_string(d.n_bits) + " bits per value, model.n_bits is " +
                        std::to_string(m.n_bits));
    }
  }

  void emit(const LogRecord& r) {
    if (sink_) sink_(r);
  }

  void end_epoch() {
    batch_ = 0;
    ++epoch_;
    validate_and_checkpoint();
  }

  void validate_and_checkpoint() {
    const EvalResult v = evaluate(data_.valid);
    LogRecord r;
    r.step = step_;
    r.epoch = epoch_;
    r.split = "valid";
    r.nll_nats = v.nll_nats;
    r.bits_per_dim = v.bits_per_dim;
    r.lr = optim_.lr_at(optim_.step_count());
    emit(r);
    const bool best = v.nll_nats < best_valid_;
    if (best) best_valid_ = v.nll_nats;
    if (out_dir_.empty()) return;
    const std::filesystem::path dir(out_dir_);
    const Checkpoint c = checkpoint();
    save_checkpoint((dir / "last.dlfc").string(), c);
    if (best) save_checkpoint((dir / "best.dlfc").string(), c);
  }

  // Per-layer log-determinants and the largest |log s| of each dynamic linear
  // layer on the failing batch.
  std::string diagnostics(const Tensor& x, const std::optional<Tensor>& cond) const {
    std::ostringstream os;
    os.precision(6);
    os << "diagnostics (per-layer mean logdet, max |log s|):";
    ad::NoGradGuard guard;
    const ad::Var c = cond ? ad::constant(*cond) : ad::Var();
    Tensor h = x;
    for (const auto& layer : model_->layers()) {
      const ad::Var lc = layer->kind() == LayerKind::dynlin ? c : ad::Var();
      LayerOutput out;
      try {
        out = layer->forward(ad::constant(h), lc);
      } catch (const Error& e) {
        os << "\n  " << layer->name() << ": " << e.what();
        break;
      }
      double mean = 0.0;
      for (double v : out.logdet.value().data()) mean += v;
      os << "\n  " << layer->name() << ": logdet=" << mean / static_cast<double>(out.logdet.value().size());
      if (layer->kind() == LayerKind::dynlin) {
        const auto& dl = static_cast<const DynamicLinear&>(*layer);
        const std::size_t k = dl.config().partitions, p = dl.partition_channels();
        auto xs = ad::channel_split(ad::constant(h), std::vector<std::size_t>(k, p));
        auto ys = ad::channel_split(out.y, std::vector<std::size_t>(k, p));
        double worst = 0.0;
        for (std::size_t i = dl.config().identity_first ? 1 : 0; i < k; ++i) {
          const ad::Var driver = i == 0 ? ad::Var() : (dl.config().variant == DynLinVariant::standard ? xs[i - 1] : ys[i - 1]);
          for (double v : dl.scale_shift(i, driver, h.shape(), lc).log_scale.value().data()) {
            worst = std::max(worst, std::abs(v));
          }
        }
        os << " max|log s|=" << worst;
      }
      if (!out.y.value().all_finite()) {
        os << " (non-finite output)";
        break;
      }
      h = out.y.value();
    }
    return os.str();
  }

  Config cfg_;
  DataSplit data_;
  std::string out_dir_;
  Sink sink_;
  std::unique_ptr<Model> model_;
  Adam optim_;
  std::mt19937_64 rng_;
  std::size_t batch_size_ = 64, eval_batch_ = 500;
  std::uint64_t step_ = 0, epoch_ = 0, batch_ = 0;
  double best_valid_ = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order_;
  std::uint64_t order_epoch_ = std::numeric_limits<std::uint64_t>::max();
};

}  // namespace dlf
