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

// Tensor-level reverse-mode differentiation.
//
// Every operation returns a Var wrapping a graph node that owns its value and,
// when any input requires a gradient, a closure that pushes the node's gradient
// back to its parents. backward() walks the graph once in reverse topological
// order. Graph recording is suppressed inside a NoGradGuard, which is how the
// inverse passes and evaluation run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dlf/errors.hpp"
#include "dlf/linalg.hpp"
#include "dlf/tensor.hpp"

namespace dlf::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool backward_done = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool has_grad() const { return !grad.empty(); }

  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }

  void accumulate(const Tensor& g) {
    if (grad.empty()) {
      value.require_same_shape(g, "gradient accumulation");
      grad = g;
    } else {
      grad += g;
    }
  }
};

using NodePtr = std::shared_ptr<Node>;

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return node_->has_grad(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& name() const { return node_->name; }

  // Parameters are mutated in place by the optimizer and initializers.
  Tensor& mutable_value() const { return node_->value; }
  void zero_grad() const {
    node_->grad = Tensor();
    node_->backward_done = false;
  }

  Node* get() const { return node_.get(); }
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

inline Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var parameter(Tensor value, std::string name = {}) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->name = std::move(name);
  return Var(std::move(n));
}

namespace detail {

inline Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (grad_enabled()) {
    for (const Var& v : inputs) {
      if (v.defined() && v.requires_grad()) n->requires_grad = true;
    }
  }
  if (n->requires_grad) {
    for (Var& v : inputs) {
      if (v.defined()) n->parents.push_back(v.node());
    }
    n->backward_fn = std::move(fn);
  }
  return Var(std::move(n));
}

enum class Broadcast { same, scalar, channel };

inline Broadcast classify(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.size() == 1) return Broadcast::scalar;
  if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.shape().back()) return Broadcast::channel;
  throw ContractError(std::string(op) + ": operand shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                      " are not broadcast-compatible (equal, scalar, or per-channel)");
}

inline double bval(const Tensor& b, Broadcast kind, std::size_t i, std::size_t channels) {
  switch (kind) {
    case Broadcast::same:
      return b[i];
    case Broadcast::scalar:
      return b[0];
    case Broadcast::channel:
      return b[i % channels];
  }
  return 0.0;
}

// Reduces a full-shape gradient onto the broadcast operand.
inline Tensor reduce_to(const Tensor& g, const Tensor& b, Broadcast kind) {
  if (kind == Broadcast::same) return g;
  Tensor out(b.shape());
  if (kind == Broadcast::scalar) {
    out[0] = g.sum();
  } else {
    const std::size_t c = b.dim(0);
    for (std::size_t i = 0; i < g.size(); ++i) out[i % c] += g[i];
  }
  return out;
}

inline std::size_t last_dim(const Tensor& t) { return t.rank() ? t.shape().back() : 1; }

}  // namespace detail

enum class Elementwise { add, sub, mul, div, exp, log, tanh, relu, neg };

inline Var add(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  auto kind = detail::classify(av, bv, "add");
  const std::size_t c = detail::last_dim(av);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + detail::bval(bv, kind, i, c);
  NodePtr an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, [an, bn, kind](Node& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) bn->accumulate(detail::reduce_to(self.grad, bn->value, kind));
  });
}

inline Var sub(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  auto kind = detail::classify(av, bv, "sub");
  const std::size_t c = detail::last_dim(av);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - detail::bval(bv, kind, i, c);
  NodePtr an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, [an, bn, kind](Node& self) {
    if (an->requires_grad) an->accumulate(self.grad);
    if (bn->requires_grad) {
      Tensor g = detail::reduce_to(self.grad, bn->value, kind);
      g *= -1.0;
      bn->accumulate(g);
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  auto kind = detail::classify(av, bv, "mul");
  const std::size_t c = detail::last_dim(av);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * detail::bval(bv, kind, i, c);
  NodePtr an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, [an, bn, kind, c](Node& self) {
    const Tensor& g = self.grad;
    if (an->requires_grad) {
      Tensor ga(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * detail::bval(bn->value, kind, i, c);
      an->accumulate(ga);
    }
    if (bn->requires_grad) {
      Tensor gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * an->value[i];
      bn->accumulate(detail::reduce_to(gb, bn->value, kind));
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  auto kind = detail::classify(av, bv, "div");
  for (double v : bv.data()) {
    if (v == 0.0) throw DomainError("div: divisor contains zero");
  }
  const std::size_t c = detail::last_dim(av);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / detail::bval(bv, kind, i, c);
  NodePtr an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, [an, bn, kind, c](Node& self) {
    const Tensor& g = self.grad;
    if (an->requires_grad) {
      Tensor ga(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / detail::bval(bn->value, kind, i, c);
      an->accumulate(ga);
    }
    if (bn->requires_grad) {
      Tensor gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = detail::bval(bn->value, kind, i, c);
        gb[i] = -g[i] * an->value[i] / (d * d);
      }
      bn->accumulate(detail::reduce_to(gb, bn->value, kind));
    }
  });
}

namespace detail {

template <class F, class DF>
Var unary(const Var& a, F f, DF df_from_x_y) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  NodePtr an = a.node();
  return make_result(std::move(out), {a}, [an, df_from_x_y](Node& self) {
    Tensor ga(self.grad.shape());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = self.grad[i] * df_from_x_y(an->value[i], self.value[i]);
    an->accumulate(ga);
  });
}

}  // namespace detail

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw DomainError("log: argument must be strictly positive, got " + std::to_string(v));
  }
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// log|a|, derivative 1/a.
inline Var log_abs(const Var& a) {
  for (double v : a.value().data()) {
    if (v == 0.0) throw DomainError("log_abs: argument contains zero");
  }
  return detail::unary(a, [](double x) { return std::log(std::abs(x)); }, [](double x, double) { return 1.0 / x; });
}

inline Var tanh(const Var& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var neg(const Var& a) {
  return detail::unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var scale(const Var& a, double k) {
  return detail::unary(a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

inline Var add_scalar(const Var& a, double k) {
  return detail::unary(a, [k](double x) { return x + k; }, [](double, double) { return 1.0; });
}

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// Elementwise op with caller-supplied value and derivative. Used by tests to
// build deliberately wrong gradient rules for the checker self-test.
template <class F, class DF>
Var custom_unary(const Var& a, F f, DF df) {
  return detail::unary(a, f, [df](double x, double) { return df(x); });
}

inline Var elementwise(Elementwise kind, const Var& a, const std::optional<Var>& b = std::nullopt) {
  auto need_b = [&]() -> const Var& {
    if (!b || !b->defined()) throw ContractError("binary elementwise op requires a second operand");
    return *b;
  };
  switch (kind) {
    case Elementwise::add:
      return add(a, need_b());
    case Elementwise::sub:
      return sub(a, need_b());
    case Elementwise::mul:
      return mul(a, need_b());
    case Elementwise::div:
      return div(a, need_b());
    case Elementwise::exp:
      return exp(a);
    case Elementwise::log:
      return log(a);
    case Elementwise::tanh:
      return tanh(a);
    case Elementwise::relu:
      return relu(a);
    case Elementwise::neg:
      return neg(a);
  }
  throw ContractError("unknown elementwise kind");
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

// NHWC convolution, stride 1, zero same-padding. kernel is [kh, kw, c_in, c_out].
inline Var conv2d(const Var& input, const Var& kernel, const Var& bias = Var()) {
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  if (x.rank() != 4) throw ContractError("conv2d: input must be NHWC, got " + to_string(x.shape()));
  if (k.rank() != 4) throw ContractError("conv2d: kernel must be [kh,kw,c_in,c_out], got " + to_string(k.shape()));
  const std::size_t kh = k.dim(0), kw = k.dim(1), ci = k.dim(2), co = k.dim(3);
  if ((kh != 1 && kh != 3) || (kw != 1 && kw != 3)) throw ContractError("conv2d: kernel must be 1x1 or 3x3");
  if (x.dim(3) != ci) {
    throw ContractError("conv2d: input has " + std::to_string(x.dim(3)) + " channels, kernel expects " +
                        std::to_string(ci));
  }
  if (bias.defined() && (bias.value().rank() != 1 || bias.value().dim(0) != co)) {
    throw ContractError("conv2d: bias must have shape [c_out]");
  }
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  Tensor out(Shape{n, h, w, co});
  const double* xd = x.data().data();
  const double* kd = k.data().data();
  double* od = out.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        double* o = od + ((b * h + i) * w + j) * co;
        if (bias.defined()) {
          for (std::size_t q = 0; q < co; ++q) o[q] = bias.value()[q];
        }
        for (std::size_t dy = 0; dy < kh; ++dy) {
          const long ii = static_cast<long>(i + dy) - ph;
          if (ii < 0 || ii >= static_cast<long>(h)) continue;
          for (std::size_t dx = 0; dx < kw; ++dx) {
            const long jj = static_cast<long>(j + dx) - pw;
            if (jj < 0 || jj >= static_cast<long>(w)) continue;
            const double* xin = xd + ((b * h + ii) * w + jj) * ci;
            const double* kk = kd + (dy * kw + dx) * ci * co;
            for (std::size_t p = 0; p < ci; ++p) {
              const double xv = xin[p];
              const double* krow = kk + p * co;
              for (std::size_t q = 0; q < co; ++q) o[q] += xv * krow[q];
            }
          }
        }
      }
    }
  }
  NodePtr xn = input.node(), kn = kernel.node(), bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Var> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(std::move(out), std::move(inputs), [xn, kn, bn, n, h, w, kh, kw, ci, co, ph, pw](Node& self) {
    const double* g = self.grad.data().data();
    const double* xd = xn->value.data().data();
    const double* kd = kn->value.data().data();
    double* gx = xn->requires_grad ? xn->grad_buffer().data().data() : nullptr;
    double* gk = kn->requires_grad ? kn->grad_buffer().data().data() : nullptr;
    double* gb = (bn && bn->requires_grad) ? bn->grad_buffer().data().data() : nullptr;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const double* go = g + ((b * h + i) * w + j) * co;
          if (gb) {
            for (std::size_t q = 0; q < co; ++q) gb[q] += go[q];
          }
          for (std::size_t dy = 0; dy < kh; ++dy) {
            const long ii = static_cast<long>(i + dy) - ph;
            if (ii < 0 || ii >= static_cast<long>(h)) continue;
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const long jj = static_cast<long>(j + dx) - pw;
              if (jj < 0 || jj >= static_cast<long>(w)) continue;
              const std::size_t xoff = ((b * h + ii) * w + jj) * ci;
              const std::size_t koff = (dy * kw + dx) * ci * co;
              for (std::size_t p = 0; p < ci; ++p) {
                const double* krow = kd + koff + p * co;
                if (gx) {
                  double acc = 0.0;
                  for (std::size_t q = 0; q < co; ++q) acc += go[q] * krow[q];
                  gx[xoff + p] += acc;
                }
                if (gk) {
                  const double xv = xd[xoff + p];
                  double* gkrow = gk + koff + p * co;
                  for (std::size_t q = 0; q < co; ++q) gkrow[q] += xv * go[q];
                }
              }
            }
          }
        }
      }
    }
  });
}

// Splits the last axis into consecutive blocks of the given sizes.
inline std::vector<Var> channel_split(const Var& x, const std::vector<std::size_t>& sizes) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ContractError("channel_split: rank-0 tensor");
  const std::size_t c = xv.shape().back();
  std::size_t total = 0;
  for (std::size_t s : sizes) {
    if (s == 0) throw ContractError("channel_split: sizes must be positive");
    total += s;
  }
  if (total != c) {
    throw ContractError("channel_split: sizes sum to " + std::to_string(total) + " but channel extent is " +
                        std::to_string(c));
  }
  const std::size_t rows = xv.size() / c;
  std::vector<Var> parts;
  parts.reserve(sizes.size());
  std::size_t offset = 0;
  NodePtr xn = x.node();
  for (std::size_t s : sizes) {
    Shape shape = xv.shape();
    shape.back() = s;
    Tensor part(shape);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t q = 0; q < s; ++q) part[r * s + q] = xv[r * c + offset + q];
    }
    parts.push_back(detail::make_result(std::move(part), {x}, [xn, rows, c, s, offset](Node& self) {
      Tensor& gx = xn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t q = 0; q < s; ++q) gx[r * c + offset + q] += self.grad[r * s + q];
      }
    }));
    offset += s;
  }
  return parts;
}

inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat: no parts");
  Shape lead = parts[0].shape();
  if (lead.empty()) throw ContractError("concat: rank-0 tensor");
  std::size_t c = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    Shape s = p.shape();
    if (s.size() != lead.size() || !std::equal(s.begin(), s.end() - 1, lead.begin())) {
      throw ContractError("concat: leading dimensions differ: " + to_string(s) + " vs " + to_string(lead));
    }
    widths.push_back(s.back());
    c += s.back();
  }
  Shape shape = lead;
  shape.back() = c;
  Tensor out(shape);
  const std::size_t rows = out.size() / c;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t q = 0; q < widths[k]; ++q) out[r * c + offset + q] = pv[r * widths[k] + q];
    }
    offset += widths[k];
  }
  std::vector<NodePtr> nodes;
  for (const Var& p : parts) nodes.push_back(p.node());
  return detail::make_result(std::move(out), parts, [nodes, widths, rows, c](Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (nodes[k]->requires_grad) {
        Tensor& g = nodes[k]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t q = 0; q < widths[k]; ++q) g[r * widths[k] + q] += self.grad[r * c + offset + q];
        }
      }
      offset += widths[k];
    }
  });
}

enum class Reduce { sum, mean };

// Reduces over `axes` (all axes when empty / nullopt). The reduced axes are dropped.
inline Var reduce(Reduce kind, const Var& x, const std::optional<std::vector<std::size_t>>& axes = std::nullopt) {
  const Tensor& xv = x.value();
  const std::size_t rank = xv.rank();
  std::vector<bool> reduced(rank, !axes.has_value() || axes->empty());
  if (axes) {
    for (std::size_t a : *axes) {
      if (a >= rank) {
        throw ContractError("reduce: axis " + std::to_string(a) + " invalid for rank " + std::to_string(rank));
      }
      reduced[a] = true;
    }
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t a = 0; a < rank; ++a) {
    if (reduced[a]) {
      count *= xv.dim(a);
    } else {
      out_shape.push_back(xv.dim(a));
    }
  }
  // Map each input element to its output slot.
  std::vector<std::size_t> slot(xv.size());
  {
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      std::size_t o = 0;
      for (std::size_t a = 0; a < rank; ++a) {
        if (!reduced[a]) o = o * xv.dim(a) + idx[a];
      }
      slot[i] = o;
      for (std::size_t a = rank; a-- > 0;) {
        if (++idx[a] < xv.dim(a)) break;
        idx[a] = 0;
      }
    }
  }
  Tensor out(out_shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out[slot[i]] += xv[i];
  const double factor = kind == Reduce::mean ? 1.0 / static_cast<double>(count) : 1.0;
  if (kind == Reduce::mean) out *= factor;
  NodePtr xn = x.node();
  return detail::make_result(std::move(out), {x}, [xn, slot = std::move(slot), factor](Node& self) {
    Tensor& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * self.grad[slot[i]];
  });
}

inline Var sum(const Var& x) { return reduce(Reduce::sum, x); }
inline Var mean(const Var& x) { return reduce(Reduce::mean, x); }

// Sum over every axis except the leading (batch) axis: [N, ...] -> [N].
inline Var sum_per_sample(const Var& x) {
  std::vector<std::size_t> axes;
  for (std::size_t a = 1; a < x.value().rank(); ++a) axes.push_back(a);
  if (axes.empty()) return x;
  return reduce(Reduce::sum, x, axes);
}

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  NodePtr xn = x.node();
  return detail::make_result(std::move(out), {x}, [xn](Node& self) {
    xn->accumulate(self.grad.reshaped(xn->value.shape()));
  });
}

// out[i] = x[index[i]] for a permutation-like index map.
inline Var gather(const Var& x, Shape out_shape, std::vector<std::size_t> index) {
  if (index.size() != numel(out_shape)) throw ContractError("gather: index map length does not match output shape");
  const Tensor& xv = x.value();
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = xv[index[i]];
  NodePtr xn = x.node();
  return detail::make_result(std::move(out), {x}, [xn, index = std::move(index)](Node& self) {
    Tensor& gx = xn->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += self.grad[i];
  });
}

// [m,k] x [k,n] -> [m,n]
inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ContractError("matmul: incompatible shapes " + to_string(av.shape()) + " x " + to_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += x * bv[p * n + j];
    }
  }
  NodePtr an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, [an, bn, m, k, n](Node& self) {
    const Tensor& g = self.grad;
    if (an->requires_grad) {
      Tensor& ga = an->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bn->value[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      Tensor& gb = bn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double x = an->value[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += x * g[i * n + j];
        }
      }
    }
  });
}

inline Var transpose(const Var& a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw ContractError("transpose: expected a matrix, got " + to_string(av.shape()));
  const std::size_t r = av.dim(0), c = av.dim(1);
  std::vector<std::size_t> index(r * c);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < r; ++j) index[i * r + j] = j * c + i;
  }
  return gather(a, Shape{c, r}, std::move(index));
}

// [N, C] -> [N, H, W, C], repeating each row over the spatial grid.
inline Var broadcast_spatial(const Var& x, std::size_t h, std::size_t w) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw ContractError("broadcast_spatial: expected [N,C], got " + to_string(xv.shape()));
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  std::vector<std::size_t> index(n * h * w * c);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < h * w; ++p) {
      for (std::size_t q = 0; q < c; ++q) index[(b * h * w + p) * c + q] = b * c + q;
    }
  }
  return gather(x, Shape{n, h, w, c}, std::move(index));
}

// log|det W| of a square matrix; gradient W^{-T}.
inline Var logabsdet(const Var& w, const std::string& context = "logabsdet") {
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || wv.dim(0) != wv.dim(1)) throw ContractError(context + ": expected a square matrix");
  const std::size_t n = wv.dim(0);
  linalg::LuDecomposition lu(wv.data(), n);
  if (lu.singular()) {
    throw DomainError(context + ": matrix is singular (|det| < " + std::to_string(linalg::kSingularDetThreshold) + ")");
  }
  NodePtr wn = w.node();
  return detail::make_result(Tensor::scalar(lu.log_abs_det()), {w}, [wn, n](Node& self) {
    linalg::LuDecomposition lu(wn->value.data(), n);
    const std::vector<double> inv = lu.inverse();
    Tensor& g = wn->grad_buffer();
    const double go = self.grad[0];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += go * inv[j * n + i];
    }
  });
}

// Gradients keyed by graph node.
class Gradients {
 public:
  void set(const Node* node, Tensor g) { grads_[node] = std::move(g); }
  bool contains(const Var& v) const { return grads_.count(v.get()) != 0; }
  const Tensor& of(const Var& v) const {
    auto it = grads_.find(v.get());
    if (it == grads_.end()) throw ContractError("no gradient recorded for node '" + v.name() + "'");
    return it->second;
  }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const Node*, Tensor> grads_;
};

// Propagates d(loss)/d(node) to every requires_grad ancestor. Leaves (parameters)
// keep their gradient until zero_grad(); calling backward again while leaf
// gradients are populated is rejected unless `accumulate` is set.
inline Gradients backward(const Var& loss, bool accumulate = false) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw ContractError("backward: loss must be a scalar node, got shape " +
                        (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  Gradients result;
  if (!loss.requires_grad()) return result;
  if (loss.get()->backward_done && !accumulate) {
    throw ContractError("backward: already called on this graph; pass accumulate=true to add gradients");
  }

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.get(), 0}};
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  if (!accumulate) {
    for (Node* n : order) {
      if (n->parents.empty() && n->has_grad()) {
        throw ContractError("backward: gradient already populated for '" + n->name +
                            "'; call zero_grad() or pass accumulate=true");
      }
    }
  }
  // Interior nodes start clean on every pass.
  for (Node* n : order) {
    if (!n->parents.empty()) n->grad = Tensor();
  }

  loss.get()->grad = Tensor(loss.shape(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
  loss.get()->backward_done = true;
  for (Node* n : order) {
    if (n->parents.empty() && n->has_grad()) result.set(n, n->grad);
  }
  return result;
}

}  // namespace dlf::ad
