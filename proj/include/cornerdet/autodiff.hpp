#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cornerdet/tensor.hpp"

namespace cornerdet {

/// Trainable tensor with its gradient accumulator and Adam moments.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> m;
  Tensor<T> v;
  std::int64_t step = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> init)
      : name(std::move(n)),
        value(std::move(init)),
        grad(value.shape()),
        m(value.shape()),
        v(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Graph;

/// Handle to a node of a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Append-only record of tensor operations for reverse-mode differentiation.
///
/// Every node stores its forward value and a closure that, given the node's
/// upstream gradient, accumulates into the gradients of its inputs. Inputs
/// always precede the node that consumes them, so the backward sweep is a
/// single pass in reverse creation order.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  struct Node {
    std::string op;
    std::vector<int> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  /// With `enable_grad == false` nothing is recorded for backward (inference).
  explicit Graph(bool enable_grad = true) : enable_grad_(enable_grad) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return push("constant", {}, std::move(value), false, {}); }

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    return push("leaf", {}, std::move(value), requires_grad && enable_grad_, {});
  }

  Var<T> param(Parameter<T>& p) {
    Var<T> v = push("param", {}, p.value, enable_grad_, {});
    nodes_[v.id].param = &p;
    return v;
  }

  /// Records an op. `fn` is only kept when some input requires a gradient.
  Var<T> record(std::string op, std::vector<Var<T>> inputs, Tensor<T> value, BackwardFn fn) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    bool rg = false;
    for (const auto& in : inputs) {
      if (in.graph != this) throw std::invalid_argument(op + ": input belongs to another graph");
      ids.push_back(in.id);
      rg = rg || nodes_[in.id].requires_grad;
    }
    return push(std::move(op), std::move(ids), std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(int id) const { return nodes_.at(id).value; }
  const Tensor<T>& value(Var<T> v) const { return value(v.id); }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(Var<T> v) const { return requires_grad(v.id); }
  const Node& node(int id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool grad_enabled() const noexcept { return enable_grad_; }

  /// Gradient buffer of a node, zero-initialised on first access.
  Tensor<T>& grad(int id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  /// Gradient of a leaf after backward(); zeros if nothing reached it.
  const Tensor<T>& grad(Var<T> v) { return grad(v.id); }

  /// Reverse sweep from a scalar node. Parameter nodes add into Parameter::grad.
  void backward(Var<T> loss) {
    if (loss.graph != this) throw std::invalid_argument("backward: loss belongs to another graph");
    const Tensor<T>& lv = nodes_.at(loss.id).value;
    for (std::size_t i = 0; i < lv.ndim(); ++i) {
      if (lv.shape()[i] != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
      }
    }
    grad(loss.id).fill(T(1));
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param != nullptr) {
        auto dst = n.param->grad.data();
        auto src = n.grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }

 private:
  Var<T> push(std::string op, std::vector<int> inputs, Tensor<T> value, bool rg, BackwardFn fn) {
    const int id = static_cast<int>(nodes_.size());
    for (int in : inputs) {
      if (in < 0 || in >= id) throw std::logic_error("graph input id not topologically earlier");
    }
    nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(value), {}, rg, std::move(fn), nullptr});
    return Var<T>{this, id};
  }

  std::vector<Node> nodes_;
  bool enable_grad_ = true;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph->value(id);
}

struct AdamConfig {
  double lr = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update; increments each parameter's step counter.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, const AdamConfig& cfg) {
  for (Parameter<T>* p : params) {
    p->step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->step));
    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    const T step_size = static_cast<T>(cfg.lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(cfg.eps);
    auto w = p->value.data();
    auto g = p->grad.data();
    auto m = p->m.data();
    auto v = p->v.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
    }
  }
}

}  // namespace cornerdet
