#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "cdcnas/errors.hpp"
#include "cdcnas/tensor.hpp"

namespace cdcnas {

enum class Partition { Weights, Architecture };

inline const char* to_string(Partition p) { return p == Partition::Weights ? "weights" : "architecture"; }

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Partition partition = Partition::Weights;

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

/// Named non-trainable state (batch-norm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T> value;
};

/// Owns every parameter of a model. Addresses are stable for the store's lifetime.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter<T>& add(const std::string& name, Tensor<T> init, Partition partition) {
    if (index_.count(name) || buffer_index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    auto& p = params_.emplace_back();
    p.name = name;
    p.value = std::move(init);
    p.grad = Tensor<T>(p.value.shape());
    p.partition = partition;
    index_.emplace(name, params_.size() - 1);
    return p;
  }

  Buffer<T>& add_buffer(const std::string& name, Tensor<T> init) {
    if (index_.count(name) || buffer_index_.count(name)) throw ConfigError("duplicate buffer name: " + name);
    auto& b = buffers_.emplace_back();
    b.name = name;
    b.value = std::move(init);
    buffer_index_.emplace(name, buffers_.size() - 1);
    return b;
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Buffer<T>* find_buffer(const std::string& name) {
    auto it = buffer_index_.find(name);
    return it == buffer_index_.end() ? nullptr : &buffers_[it->second];
  }

  std::deque<Parameter<T>>& all() { return params_; }
  const std::deque<Parameter<T>>& all() const { return params_; }
  std::deque<Buffer<T>>& buffers() { return buffers_; }
  const std::deque<Buffer<T>>& buffers() const { return buffers_; }

  std::vector<Parameter<T>*> in(Partition partition) {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) {
      if (p.partition == partition) out.push_back(&p);
    }
    return out;
  }

  std::int64_t count_scalars(Partition partition) const {
    std::int64_t n = 0;
    for (const auto& p : params_) {
      if (p.partition == partition) n += p.value.numel();
    }
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter<T>> params_;
  std::deque<Buffer<T>> buffers_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::size_t> buffer_index_;
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  Tape<T>* tape = nullptr;
  std::size_t id = npos;

  bool valid() const { return tape != nullptr && id != npos; }
  const Tensor<T>& value() const { return tape->value(id); }
  const Shape5& shape() const { return tape->value(id).shape(); }
};

/// Append-only record of primitive ops for reverse-mode differentiation.
///
/// Node ids are assigned in creation order, and an op can only consume
/// already-recorded values, so descending id order is a reverse topological
/// order of the graph.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, {}, nullptr); }

  /// Differentiable input whose gradient is read back with grad().
  Var<T> leaf(Tensor<T> value) { return push("leaf", std::move(value), grad_enabled_, {}, nullptr); }

  /// Leaf bound to a parameter; backward() accumulates into Parameter::grad.
  /// Repeated calls with the same parameter return the same node.
  Var<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>{this, it->second};
    Var<T> v = push("param", p.value, grad_enabled_, {}, nullptr);
    nodes_[v.id].param = &p;
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  /// Records the output of a primitive. The backward rule runs only if some
  /// parent requires a gradient.
  Var<T> record(const char* op, Tensor<T> value, std::vector<std::size_t> parents, BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op + " " + value.shape().str());
    }
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_.at(p).requires_grad;
    return push(op, std::move(value), needs, std::move(parents), needs ? std::move(backward) : nullptr);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Upstream gradient of a node during backward (zeros if nothing flowed in).
  const Tensor<T>& grad_of(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Mutable gradient accumulator of a parent, allocated on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void accumulate(std::size_t id, const Tensor<T>& g) {
    if (!nodes_.at(id).requires_grad) return;
    grad_buffer(id) += g;
  }

  /// Gradient of a leaf after backward().
  const Tensor<T>& grad(Var<T> v) { return grad_of(v.id); }

  /// Reverse sweep from a scalar loss. Parameter gradients are added to
  /// Parameter::grad; parameters the loss does not reach receive nothing.
  void backward(Var<T> loss) {
    if (consumed_) throw TapeError("tape already consumed by a previous backward()");
    if (loss.tape != this) throw TapeError("loss recorded on a different tape");
    if (loss.value().numel() != 1) throw TapeError("loss is not scalar: " + loss.shape().str());
    consumed_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id).fill(T{1});
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (n.grad.empty()) continue;
      if (n.backward) {
        n.backward(*this, id);
        n.grad = Tensor<T>();  // interior gradients are not needed after propagation
      }
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    const char* op = "";
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Var<T> push(const char* op, Tensor<T> value, bool requires_grad, std::vector<std::size_t> parents,
              BackwardFn backward) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.parents = std::move(parents);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

}  // namespace cdcnas
