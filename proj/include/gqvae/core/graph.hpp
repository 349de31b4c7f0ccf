#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gqvae/core/array.hpp"

namespace gqvae::nn {

template <typename T>
struct Parameter {
  std::string name;
  Array<T> value;
  Array<T> grad;
  /// Whether decoupled weight decay applies (weight matrices only).
  bool decay = false;

  void zero_grad() { grad.fill(T(0)); }
};

/// Owns the parameters of a model. Layers refer to parameters by index so
/// models stay copyable values.
template <typename T>
class ParameterStore {
 public:
  std::size_t add(std::string name, Array<T> init, bool decay) {
    Parameter<T> p;
    p.name = std::move(name);
    p.grad = Array<T>(init.shape());
    p.value = std::move(init);
    p.decay = decay;
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return i;
    }
    return std::nullopt;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Parameter<T>> params_;
};

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Array<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return graph->value(id).shape(); }
  Array<T>& grad() const { return graph->grad(id); }
  bool requires_grad() const { return graph->requires_grad(id); }
};

/// Reverse-mode tape. Nodes are appended in topological order, so backward is
/// a single reverse sweep. One graph is built per forward pass.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// When disabled, no backward closures are stored (inference).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  Var<T> leaf(Array<T> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad && grad_enabled_,
                          {}, false});
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> constant(Array<T> value) { return leaf(std::move(value), false); }

  /// Binds a stored parameter into the graph once; repeated calls reuse it.
  Var<T> param(ParameterStore<T>& store, std::size_t index) {
    if (store_ != nullptr && store_ != &store) {
      throw Error("a graph can bind parameters from one store only");
    }
    store_ = &store;
    if (bound_.size() < store.size()) bound_.resize(store.size());
    if (!bound_[index]) {
      Var<T> v = leaf(store[index].value, true);
      bound_[index] = v.id;
    }
    return Var<T>{this, *bound_[index]};
  }

  /// Binds parameter `index` to an existing node, so gradients of the
  /// parameter can be taken with respect to `v` (finite-difference checks).
  void bind_param(ParameterStore<T>& store, std::size_t index, Var<T> v) {
    if (store_ != nullptr && store_ != &store) {
      throw Error("a graph can bind parameters from one store only");
    }
    store_ = &store;
    if (bound_.size() < store.size()) bound_.resize(store.size());
    require_same_shape(v.shape(), store[index].value.shape(), "bind_param");
    bound_[index] = v.id;
  }

  /// Records an op result. The closure runs during backward only if some
  /// parent requires a gradient.
  Var<T> record(Array<T> value, std::initializer_list<Var<T>> parents,
                Backward backward) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || requires_grad(p.id);
    needs = needs && grad_enabled_;
    nodes_.push_back(Node{std::move(value), {}, needs,
                          needs ? std::move(backward) : Backward{}, false});
    return Var<T>{this, nodes_.size() - 1};
  }

  const Array<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Gradient buffer, allocated as zeros on first access.
  Array<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Array<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

  /// Seeds d(root)/d(root) = 1, sweeps the tape backwards and accumulates
  /// gradients of bound parameters into their store.
  void backward(Var<T> root) {
    if (root.value().size() != 1) {
      throw ShapeError("backward() needs a scalar root, got " +
                       shape_string(root.shape()));
    }
    grad(root.id)[0] += T(1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
    if (store_ != nullptr) {
      for (std::size_t p = 0; p < bound_.size(); ++p) {
        if (!bound_[p] || !has_grad(*bound_[p])) continue;
        auto& dst = (*store_)[p].grad;
        const auto& src = nodes_[*bound_[p]].grad;
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

  /// Detached values (stop-gradient targets, straight-through residuals,
  /// argmin indices) pass through detach(). While recording they are appended
  /// to `tape`; while replaying the taped values are returned in call order,
  /// so finite-difference probes hold every detached quantity fixed.
  void record_detached(std::vector<Array<T>>* tape) {
    record_tape_ = tape;
    replay_tape_ = nullptr;
  }
  void replay_detached(const std::vector<Array<T>>* tape) {
    replay_tape_ = tape;
    record_tape_ = nullptr;
    replay_cursor_ = 0;
  }
  bool replaying() const { return replay_tape_ != nullptr; }

  Array<T> detach(Array<T> live) {
    if (record_tape_ != nullptr) record_tape_->push_back(live);
    if (replay_tape_ == nullptr) return live;
    if (replay_cursor_ >= replay_tape_->size()) {
      throw Error("detach replay ran past the recorded tape");
    }
    const Array<T>& taped = (*replay_tape_)[replay_cursor_++];
    require_same_shape(taped.shape(), live.shape(), "detach replay");
    return taped;
  }

 private:
  struct Node {
    Array<T> value;
    Array<T> grad;
    bool requires_grad;
    Backward backward;
    bool has_grad;
  };

  std::deque<Node> nodes_;
  ParameterStore<T>* store_ = nullptr;
  std::vector<std::optional<std::size_t>> bound_;
  bool grad_enabled_ = true;
  std::vector<Array<T>>* record_tape_ = nullptr;
  const std::vector<Array<T>>* replay_tape_ = nullptr;
  std::size_t replay_cursor_ = 0;
};

}  // namespace gqvae::nn
