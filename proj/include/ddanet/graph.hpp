#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "ddanet/tensor.hpp"

namespace ddanet {

using NodeId = std::int32_t;

template <typename T>
class Graph;

// A tensor value, optionally tracked by a computation graph.
//
// Untracked vars are immutable and may be shared across threads. Tracked vars
// belong to exactly one Graph and must not outlive it.
template <typename T>
class Var {
 public:
  Var() = default;

  explicit Var(Tensor<T> value) : value_(std::make_shared<const Tensor<T>>(std::move(value))) {}
  explicit Var(std::shared_ptr<const Tensor<T>> value) : value_(std::move(value)) {}

  // Non-owning, untracked view. `t` must outlive the Var and everything derived from it.
  static Var view(const Tensor<T>& t) {
    Var v;
    v.value_ = std::shared_ptr<const Tensor<T>>(std::shared_ptr<const Tensor<T>>{}, &t);
    return v;
  }

  const Tensor<T>& value() const { return *value_; }
  const std::shared_ptr<const Tensor<T>>& value_ptr() const { return value_; }
  const Shape& shape() const { return value_->shape(); }
  bool defined() const { return static_cast<bool>(value_); }

  bool tracked() const { return graph_ != nullptr; }
  Graph<T>* graph() const { return graph_; }
  NodeId node() const { return node_; }

 private:
  friend class Graph<T>;
  std::shared_ptr<const Tensor<T>> value_;
  Graph<T>* graph_ = nullptr;
  NodeId node_ = -1;
};

// Gradients of every tracked leaf after a backward pass.
template <typename T>
class Gradients {
 public:
  const Tensor<T>& of(NodeId node) const {
    auto it = grads_.find(node);
    if (it == grads_.end()) throw InvalidArgument("node " + std::to_string(node) + " is not a tracked leaf");
    return it->second;
  }
  const Tensor<T>& of(const Var<T>& v) const { return of(v.node()); }

  // Gradient of a parameter registered with Graph::parameter().
  const Tensor<T>& of(const Tensor<T>& param) const {
    auto it = params_.find(&param);
    if (it == params_.end()) throw InvalidArgument("tensor was never registered as a graph parameter");
    return of(it->second);
  }
  bool has(const Tensor<T>& param) const { return params_.count(&param) != 0; }

  std::size_t size() const { return grads_.size(); }
  const std::map<NodeId, Tensor<T>>& all() const { return grads_; }

 private:
  friend class Graph<T>;
  std::map<NodeId, Tensor<T>> grads_;
  std::unordered_map<const Tensor<T>*, NodeId> params_;
};

// Append-only reverse-mode tape for one forward pass.
template <typename T>
class Graph {
 public:
  // Fills grad_in[k] for every input k with needs[k] set; other entries stay empty.
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, std::span<Tensor<T>> grad_in,
                                        std::span<const bool> needs)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value) {
    return push_leaf(std::make_shared<const Tensor<T>>(std::move(value)));
  }

  // Registers a parameter without copying it. The same tensor always maps to the same node.
  Var<T> parameter(const Tensor<T>& p) {
    auto it = params_.find(&p);
    if (it != params_.end()) {
      Var<T> v;
      v.value_ = nodes_[it->second].value;
      v.graph_ = this;
      v.node_ = it->second;
      return v;
    }
    Var<T> v = push_leaf(std::shared_ptr<const Tensor<T>>(std::shared_ptr<const Tensor<T>>{}, &p));
    params_.emplace(&p, v.node_);
    return v;
  }

  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Builds the result of an op. The node is recorded only if some input is
  // tracked by a recording graph; otherwise the result is a plain value.
  static Var<T> record(Tensor<T> out, std::initializer_list<const Var<T>*> inputs, BackwardFn backward) {
    return record(std::make_shared<const Tensor<T>>(std::move(out)), inputs, std::move(backward));
  }

  // Same, for ops whose backward captures their own output.
  static Var<T> record(std::shared_ptr<const Tensor<T>> out, std::initializer_list<const Var<T>*> inputs,
                       BackwardFn backward) {
    Graph* g = nullptr;
    for (const Var<T>* in : inputs) {
      if (!in->tracked() || !in->graph()->recording()) continue;
      if (g && g != in->graph()) throw InvalidArgument("op mixes vars from different graphs");
      g = in->graph();
    }
    if (!g) return Var<T>(std::move(out));

    Node node;
    node.value = std::move(out);
    for (const Var<T>* in : inputs) {
      node.inputs.push_back(in->tracked() && in->graph() == g ? in->node() : -1);
    }
    node.backward = std::move(backward);
    Var<T> v;
    v.value_ = node.value;
    v.graph_ = g;
    v.node_ = static_cast<NodeId>(g->nodes_.size());
    g->nodes_.push_back(std::move(node));
    return v;
  }

  // Reverse accumulation from a scalar. Nodes are visited in reverse insertion
  // order, so repeated runs accumulate in the same order.
  Gradients<T> backward(const Var<T>& loss) const {
    if (loss.graph() != this) throw InvalidArgument("loss was not produced by this graph");
    if (loss.value().numel() != 1) {
      throw InvalidArgument("loss must be a scalar, got shape " + to_string(loss.shape()));
    }
    std::vector<Tensor<T>> grads(nodes_.size());
    grads[loss.node()] = Tensor<T>(loss.shape(), T{1});

    for (NodeId id = loss.node(); id >= 0; --id) {
      const Node& node = nodes_[id];
      if (node.leaf || grads[id].empty()) continue;
      std::vector<Tensor<T>> grad_in(node.inputs.size());
      std::unique_ptr<bool[]> needs(new bool[node.inputs.size()]);
      bool any = false;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        needs[k] = node.inputs[k] >= 0;
        any = any || needs[k];
      }
      if (any) {
        node.backward(grads[id], grad_in, std::span<const bool>(needs.get(), node.inputs.size()));
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
          if (!needs[k] || grad_in[k].empty()) continue;
          accumulate(grads[node.inputs[k]], std::move(grad_in[k]));
        }
      }
      grads[id] = Tensor<T>();
    }

    Gradients<T> out;
    for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
      if (!nodes_[id].leaf) continue;
      if (grads[id].empty()) {
        out.grads_.emplace(id, Tensor<T>(nodes_[id].value->shape()));
      } else {
        out.grads_.emplace(id, std::move(grads[id]));
      }
    }
    out.params_ = params_;
    return out;
  }

 private:
  struct Node {
    std::shared_ptr<const Tensor<T>> value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool leaf = false;
  };

  Var<T> push_leaf(std::shared_ptr<const Tensor<T>> value) {
    Node node;
    node.value = value;
    node.leaf = true;
    Var<T> v;
    v.value_ = std::move(value);
    v.graph_ = this;
    v.node_ = static_cast<NodeId>(nodes_.size());
    nodes_.push_back(std::move(node));
    return v;
  }

  static void accumulate(Tensor<T>& into, Tensor<T>&& g) {
    if (into.empty()) {
      into = std::move(g);
      return;
    }
    if (into.shape() != g.shape()) {
      throw InvalidArgument("gradient shape " + to_string(g.shape()) + " does not match " + to_string(into.shape()));
    }
    T* dst = into.raw();
    const T* src = g.raw();
    const std::size_t n = into.numel();
    for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, NodeId> params_;
  bool recording_ = true;
};

}  // namespace ddanet
