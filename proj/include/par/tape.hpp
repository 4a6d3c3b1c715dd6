#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "par/array.hpp"

namespace par {

template <typename T>
class Tape;

// Handle to a node recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Array<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
// node list backwards is a topological order of the graph.
template <typename T>
class Tape {
 public:
  // Receives the tape, this node's id and the gradient of its output; accumulates
  // into parents via accumulate().
  using Backward = std::function<void(Tape&, std::size_t, const Array<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // grad_enabled=false records values only; no backward closures are kept.
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}

  Var<T> leaf(Array<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, false, requires_grad && grad_enabled_, nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Array<T> value) { return leaf(std::move(value), false); }

  // Records an op output. The backward closure is dropped when no parent
  // requires a gradient.
  Var<T> record(Array<T> value, std::initializer_list<Var<T>> parents, Backward backward) {
    if (!value.all_finite()) throw NonFiniteError("non-finite value produced on tape");
    bool needs = false;
    if (grad_enabled_) {
      for (const auto& p : parents) needs = needs || nodes_[p.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, false, needs, needs ? std::move(backward) : nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Array<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(const Var<T>& v) const { return requires_grad(v.id()); }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Adds g into the gradient buffer of node `id` (allocated lazily).
  void accumulate(std::size_t id, const Array<T>& g) {
    Array<T>& buf = grad_buffer(id);
    auto dst = buf.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  Array<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = Array<T>(n.value.shape(), T{0});
      n.has_grad = true;
    }
    return n.grad;
  }

  // Runs reverse accumulation from a scalar loss.
  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) {
      throw DimensionError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
    }
    for (auto& n : nodes_) {
      n.grad = Array<T>();
      n.has_grad = false;
    }
    grad_buffer(loss.id())[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, i, n.grad);
    }
  }

  // Gradient w.r.t. a node after backward(); zeros for disconnected nodes.
  Array<T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    if (!n.has_grad) return Array<T>(n.value.shape(), T{0});
    return n.grad;
  }

 private:
  struct Node {
    Array<T> value;
    Array<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

// Gradients of a scalar loss with respect to each requested leaf.
template <typename T>
std::map<std::string, Array<T>> grad(const Var<T>& loss, const std::vector<std::pair<std::string, Var<T>>>& leaves) {
  loss.tape().backward(loss);
  std::map<std::string, Array<T>> out;
  for (const auto& [name, v] : leaves) out.emplace(name, loss.tape().grad(v));
  return out;
}

}  // namespace par
