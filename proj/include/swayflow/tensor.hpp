#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "swayflow/common.hpp"

namespace swayflow {

template <class S>
class Graph;

namespace detail {

template <class S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  uint64_t graph_id = 0;  // graph that produced this node; 0 for leaves
  int64_t tape_pos = -1;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

template <class S>
using NodePtr = std::shared_ptr<Node<S>>;

}  // namespace detail

// Dense row-major tensor with optional reverse-mode gradient. Copies share
// storage (value semantics over a shared node). Values are treated as
// immutable once created; mutable_data() exists for parameter updates and
// must only be used while no Graph is recording.
template <class S = float>
class Tensor {
 public:
  using Scalar = S;

  Tensor() : node_(std::make_shared<detail::Node<S>>()) { node_->shape = {0}; }

  Tensor(Shape shape, std::vector<S> values)
      : node_(std::make_shared<detail::Node<S>>()) {
    validate_shape(shape);
    if (static_cast<int64_t>(values.size()) != swayflow::numel(shape))
      fail("tensor data length ", values.size(), " does not match shape ",
           shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) {
    validate_shape(shape);
    std::vector<S> v(static_cast<std::size_t>(swayflow::numel(shape)), S(0));
    return Tensor(std::move(shape), std::move(v));
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }

  static Tensor full(Shape shape, S value) {
    validate_shape(shape);
    std::vector<S> v(static_cast<std::size_t>(swayflow::numel(shape)), value);
    return Tensor(std::move(shape), std::move(v));
  }

  static Tensor scalar(S value) { return Tensor({1}, {value}); }

  static Tensor from_node(detail::NodePtr<S> node) { return Tensor(std::move(node)); }

  const Shape& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t dim(int64_t i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  const std::vector<S>& data() const { return node_->value; }
  std::vector<S>& mutable_data() { return node_->value; }

  S item() const {
    if (numel() != 1)
      fail("item() requires a single-element tensor, got shape ", shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool want) {
    node_->requires_grad = want;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (!has_grad())
      fail("tensor has no gradient; run backward over a graph that reaches it");
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), S(0)); }

  // Deep copy of the values into a fresh, detached node.
  Tensor clone() const { return Tensor(shape(), data()); }

  detail::NodePtr<S> impl() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr<S> node) : node_(std::move(node)) {}
  detail::NodePtr<S> node_;
};

// Reverse-mode tape. Constructing a Graph makes it the thread's active
// recorder; ops record themselves when any input requires a gradient. One
// Graph belongs to one thread, and one backward pass consumes it — replaying
// the reverse pass requires a new Graph.
template <class S>
class Graph {
 public:
  Graph() {
    if (tl_current != nullptr)
      fail("a Graph is already active on this thread; nesting is not supported");
    id_ = next_id();
    tl_current = this;
  }
  ~Graph() {
    if (tl_current == this) tl_current = nullptr;
  }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* current() { return tl_current; }

  void record(detail::NodePtr<S> out, std::vector<detail::NodePtr<S>> inputs,
              std::function<void()> backward_fn) {
    if (consumed_)
      fail("graph already consumed by backward; recording requires a new Graph");
    out->graph_id = id_;
    out->tape_pos = static_cast<int64_t>(records_.size());
    records_.push_back(Record{std::move(out), std::move(inputs), std::move(backward_fn)});
  }

  void backward(const Tensor<S>& loss) {
    if (consumed_)
      fail("backward already ran on this graph; replaying the reverse pass requires a new Graph");
    auto n = loss.impl();
    if (n->value.size() != 1)
      fail("backward requires a scalar loss, got shape ", shape_str(n->shape));
    if (n->graph_id != id_ || n->tape_pos < 0)
      fail("loss is detached: it was not produced under this Graph");
    consumed_ = true;
    n->grad.assign(1, S(1));
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // no gradient reached this value
      it->backward_fn();
    }
  }

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }
  uint64_t id() const { return id_; }

  // Every recorded op must consume only values created earlier on the tape
  // (or leaves). Holds by construction; exposed for property tests.
  bool topologically_ordered() const {
    for (std::size_t i = 0; i < records_.size(); ++i)
      for (const auto& in : records_[i].inputs)
        if (in->graph_id == id_ && in->tape_pos >= static_cast<int64_t>(i)) return false;
    return true;
  }

 private:
  struct Record {
    detail::NodePtr<S> out;
    std::vector<detail::NodePtr<S>> inputs;
    std::function<void()> backward_fn;
  };

  static uint64_t next_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::vector<Record> records_;
  bool consumed_ = false;
  uint64_t id_ = 0;
  inline static thread_local Graph* tl_current = nullptr;
};

// Convenience: backward through the thread's active graph.
template <class S>
void backward(const Tensor<S>& loss) {
  auto* g = Graph<S>::current();
  if (g == nullptr) fail("backward called with no active Graph on this thread");
  g->backward(loss);
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace swayflow
