#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qbn/error.hpp"
#include "qbn/rng.hpp"

namespace qbn {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 4;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

namespace detail {

// One record of the dynamic graph. Non-leaf nodes keep their inputs alive
// and a backward rule that reads `grad` and accumulates into the inputs.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Graph recording is on by default. NoGradGuard turns it off for the current
// thread, which is how evaluation workers run forward passes over shared
// parameters without building graphs.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major tensor of rank 0..4 with reverse-mode autodiff.
//
// BasicTensor is a handle: copies share storage and graph position, the same
// way a parameter is shared between every expression that reads it. Use
// clone() for an independent leaf. Training runs in float; the double
// instantiation exists for gradient verification.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor zeros(const Shape& shape, bool requires_grad = false);
  static BasicTensor full(const Shape& shape, T value,
                          bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  // Internal constructor used by ops.
  static BasicTensor from_node(NodePtr node) {
    BasicTensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;

  std::span<const T> values() const;
  // Direct write access for optimizers and finite-difference probes. Writing
  // through this while a graph that read the tensor is alive invalidates that
  // graph's saved activations.
  std::span<T> mutable_values();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool requires_grad);
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  BasicTensor grad_tensor() const;
  void zero_grad();

  // Reverse pass from a rank-0 loss. Leaf gradients accumulate across calls
  // until zero_grad(); intermediate gradients are recomputed each call.
  void backward() const;

  BasicTensor detach() const;
  BasicTensor clone() const;
  template <typename U>
  BasicTensor<U> cast() const;

  const char* op_name() const;
  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Parameter and gradient-check input lists.
template <typename T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

// Topologically ordered view of the graph under a root: inputs precede the
// nodes that consume them, each node appears once.
struct GraphRecord {
  std::string op;
  Shape shape;
  std::vector<std::size_t> inputs;  // indices into Graph::nodes
};

struct Graph {
  std::vector<GraphRecord> nodes;
};

template <typename T>
Graph graph_of(const BasicTensor<T>& root);

// ---------------------------------------------------------------------------
// Operations. Elementwise binaries accept equal shapes or a trailing-suffix
// broadcast (one operand's shape equals the trailing dims of the other's).
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b);

// alpha * x + beta
template <typename T>
BasicTensor<T> affine(const BasicTensor<T>& x, T alpha, T beta);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T alpha) {
  return affine(x, alpha, T(0));
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

// a[..., m, k] x b[k, n] (b shared over leading dims) or
// a[L..., m, k] x b[L..., k, n] (batched, identical leading dims).
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// Swap the last two axes.
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape);
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x,
                       const std::vector<std::size_t>& axes);
// Insert a new axis of extent `count` at `axis`, repeating x along it.
template <typename T>
BasicTensor<T> expand(const BasicTensor<T>& x, std::size_t axis,
                      std::size_t count);

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, std::size_t axis);
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis,
                     std::size_t begin, std::size_t end);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x, std::size_t axis);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, std::size_t axis);
template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean_all(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

// Normalizes over the last axis; gamma and beta have the last axis' extent.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5));

// Row lookup: result shape is ids_shape + [table.dim(1)].
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table,
                         std::span<const std::int32_t> ids,
                         const Shape& ids_shape);

// Inverted dropout; identity when rate == 0.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, CounterRng& rng);

// Mean softmax cross-entropy of logits[B, C] against class indices.
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const std::int32_t> targets);

template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return add(a, b);
}
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return sub(a, b);
}
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return mul(a, b);
}

}  // namespace qbn
