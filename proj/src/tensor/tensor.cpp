#include "qbn/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace qbn {

namespace {
thread_local bool grad_mode_enabled = true;

void validate_shape(const Shape& shape) {
  if (shape.size() > kMaxRank) {
    throw DimensionError("tensor rank " + std::to_string(shape.size()) +
                         " exceeds maximum rank 4 for shape " +
                         to_string(shape));
  }
  for (std::size_t extent : shape) {
    if (extent == 0) {
      throw DimensionError("tensor extents must be >= 1, got " +
                           to_string(shape));
    }
  }
}

// Reverse topological order is obtained by reversing a post-order DFS.
template <typename T>
std::vector<detail::Node<T>*> topological_order(detail::Node<T>* root,
                                                bool grad_only) {
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> visited;
  struct Frame {
    detail::Node<T>* node;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root);
  while (!stack.empty()) {
    Frame& frame = stack.back();
    if (frame.next_input < frame.node->inputs.size()) {
      detail::Node<T>* child = frame.node->inputs[frame.next_input++].get();
      if (grad_only && !child->requires_grad) continue;
      if (visited.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(frame.node);
      stack.pop_back();
    }
  }
  return order;
}
}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool enabled) { grad_mode_enabled = enabled; }

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values,
                            bool requires_grad) {
  validate_shape(shape);
  if (element_count(shape) != values.size()) {
    throw DimensionError("shape " + to_string(shape) + " needs " +
                         std::to_string(element_count(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(const Shape& shape, T value,
                                    bool requires_grad) {
  validate_shape(shape);
  return BasicTensor(shape, std::vector<T>(element_count(shape), value),
                     requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

template <typename T>
std::size_t BasicTensor<T>::numel() const {
  return element_count(shape());
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + to_string(s));
  }
  return s[axis];
}

template <typename T>
std::span<const T> BasicTensor<T>::values() const {
  shape();
  return node_->data;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_values() {
  shape();
  return node_->data;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + to_string(shape()));
  }
  return node_->data[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) {
    throw DimensionError("index rank mismatch for shape " + to_string(s));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) {
      throw DimensionError("index out of range for shape " + to_string(s));
    }
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool requires_grad) {
  shape();
  if (!node_->is_leaf()) {
    throw ContractError("requires_grad can only be changed on leaf tensors");
  }
  node_->requires_grad = requires_grad;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  return node_ && !node_->grad.empty();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::grad_tensor() const {
  return BasicTensor(shape(), std::vector<T>(grad().begin(), grad().end()));
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  if (node_ && !node_->grad.empty()) {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (rank() != 0) {
    throw ContractError("backward() needs a rank-0 loss, got shape " +
                        to_string(shape()));
  }
  if (!node_->requires_grad) {
    throw ContractError("backward() on a loss that does not require grad");
  }
  auto order = topological_order(node_.get(), /*grad_only=*/true);
  // Interior gradients are allocated on first accumulation and released as
  // soon as they have been propagated, so only the frontier is resident.
  for (detail::Node<T>* node : order) {
    if (!node->is_leaf()) std::vector<T>().swap(node->grad);
  }
  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->is_leaf() || node->grad.empty()) continue;  // empty: zero gradient
    node->backward(*node);
    std::vector<T>().swap(node->grad);
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(shape(), node_->data, false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(shape(), node_->data, requires_grad());
}

template <typename T>
template <typename U>
BasicTensor<U> BasicTensor<T>::cast() const {
  std::vector<U> out(node_->data.begin(), node_->data.end());
  return BasicTensor<U>(shape(), std::move(out), requires_grad());
}

template <typename T>
const char* BasicTensor<T>::op_name() const {
  shape();
  return node_->op;
}

template <typename T>
Graph graph_of(const BasicTensor<T>& root) {
  auto order = topological_order(root.node().get(), /*grad_only=*/false);
  std::unordered_map<const detail::Node<T>*, std::size_t> index;
  Graph graph;
  for (detail::Node<T>* node : order) {
    GraphRecord record;
    record.op = node->op;
    record.shape = node->shape;
    for (const auto& input : node->inputs) {
      record.inputs.push_back(index.at(input.get()));
    }
    index.emplace(node, graph.nodes.size());
    graph.nodes.push_back(std::move(record));
  }
  return graph;
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<double> BasicTensor<float>::cast<double>() const;
template BasicTensor<float> BasicTensor<double>::cast<float>() const;
template BasicTensor<float> BasicTensor<float>::cast<float>() const;
template BasicTensor<double> BasicTensor<double>::cast<double>() const;
template Graph graph_of(const BasicTensor<float>&);
template Graph graph_of(const BasicTensor<double>&);

}  // namespace qbn
