#include "mp3d/tensor.hpp"

#include <cassert>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "mp3d/errors.hpp"

namespace mp3d {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  for (auto e : shape)
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto e : shape)
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::make_result(Shape shape, std::vector<T> values, std::vector<std::shared_ptr<Node>> parents,
                                           std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
#ifndef NDEBUG
  for (T v : node->data) assert(std::isfinite(static_cast<double>(v)));
#endif
  bool track = false;
  if (grad_enabled())
    for (const auto& p : parents)
      if (p && p->requires_grad) track = true;
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return BasicTensor(std::move(node));
}

template <typename T>
std::int64_t BasicTensor<T>::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw ShapeError("dimension index out of range for shape " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(i)];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from(shape(), node_->data, false);
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (numel() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack{{node_, 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      std::shared_ptr<Node> p = top.first->parents[top.second++];
      if (p && p->requires_grad && visited.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = it->get();
    if (n->backward_fn) {
      n->grad_buffer();
      n->backward_fn(*n);
      // Release the consumed part of the graph.
      n->backward_fn = nullptr;
      n->parents.clear();
      if (n != node_.get()) n->grad.clear();
    } else {
      n->grad_buffer();
    }
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace mp3d
