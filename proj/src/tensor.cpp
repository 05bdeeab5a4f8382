#include "tsd/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

TSD_NAMESPACE_BEGIN

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0, requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value.assign(n, value);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(n, 0);
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value.assign(values.begin(), values.end());
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->value.size(), 0);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

int Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) throw ShapeError("axis out of range for " + shape_str(node_->shape));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const Real> Tensor::data() const { return node_->value; }

std::span<Real> Tensor::mutable_data() {
  if (!node_->is_leaf()) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return node_->value;
}

Real Tensor::item() const {
  if (node_->value.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(node_->shape));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

bool Tensor::has_graph() const { return !node_->is_leaf(); }

std::span<const Real> Tensor::grad() const { return node_->grad; }

std::span<Real> Tensor::mutable_grad() { return node_->grad; }

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), Real(0)); }

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

void Tensor::backward() const {
  if (node_->value.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_str(node_->shape));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order; each node once.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0);
  }
  node_->grad[0] += 1;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
}

namespace detail {

Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (shape_numel(node->shape) != node->value.size()) {
    throw ShapeError("op result shape " + shape_str(node->shape) + " does not match its values");
  }
  const bool needs = !NoGradGuard::active() && std::any_of(parents.begin(), parents.end(),
                                                           [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

TSD_NAMESPACE_END
