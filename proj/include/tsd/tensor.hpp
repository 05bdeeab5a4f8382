#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsd/precision.hpp"

TSD_NAMESPACE_BEGIN

using Shape = std::vector<int>;

/// Thrown when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Allocator for tensor storage. Vectorized kernels peel a number of leading
// elements that depends on the buffer address; a fixed 64-byte alignment keeps
// results independent of heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<Real, AlignedAllocator<Real>>;

/// Thrown when a value that must be finite is NaN or infinite.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the computation graph. Leaves have no backward function;
// leaves created with requires_grad keep their gradient across backward calls,
// interior nodes get a fresh zeroed buffer at the start of every backward pass.
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(std::size_t axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::size_t numel() const;

  std::span<const Real> data() const;
  // Writable view of a leaf's values; used by optimizers and gradient checks.
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  bool has_graph() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();

  // Copy of the values with no graph link.
  Tensor detach() const;

  // Reverse-mode sweep from this scalar. Gradients accumulate into leaves.
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// While alive, ops on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(enabled_) { enabled_ = true; }
  ~NoGradGuard() { enabled_ = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool active() { return enabled_; }

 private:
  inline static thread_local bool enabled_ = false;
  bool previous_;
};

namespace detail {

// Builds an op result. The graph link and backward function are dropped when
// no parent requires a gradient or a NoGradGuard is alive.
Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward_fn);

}  // namespace detail

TSD_NAMESPACE_END
