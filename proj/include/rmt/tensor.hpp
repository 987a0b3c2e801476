#pragma once

// Dense row-major tensors with a reverse-mode autodiff tape.
//
// A Tensor is a cheap handle to a shared node holding shape, data and an
// optional gradient buffer. Ops defined in ops.hpp record themselves on the
// tape that is active for the current thread (see TapeScope) whenever one
// of their inputs requires grad. Without an active tape nothing is recorded
// and intermediate buffers are released as soon as their handles go away.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rmt {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Live-allocation bookkeeping for tensor buffers. Counters are per thread.
struct AllocStats {
  std::int64_t live_bytes = 0;
  std::int64_t peak_bytes = 0;
  std::int64_t total_allocs = 0;
  std::int64_t limit_bytes = 0;  // 0 is unlimited; beyond it allocate throws std::bad_alloc
};
AllocStats& alloc_stats();
void reset_alloc_peak();

template <class T>
struct TrackedAllocator {
  using value_type = T;
  TrackedAllocator() = default;
  template <class U>
  TrackedAllocator(const TrackedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto& s = alloc_stats();
    const auto bytes = static_cast<std::int64_t>(n * sizeof(T));
    if (s.limit_bytes > 0 && s.live_bytes + bytes > s.limit_bytes) throw std::bad_alloc();
    s.live_bytes += bytes;
    s.total_allocs += 1;
    if (s.live_bytes > s.peak_bytes) s.peak_bytes = s.live_bytes;
    return std::allocator<T>{}.allocate(n);
  }
  void deallocate(T* p, std::size_t n) noexcept {
    alloc_stats().live_bytes -= static_cast<std::int64_t>(n * sizeof(T));
    std::allocator<T>{}.deallocate(p, n);
  }
  template <class U>
  bool operator==(const TrackedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, TrackedAllocator<T>>;

// numerics.check_finite: when enabled every op scans its output and throws
// NumericError naming the op on NaN/Inf.
void set_check_finite(bool enabled);
bool check_finite();

// Multiply-add counter incremented by the forward matmul and attention
// kernels. Per thread.
std::uint64_t& mac_counter();

template <class Real>
struct TensorNode {
  Shape shape;
  Buffer<Real> data;
  Buffer<Real> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::string name;
};

template <class Real>
class Tensor {
 public:
  using Node = TensorNode<Real>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value) { return from({1}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  // First dimension, and the product of the rest.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const Real> data() const { return {node_->data.data(), node_->data.size()}; }
  // Direct write access; reserved for parameter updates and initialization.
  std::span<Real> mutable_data() { return {node_->data.data(), node_->data.size()}; }
  Real at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  Real item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return {node_->grad.data(), node_->grad.size()}; }
  std::span<Real> mutable_grad();  // allocates zeros on first use
  void zero_grad() { node_->grad = Buffer<Real>{}; }

  const std::string& name() const { return node_->name; }
  void set_name(std::string name) { node_->name = std::move(name); }

  // Deep copy with no gradient history.
  Tensor clone() const;
  template <class Other>
  Tensor<Other> cast() const {
    std::vector<Other> v(numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Other>(node_->data[i]);
    auto t = Tensor<Other>::from(shape(), std::move(v), requires_grad());
    t.set_name(name());
    return t;
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <class Real>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<Real>>;
  struct Entry {
    const char* op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void(const Entry&)> backward;
  };

  void record(const char* op, std::vector<NodePtr> inputs, NodePtr output,
              std::function<void(const Entry&)> backward);
  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  // Accumulates d(loss)/d(x) into every requires_grad tensor reachable from
  // the loss. Each entry is visited at most once, in reverse order.
  void backward(const Tensor<Real>& loss);

 private:
  std::vector<Entry> entries_;
};

template <class Real>
Tape<Real>*& active_tape();

// Makes `tape` the recording target for this thread until destruction.
template <class Real>
class TapeScope {
 public:
  explicit TapeScope(Tape<Real>& tape) : previous_(active_tape<Real>()) { active_tape<Real>() = &tape; }
  ~TapeScope() { active_tape<Real>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Real>* previous_;
};

// Suspends recording (eval / inference).
template <class Real>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<Real>()) { active_tape<Real>() = nullptr; }
  ~NoGradScope() { active_tape<Real>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<Real>* previous_;
};

template <class Real>
void backward(Tape<Real>& tape, const Tensor<Real>& loss) {
  tape.backward(loss);
}

}  // namespace rmt
