#include "rmt/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>

namespace rmt {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

AllocStats& alloc_stats() {
  thread_local AllocStats stats;
  return stats;
}

void reset_alloc_peak() {
  auto& s = alloc_stats();
  s.peak_bytes = s.live_bytes;
}

namespace {
std::atomic<bool> g_check_finite{false};
}

void set_check_finite(bool enabled) { g_check_finite.store(enabled, std::memory_order_relaxed); }
bool check_finite() { return g_check_finite.load(std::memory_order_relaxed); }

std::uint64_t& mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

template <class Real>
Tensor<Real> Tensor<Real>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Real(0), requires_grad);
}

template <class Real>
Tensor<Real> Tensor<Real>::full(Shape shape, Real value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <class Real>
Tensor<Real> Tensor<Real>::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<Node>();
  node->data.assign(values.begin(), values.end());
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <class Real>
std::size_t Tensor<Real>::rows() const {
  return node_->shape.empty() ? 1 : node_->shape[0];
}

template <class Real>
std::size_t Tensor<Real>::cols() const {
  std::size_t c = 1;
  for (std::size_t i = 1; i < node_->shape.size(); ++i) c *= node_->shape[i];
  return c;
}

template <class Real>
Real Tensor<Real>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor " + shape_str(shape()));
  return node_->data[0];
}

template <class Real>
std::span<Real> Tensor<Real>::mutable_grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), Real(0));
  return {node_->grad.data(), node_->grad.size()};
}

template <class Real>
Tensor<Real> Tensor<Real>::clone() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  node->requires_grad = node_->requires_grad;
  node->name = node_->name;
  return Tensor(std::move(node));
}

template <class Real>
void Tape<Real>::record(const char* op, std::vector<NodePtr> inputs, NodePtr output,
                        std::function<void(const Entry&)> backward) {
  entries_.push_back(Entry{op, std::move(inputs), std::move(output), std::move(backward)});
}

template <class Real>
void Tape<Real>::backward(const Tensor<Real>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward needs a scalar loss, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  const bool on_tape =
      std::any_of(entries_.begin(), entries_.end(),
                  [&](const Entry& e) { return e.output.get() == loss.node(); });
  if (!on_tape && !loss.requires_grad()) {
    throw std::invalid_argument("backward: loss was not recorded on this tape");
  }
  auto* node = loss.node();
  if (node->grad.empty()) node->grad.assign(1, Real(0));
  node->grad[0] += Real(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(*it);
  }
}

template <class Real>
Tape<Real>*& active_tape() {
  thread_local Tape<Real>* tape = nullptr;
  return tape;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template Tape<float>*& active_tape<float>();
template Tape<double>*& active_tape<double>();

}  // namespace rmt
