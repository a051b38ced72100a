#include "agglo/tensor.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <limits>
#include <sstream>

#include "agglo/errors.hpp"

namespace agglo {

std::string_view dtype_name(DType dtype) {
  return dtype == DType::Float32 ? "float32" : "float64";
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Index numel_of(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

namespace {

thread_local AllocationStats g_alloc_stats;

void note_allocation(Index elements) {
  auto& s = g_alloc_stats;
  ++s.tensors;
  s.total_elements += elements;
  s.peak_elements = std::max(s.peak_elements, elements);
}

void check_shape(const Shape& shape) {
  for (Index e : shape) {
    if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

AllocationStats& allocation_stats() { return g_alloc_stats; }
void reset_allocation_stats() { g_alloc_stats = AllocationStats{}; }

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, std::numeric_limits<int>::max());
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
#endif
}

IntTensor::IntTensor(Shape s, std::vector<std::int32_t> v) : shape(std::move(s)), values(std::move(v)) {
  check_shape(shape);
  if (numel_of(shape) != static_cast<Index>(values.size())) {
    throw DimensionError("int tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
}

Index IntTensor::dim(int axis) const {
  const int r = static_cast<int>(shape.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis out of range for " + shape_str(shape));
  return shape[a];
}

template <typename T>
Tensor<T>::Tensor(Shape shape) : node_(std::make_shared<TensorNode<T>>()) {
  check_shape(shape);
  const Index n = numel_of(shape);
  node_->shape = std::move(shape);
  node_->value.assign(static_cast<std::size_t>(n), T(0));
  note_allocation(n);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
  check_shape(shape);
  const Index n = numel_of(shape);
  if (n != static_cast<Index>(values.size())) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(n) + " values, got " +
                         std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  note_allocation(n);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t(std::move(shape));
  std::fill(t.node_->value.begin(), t.node_->value.end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::wrap(std::shared_ptr<TensorNode<T>> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
Index Tensor<T>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return node_->shape[a];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value);
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tape<T>*& active_slot() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

}  // namespace

template <typename T>
Tape<T>* active_tape() {
  return active_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(active_slot<T>()) {
  active_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  active_slot<T>() = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(active_slot<T>()) {
  active_slot<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  active_slot<T>() = previous_;
}

template <typename T>
void Tape<T>::record(const char* op, std::shared_ptr<TensorNode<T>> output, BackwardFn backward) {
  elements_ += static_cast<Index>(output->value.size());
  entries_.push_back(Entry{op, std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (replayed_) throw ContractError("tape has already been replayed; clear() it first");
  replayed_ = true;
  auto& seed = loss.node()->grad;
  if (seed.empty()) seed.assign(1, T(0));
  seed[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on a path to the loss
    it->backward();
  }
}

template <typename T>
std::vector<std::string_view> Tape<T>::op_names() const {
  std::vector<std::string_view> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.emplace_back(e.op);
  return names;
}

template <typename T>
void Tape<T>::clear() {
  entries_.clear();
  elements_ = 0;
  replayed_ = false;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();

}  // namespace agglo
