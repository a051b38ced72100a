#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle to a shared node holding the value buffer and
// (lazily) a gradient buffer of the same shape. Operations in ops.hpp record
// themselves on the thread's active Tape when at least one input requires a
// gradient; with no active tape nothing is recorded and intermediates are
// released as soon as their handles go out of scope.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace agglo {

using Index = std::int64_t;
using Shape = std::vector<Index>;

enum class DType { Float32, Float64 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::Float32; }
template <>
constexpr DType dtype_of<double>() { return DType::Float64; }

std::string_view dtype_name(DType dtype);
std::string shape_str(const Shape& shape);
Index numel_of(const Shape& shape);

// Per-thread allocation counters, fed by every tensor value buffer created.
// Used to witness that a code path never materializes a quadratic tensor.
struct AllocationStats {
  std::size_t tensors = 0;
  Index peak_elements = 0;  // largest single tensor allocated
  Index total_elements = 0;
};
AllocationStats& allocation_stats();
void reset_allocation_stats();

/// Keeps freed tensor buffers in the process heap instead of returning them
/// to the OS, avoiding page-fault churn from repeated large allocations.
/// No-op outside glibc.
void retain_freed_memory();

// Integer tensor used for token ids. No gradient support.
struct IntTensor {
  Shape shape;
  std::vector<std::int32_t> values;

  IntTensor() = default;
  IntTensor(Shape s, std::vector<std::int32_t> v);
  Index numel() const { return static_cast<Index>(values.size()); }
  Index dim(int axis) const;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  /// Zero-filled tensor.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<T> values);

  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  /// Extent along `axis`; negative axes count from the end.
  Index dim(int axis) const;
  Index numel() const { return static_cast<Index>(node_->value.size()); }
  constexpr DType dtype() const { return dtype_of<T>(); }

  std::span<const T> values() const { return node_->value; }
  // Mutable access is for initializers and optimizers acting on leaves.
  std::span<T> mutable_values() { return node_->value; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; zero-filled if nothing has flowed into this tensor.
  std::span<const T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Value copy with no graph linkage.
  Tensor detach() const;

  const TensorNode<T>* id() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  static Tensor wrap(std::shared_ptr<TensorNode<T>> node);

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const char* op, std::shared_ptr<TensorNode<T>> output, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and replays every entry once, newest first.
  /// Throws ContractError for a non-scalar loss or a tape already replayed.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return entries_.size(); }
  /// Sum of output element counts over all recorded operations.
  Index element_count() const { return elements_; }
  std::vector<std::string_view> op_names() const;
  void clear();

 private:
  struct Entry {
    const char* op;
    std::shared_ptr<TensorNode<T>> output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  Index elements_ = 0;
  bool replayed_ = false;
};

template <typename T>
Tape<T>* active_tape();

/// Makes `tape` the active tape for this thread until destruction.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording for the current thread (evaluation, sampling).
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace agglo
