#pragma once

// Dense row-major tensors and the tape that records differentiable ops.

#include <cstddef>
#include <functional>
#include <limits>
#include <new>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tamperlab {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Vectorized kernels peel differently depending on
/// the start address, so a fixed alignment keeps float results reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    if (n > std::numeric_limits<std::size_t>::max() / sizeof(T)) throw std::bad_array_new_length();
    return static_cast<T*>(::operator new(n * sizeof(T), alignment));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  std::size_t n = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0)
      throw ShapeError("dimension " + std::to_string(i) + " of shape " + shape_string(shape) +
                       " is zero");
    n *= shape[i];
  }
  return n;
}

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  BasicTensor(Shape shape, AlignedVector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor of shape " + shape_string(shape_) + " given " +
                       std::to_string(data_.size()) + " values");
  }

  BasicTensor(Shape shape, const std::vector<T>& values)
      : BasicTensor(std::move(shape), AlignedVector<T>(values.begin(), values.end())) {}

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  AlignedVector<T>& values() noexcept { return data_; }
  const AlignedVector<T>& values() const noexcept { return data_; }
  std::vector<T> to_vector() const { return std::vector<T>(data_.begin(), data_.end()); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  T& operator()(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  const T& operator()(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<T> grad() noexcept { return grad_; }
  std::span<const T> grad() const noexcept { return grad_; }
  void ensure_grad() {
    if (grad_.empty()) grad_.assign(data_.size(), T{0});
  }
  void zero_grad() { grad_.assign(data_.size(), T{0}); }
  void clear_grad() noexcept {
    grad_.clear();
    grad_.shrink_to_fit();
  }

  void reshape(Shape shape) {
    if (shape_numel(shape) != data_.size())
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    shape_ = std::move(shape);
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size())
      throw ShapeError("index rank " + std::to_string(idx.size()) + " does not match tensor " +
                       shape_string(shape_));
    std::size_t off = 0;
    std::size_t d = 0;
    for (std::size_t i : idx) off = off * shape_[d++] + i;
    return off;
  }

  Shape shape_;
  AlignedVector<T> data_;
  AlignedVector<T> grad_;
  bool requires_grad_ = false;
};

template <typename T>
using TensorPtr = std::shared_ptr<BasicTensor<T>>;

using Tensor = BasicTensor<float>;

template <typename T>
TensorPtr<T> make_tensor(Shape shape, T fill = T{0}) {
  return std::make_shared<BasicTensor<T>>(std::move(shape), fill);
}

template <typename T>
TensorPtr<T> make_tensor(Shape shape, const std::vector<T>& values) {
  return std::make_shared<BasicTensor<T>>(std::move(shape), values);
}

template <typename T>
TensorPtr<T> make_tensor(Shape shape, AlignedVector<T> values) {
  return std::make_shared<BasicTensor<T>>(std::move(shape), std::move(values));
}

/// A tensor that accumulates gradients (a learnable parameter or a checked input).
template <typename T>
TensorPtr<T> make_parameter(Shape shape, const std::vector<T>& values) {
  auto t = make_tensor<T>(std::move(shape), values);
  t->set_requires_grad(true);
  return t;
}

template <typename T>
TensorPtr<T> make_parameter(Shape shape, T fill = T{0}) {
  auto t = make_tensor<T>(std::move(shape), fill);
  t->set_requires_grad(true);
  return t;
}

template <typename T, typename U>
BasicTensor<U> tensor_cast(const BasicTensor<T>& src) {
  std::vector<U> v(src.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(src[i]);
  return BasicTensor<U>(src.shape(), std::move(v));
}

/// Ordered record of executed differentiable operations.
///
/// Ops whose inputs carry no gradient are not recorded, so inference-only
/// graphs leave the tape empty.
template <typename T>
class BasicTape {
 public:
  using Ptr = TensorPtr<T>;

  struct Entry {
    std::string_view op;
    std::vector<Ptr> inputs;
    Ptr output;
    std::function<void()> backward;
  };

  static bool any_requires_grad(std::initializer_list<Ptr> inputs) {
    for (const auto& p : inputs)
      if (p && p->requires_grad()) return true;
    return false;
  }

  Ptr record(std::string_view op, std::initializer_list<Ptr> inputs, Ptr output,
             std::function<void()> backward) {
    if (!any_requires_grad(inputs)) return output;
    output->set_requires_grad(true);
    entries_.push_back(Entry{op, std::vector<Ptr>(inputs), output, std::move(backward)});
    return output;
  }

  /// Seeds d(loss)=1 and runs every recorded backward rule once, newest first.
  void backward(const Ptr& loss) {
    if (!loss || loss->size() != 1)
      throw ShapeError("backward seed must be a scalar, got " +
                       (loss ? shape_string(loss->shape()) : std::string("null")));
    if (entries_.empty() || entries_.back().output != loss)
      throw std::logic_error("backward seed is not the final output recorded on the tape");
    for (auto& e : entries_)
      if (e.output->has_grad()) e.output->clear_grad();
    loss->ensure_grad();
    loss->grad()[0] = T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output->has_grad()) continue;
      it->backward();
    }
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

using Tape = BasicTape<float>;

template <typename T>
void backward_pass(BasicTape<T>& tape, const TensorPtr<T>& loss) {
  tape.backward(loss);
}

/// Allocates zeroed gradient buffers so parameters the loss never reaches read as zero.
template <typename T>
void zero_grad(std::span<const TensorPtr<T>> params) {
  for (const auto& p : params) p->zero_grad();
}

template <typename T>
void zero_grad(const std::vector<TensorPtr<T>>& params) {
  zero_grad(std::span<const TensorPtr<T>>(params));
}

}  // namespace tamperlab
