#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace xmgan {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage. Eigen's vectorised loops peel a different number of
// leading elements depending on the buffer address, which changes rounding;
// fixed alignment makes every kernel bit-reproducible from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Backward rule of one recorded op. `grad_out` is dLoss/dOutput; `grad_in[i]`
// receives += dLoss/dInput_i and is empty when input i needs no gradient.
struct BackwardRule {
  std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)> fn;
};

struct TensorImpl {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool leaf = true;
};

// Dense row-major f64 array. Copies of a Tensor share storage (handle
// semantics); use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, const std::vector<double>& data, bool requires_grad = false);
  static Tensor from_buffer(Shape shape, Buffer data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Writes bypass the tape; only use on leaves or outside of recorded passes.
  std::span<double> mutable_data() { return impl_->data; }
  double at(std::size_t i) const { return impl_->data.at(i); }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return impl_->leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient buffer; zeros if nothing has been accumulated yet.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  Tensor detach() const;  // new leaf holding a copy of the values
  Tensor clone() const;   // same as detach() but keeps requires_grad

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend class Tape;
  friend Tensor make_op_result(Shape, Buffer, std::vector<Tensor>, BackwardRule);
};

// Linear record of the ops executed while the tape is installed. Recording
// order is a topological order, so backward walks it in reverse.
class Tape {
 public:
  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardRule rule;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const std::vector<Tensor>& inputs, const Tensor& output, BackwardRule rule);

  // Accumulates dLoss/dLeaf into every reachable leaf with requires_grad.
  // Calling it twice without zero_grad() accumulates twice.
  void backward(const Tensor& loss);

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  // Tape that ops record onto on this thread; nullptr means no recording.
  static Tape* current();

 private:
  friend class TapeScope;
  std::vector<Node> nodes_;
};

// Installs a tape as current for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording for the lifetime of the scope.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Builds an op output and records it on the current tape when any input
// requires a gradient.
Tensor make_op_result(Shape shape, Buffer data, std::vector<Tensor> inputs, BackwardRule rule);

}  // namespace xmgan
