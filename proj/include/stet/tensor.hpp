#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Storage behind a Tensor handle. Row-major doubles; grad is allocated lazily.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Shared handle to a dense tensor. Copies alias the same storage, which is
// what the tape needs to route gradients back to parameters.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  // Negative indices count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  // Allocates (zero-filled) on first access.
  std::span<double> grad();
  std::span<const double> grad() const;
  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }

  double item() const;
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool is_leaf() const { return impl_->is_leaf; }

  void zero_grad();
  // Fresh storage with the same values; no gradient tracking.
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of executed differentiable operations for one forward pass.
// Each thread owns its own tape.
class Tape {
 public:
  struct Entry {
    std::string_view op;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };
  using Visitor = std::function<void(std::size_t index, std::string_view op)>;

  static Tape& current();

  void record(std::string_view op, std::shared_ptr<TensorImpl> output,
              std::function<void()> backward);
  // Seeds d(loss)/d(loss) = 1 and replays entries in reverse. Intermediate
  // gradients are reset first, so repeated calls accumulate only into leaves.
  void backward(const Tensor& loss, const Visitor& visit = {});
  void reset() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<Entry> entries_;
};

bool grad_enabled();

// Disables tape recording for its lifetime (evaluation, finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

void backward(const Tensor& loss);

// True when recording is on and any input needs a gradient.
bool needs_grad(std::initializer_list<const Tensor*> inputs);

// Output tensor for an op; marks it non-leaf and tracked when `track` is set.
Tensor make_result(Shape shape, bool track);

}  // namespace stet
