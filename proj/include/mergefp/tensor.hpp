#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mergefp {

// Dense f32 tensor with reverse-mode autodiff. Row-major, contiguous,
// immutable shape. Copying a Tensor copies the handle, not the storage.
struct TensorImpl {
  std::vector<int64_t> shape;
  std::vector<float> data;
  std::vector<float> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;  // accumulates into parents
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int64_t> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const { return impl_->shape; }
  int64_t dim(size_t i) const { return impl_->shape[i]; }
  size_t ndim() const { return impl_->shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  bool is_scalar() const { return impl_->data.size() == 1; }

  std::span<float> data() { return impl_->data; }
  std::span<const float> data() const { return impl_->data; }
  float item() const { return impl_->data.at(0); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  // Gradient of the last backward() pass; empty span until then.
  std::span<const float> grad() const { return impl_->grad; }
  void zero_grad();

  // Deep copy of data (never shares storage).
  Tensor clone() const;

  std::shared_ptr<TensorImpl>& impl() { return impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Thread-local gradient mode. Forward-only code paths (sampling, candidate
// scoring) run under NoGradGuard so no graph is recorded.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Reverse-mode sweep from a scalar loss. Accumulates into .grad of every
// requires_grad tensor reachable from `loss`. Throws if loss is not scalar.
void backward(const Tensor& loss);

std::string shape_str(std::span<const int64_t> shape);

}  // namespace mergefp
