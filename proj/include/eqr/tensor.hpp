#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace eqr {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Shared payload behind a Tensor handle. data is immutable once an op has
// produced it; grad is the only mutable slot afterwards. Parameter tensors
// are additionally rewritten in place by the optimizer between steps, which
// is safe because the tape never outlives a step.
struct TensorData {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // sized on demand, zero-filled
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  int dim(int axis) const;
  std::size_t size() const { return d_->data.size(); }
  bool requires_grad() const { return d_ && d_->requires_grad; }

  float* data() { return d_->data.data(); }
  const float* data() const { return d_->data.data(); }
  std::vector<float>& vec() { return d_->data; }
  const std::vector<float>& vec() const { return d_->data; }

  // Scalar access; throws unless the tensor holds exactly one element.
  float item() const;

  float* grad() {
    d_->ensure_grad();
    return d_->grad.data();
  }
  const std::vector<float>& grad_vec() const { return d_->grad; }
  void zero_grad() {
    if (d_) d_->ensure_grad(), std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
  }

  std::shared_ptr<TensorData> node() const { return d_; }
  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;

  friend Tensor wrap(std::shared_ptr<TensorData> d);
};

Tensor wrap(std::shared_ptr<TensorData> d);

// Reverse-mode tape. Forward ops append nodes in execution order, which is a
// topological order of the computation; backward walks the list once in
// reverse. Ops record only while a tape is active on the current thread and
// at least one input requires grad.
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<std::shared_ptr<TensorData>> inputs;
    std::shared_ptr<TensorData> output;
    std::function<void()> backward;
  };

  void record(Node node) { nodes_.push_back(std::move(node)); }
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  static Tape* active();

 private:
  std::vector<Node> nodes_;
  friend class TapeScope;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Populates grads of every requires_grad tensor reachable from loss.
// Intermediate (node-output) grads are reset each call; leaf grads
// accumulate across calls.
void backward(Tape& tape, const Tensor& loss);

}  // namespace eqr
