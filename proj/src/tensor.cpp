#include "eqr/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

namespace eqr {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor: nonpositive extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor wrap(std::shared_ptr<TensorData> d) { return Tensor(std::move(d)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto d = std::make_shared<TensorData>();
  d->data.assign(numel(shape), 0.0f);
  d->shape = std::move(shape);
  d->requires_grad = requires_grad;
  return wrap(std::move(d));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.vec().begin(), t.vec().end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
  if (numel(shape) != data.size())
    throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->data = std::move(data);
  d->requires_grad = requires_grad;
  return wrap(std::move(d));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += ndim();
  if (axis < 0 || axis >= ndim()) throw std::out_of_range("tensor: axis out of range");
  return d_->shape[static_cast<std::size_t>(axis)];
}

float Tensor::item() const {
  if (!d_ || d_->data.size() != 1)
    throw std::invalid_argument("tensor: item() requires a single-element tensor");
  return d_->data[0];
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

void backward(Tape& tape, const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar tensor");

  const auto& nodes = tape.nodes();
  std::ptrdiff_t loss_index = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(nodes.size()) - 1; i >= 0; --i) {
    if (nodes[static_cast<std::size_t>(i)].output == loss.node()) {
      loss_index = i;
      break;
    }
  }
  if (loss_index < 0) throw std::invalid_argument("backward: loss is not on the tape");

  // Reset intermediate grads so repeated calls accumulate only into leaves.
  std::unordered_set<TensorData*> outputs;
  for (const auto& n : nodes) {
    n.output->ensure_grad();
    std::fill(n.output->grad.begin(), n.output->grad.end(), 0.0f);
    outputs.insert(n.output.get());
  }
  for (const auto& n : nodes)
    for (const auto& in : n.inputs)
      if (in->requires_grad && !outputs.count(in.get())) in->ensure_grad();

  nodes[static_cast<std::size_t>(loss_index)].output->grad[0] = 1.0f;
  for (std::ptrdiff_t i = loss_index; i >= 0; --i) {
    const auto& n = nodes[static_cast<std::size_t>(i)];
    if (n.backward) n.backward();
  }
}

}  // namespace eqr
