#include "eqr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "eqr/kernels.hpp"

namespace eqr {

namespace {

const std::vector<const char*> kOpNames = {
    "add",        "sub",           "mul",          "scale",        "add_scalar",
    "matmul",     "matmul_nt",     "transpose2d",  "reshape",      "slice_lastdim",
    "concat_lastdim", "split_heads", "merge_heads", "softmax",     "layernorm",
    "gelu",       "relu",          "sqrt",         "mean_all",     "sum_all",
    "mean_axis0", "mean_tokens",   "broadcast_tokens", "mse",      "softmax_cross_entropy",
    "offdiag_sq_sum", "patchify",  "unpatchify",
};

void check_finite(const char* op, const Tensor& t) {
#ifndef NDEBUG
  for (float v : t.vec())
    if (!std::isfinite(v))
      throw std::logic_error(std::string(op) + ": non-finite value in forward output");
#else
  (void)op;
  (void)t;
#endif
}

bool recording(const Tensor& a) { return Tape::active() && a.requires_grad(); }
bool recording(const Tensor& a, const Tensor& b) {
  return Tape::active() && (a.requires_grad() || b.requires_grad());
}
bool recording(const Tensor& a, const Tensor& b, const Tensor& c) {
  return Tape::active() && (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

void record(const char* op, Tensor& out, std::vector<std::shared_ptr<TensorData>> inputs,
            std::function<void()> bwd) {
  out.node()->requires_grad = true;
  Tape::Node node;
  node.op = op;
  node.inputs = std::move(inputs);
  node.output = out.node();
  node.backward = std::move(bwd);
  Tape::active()->record(std::move(node));
}

bool is_suffix(const Shape& suffix, const Shape& shape) {
  if (suffix.size() > shape.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), shape.rbegin());
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

// Splits [..., m, k] into (batch, m, k); batch covers all leading dims.
void matrix_dims(const char* op, const Tensor& t, std::size_t& batch, int& rows, int& cols) {
  if (t.ndim() < 2) throw std::invalid_argument(std::string(op) + ": needs >= 2 dims, got " + shape_str(t.shape()));
  rows = t.dim(-2);
  cols = t.dim(-1);
  batch = t.size() / static_cast<std::size_t>(rows) / static_cast<std::size_t>(cols);
}

bool same_leading(const Tensor& a, const Tensor& b) {
  if (a.ndim() != b.ndim()) return false;
  for (int i = 0; i < a.ndim() - 2; ++i)
    if (a.dim(i) != b.dim(i)) return false;
  return true;
}

}  // namespace

const std::vector<const char*>& differentiable_op_names() { return kOpNames; }

Tensor add(const Tensor& a, const Tensor& b) {
  if (!is_suffix(b.shape(), a.shape())) shape_error("add", a.shape(), b.shape());
  const std::size_t bn = b.size();
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i % bn];
  check_finite("add", out);
  if (recording(a, b)) {
    record("add", out, {a.node(), b.node()}, [an = a.node(), bn_ = b.node(), on = out.node()] {
      const std::size_t n = on->data.size(), m = bn_->data.size();
      if (an->requires_grad)
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      if (bn_->requires_grad)
        for (std::size_t i = 0; i < n; ++i) bn_->grad[i % m] += on->grad[i];
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!is_suffix(b.shape(), a.shape())) shape_error("sub", a.shape(), b.shape());
  const std::size_t bn = b.size();
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] - pb[i % bn];
  check_finite("sub", out);
  if (recording(a, b)) {
    record("sub", out, {a.node(), b.node()}, [an = a.node(), bn_ = b.node(), on = out.node()] {
      const std::size_t n = on->data.size(), m = bn_->data.size();
      if (an->requires_grad)
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      if (bn_->requires_grad)
        for (std::size_t i = 0; i < n; ++i) bn_->grad[i % m] -= on->grad[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
  check_finite("mul", out);
  if (recording(a, b)) {
    record("mul", out, {a.node(), b.node()}, [an = a.node(), bn = b.node(), on = out.node()] {
      const std::size_t n = on->data.size();
      if (an->requires_grad)
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->data[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->data[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  float* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * s;
  check_finite("scale", out);
  if (recording(a)) {
    record("scale", out, {a.node()}, [an = a.node(), on = out.node(), s] {
      for (std::size_t i = 0; i < on->data.size(); ++i) an->grad[i] += s * on->grad[i];
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, float c) {
  Tensor out = Tensor::zeros(a.shape());
  const float* pa = a.data();
  float* po = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] + c;
  check_finite("add_scalar", out);
  if (recording(a)) {
    record("add_scalar", out, {a.node()}, [an = a.node(), on = out.node()] {
      for (std::size_t i = 0; i < on->data.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  std::size_t batch;
  int m, k;
  matrix_dims("matmul", a, batch, m, k);
  const bool shared_b = b.ndim() == 2;
  if (shared_b) {
    if (b.dim(0) != k) shape_error("matmul", a.shape(), b.shape());
  } else {
    if (!same_leading(a, b) || b.dim(-2) != k) shape_error("matmul", a.shape(), b.shape());
  }
  const int n = b.dim(-1);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor out = Tensor::zeros(out_shape);

  const std::size_t sa = static_cast<std::size_t>(m) * k;
  const std::size_t sb = static_cast<std::size_t>(k) * n;
  const std::size_t sc = static_cast<std::size_t>(m) * n;
  for (std::size_t i = 0; i < batch; ++i)
    gemm_nn(a.data() + i * sa, b.data() + (shared_b ? 0 : i * sb), out.data() + i * sc, m, k, n, false);
  check_finite("matmul", out);

  if (recording(a, b)) {
    record("matmul", out, {a.node(), b.node()},
           [an = a.node(), bn = b.node(), on = out.node(), batch, m, k, n, sa, sb, sc, shared_b] {
             for (std::size_t i = 0; i < batch; ++i) {
               const float* dc = on->grad.data() + i * sc;
               if (an->requires_grad)
                 gemm_nt(dc, bn->data.data() + (shared_b ? 0 : i * sb),
                         an->grad.data() + i * sa, m, n, k, true);
               if (bn->requires_grad)
                 gemm_tn(an->data.data() + i * sa, dc,
                         bn->grad.data() + (shared_b ? 0 : i * sb), m, k, n, true);
             }
           });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  std::size_t batch;
  int m, k;
  matrix_dims("matmul_nt", a, batch, m, k);
  const bool shared_b = b.ndim() == 2;
  if (shared_b) {
    if (b.dim(1) != k) shape_error("matmul_nt", a.shape(), b.shape());
  } else {
    if (!same_leading(a, b) || b.dim(-1) != k) shape_error("matmul_nt", a.shape(), b.shape());
  }
  const int n = b.dim(-2);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor out = Tensor::zeros(out_shape);

  const std::size_t sa = static_cast<std::size_t>(m) * k;
  const std::size_t sb = static_cast<std::size_t>(n) * k;
  const std::size_t sc = static_cast<std::size_t>(m) * n;
  for (std::size_t i = 0; i < batch; ++i)
    gemm_nt(a.data() + i * sa, b.data() + (shared_b ? 0 : i * sb), out.data() + i * sc, m, k, n, false);
  check_finite("matmul_nt", out);

  if (recording(a, b)) {
    record("matmul_nt", out, {a.node(), b.node()},
           [an = a.node(), bn = b.node(), on = out.node(), batch, m, k, n, sa, sb, sc, shared_b] {
             for (std::size_t i = 0; i < batch; ++i) {
               const float* dc = on->grad.data() + i * sc;
               if (an->requires_grad)
                 gemm_nn(dc, bn->data.data() + (shared_b ? 0 : i * sb),
                         an->grad.data() + i * sa, m, n, k, true);
               if (bn->requires_grad)
                 gemm_tn(dc, an->data.data() + i * sa,
                         bn->grad.data() + (shared_b ? 0 : i * sb), m, n, k, true);
             }
           });
  }
  return out;
}

Tensor transpose2d(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose2d: expects a 2-d tensor, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const float* pa = a.data();
  float* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[static_cast<std::size_t>(j) * m + i] = pa[static_cast<std::size_t>(i) * n + j];
  if (recording(a)) {
    record("transpose2d", out, {a.node()}, [an = a.node(), on = out.node(), m, n] {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          an->grad[static_cast<std::size_t>(i) * n + j] += on->grad[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw std::invalid_argument("reshape: numel mismatch, " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out = Tensor::from_data(std::move(shape), a.vec());
  if (recording(a)) {
    record("reshape", out, {a.node()}, [an = a.node(), on = out.node()] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

Tensor slice_lastdim(const Tensor& a, int offset, int length) {
  const int d = a.dim(-1);
  if (offset < 0 || length <= 0 || offset + length > d)
    throw std::invalid_argument("slice_lastdim: invalid range [" + std::to_string(offset) + "," +
                                std::to_string(offset + length) + ") for dim " + std::to_string(d));
  Shape out_shape = a.shape();
  out_shape.back() = length;
  Tensor out = Tensor::zeros(out_shape);
  const std::size_t rows = a.size() / static_cast<std::size_t>(d);
  const float* pa = a.data();
  float* po = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::memcpy(po + r * length, pa + r * d + offset, sizeof(float) * static_cast<std::size_t>(length));
  if (recording(a)) {
    record("slice_lastdim", out, {a.node()}, [an = a.node(), on = out.node(), rows, d, offset, length] {
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < length; ++j)
          an->grad[r * d + offset + j] += on->grad[r * length + j];
    });
  }
  return out;
}

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
  if (a.ndim() != b.ndim()) shape_error("concat_lastdim", a.shape(), b.shape());
  for (int i = 0; i < a.ndim() - 1; ++i)
    if (a.dim(i) != b.dim(i)) shape_error("concat_lastdim", a.shape(), b.shape());
  const int da = a.dim(-1), db = b.dim(-1);
  Shape out_shape = a.shape();
  out_shape.back() = da + db;
  Tensor out = Tensor::zeros(out_shape);
  const std::size_t rows = a.size() / static_cast<std::size_t>(da);
  float* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::memcpy(po + r * (da + db), a.data() + r * da, sizeof(float) * static_cast<std::size_t>(da));
    std::memcpy(po + r * (da + db) + da, b.data() + r * db, sizeof(float) * static_cast<std::size_t>(db));
  }
  if (recording(a, b)) {
    record("concat_lastdim", out, {a.node(), b.node()},
           [an = a.node(), bn = b.node(), on = out.node(), rows, da, db] {
             for (std::size_t r = 0; r < rows; ++r) {
               if (an->requires_grad)
                 for (int j = 0; j < da; ++j) an->grad[r * da + j] += on->grad[r * (da + db) + j];
               if (bn->requires_grad)
                 for (int j = 0; j < db; ++j) bn->grad[r * db + j] += on->grad[r * (da + db) + da + j];
             }
           });
  }
  return out;
}

Tensor split_heads(const Tensor& x, int heads) {
  if (x.ndim() != 3) throw std::invalid_argument("split_heads: expects [N,P,D], got " + shape_str(x.shape()));
  const int n = x.dim(0), p = x.dim(1), d = x.dim(2);
  if (heads <= 0 || d % heads != 0)
    throw std::invalid_argument("split_heads: dim " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
  const int hd = d / heads;
  Tensor out = Tensor::zeros({n, heads, p, hd});
  const float* px = x.data();
  float* po = out.data();
  for (int in = 0; in < n; ++in)
    for (int h = 0; h < heads; ++h)
      for (int ip = 0; ip < p; ++ip)
        std::memcpy(po + ((static_cast<std::size_t>(in) * heads + h) * p + ip) * hd,
                    px + (static_cast<std::size_t>(in) * p + ip) * d + static_cast<std::size_t>(h) * hd,
                    sizeof(float) * static_cast<std::size_t>(hd));
  if (recording(x)) {
    record("split_heads", out, {x.node()}, [xn = x.node(), on = out.node(), n, heads, p, hd, d] {
      for (int in = 0; in < n; ++in)
        for (int h = 0; h < heads; ++h)
          for (int ip = 0; ip < p; ++ip)
            for (int j = 0; j < hd; ++j)
              xn->grad[(static_cast<std::size_t>(in) * p + ip) * d + static_cast<std::size_t>(h) * hd + j] +=
                  on->grad[((static_cast<std::size_t>(in) * heads + h) * p + ip) * hd + j];
    });
  }
  return out;
}

Tensor merge_heads(const Tensor& x) {
  if (x.ndim() != 4) throw std::invalid_argument("merge_heads: expects [N,h,P,hd], got " + shape_str(x.shape()));
  const int n = x.dim(0), heads = x.dim(1), p = x.dim(2), hd = x.dim(3);
  const int d = heads * hd;
  Tensor out = Tensor::zeros({n, p, d});
  const float* px = x.data();
  float* po = out.data();
  for (int in = 0; in < n; ++in)
    for (int h = 0; h < heads; ++h)
      for (int ip = 0; ip < p; ++ip)
        std::memcpy(po + (static_cast<std::size_t>(in) * p + ip) * d + static_cast<std::size_t>(h) * hd,
                    px + ((static_cast<std::size_t>(in) * heads + h) * p + ip) * hd,
                    sizeof(float) * static_cast<std::size_t>(hd));
  if (recording(x)) {
    record("merge_heads", out, {x.node()}, [xn = x.node(), on = out.node(), n, heads, p, hd, d] {
      for (int in = 0; in < n; ++in)
        for (int h = 0; h < heads; ++h)
          for (int ip = 0; ip < p; ++ip)
            for (int j = 0; j < hd; ++j)
              xn->grad[((static_cast<std::size_t>(in) * heads + h) * p + ip) * hd + j] +=
                  on->grad[(static_cast<std::size_t>(in) * p + ip) * d + static_cast<std::size_t>(h) * hd + j];
    });
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  const int d = x.dim(-1);
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = px + r * d;
    float* yr = po + r * d;
    float mx = xr[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += static_cast<double>(yr[j]);
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int j = 0; j < d; ++j) yr[j] *= inv;
  }
  check_finite("softmax", out);
  if (recording(x)) {
    record("softmax", out, {x.node()}, [xn = x.node(), on = out.node(), rows, d] {
      for (std::size_t r = 0; r < rows; ++r) {
        const float* y = on->data.data() + r * d;
        const float* dy = on->grad.data() + r * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += static_cast<double>(dy[j]) * y[j];
        const float dotf = static_cast<float>(dot);
        for (int j = 0; j < d; ++j) xn->grad[r * d + j] += y[j] * (dy[j] - dotf);
      }
    });
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int d = x.dim(-1);
  if (gamma.ndim() != 1 || gamma.dim(0) != d) shape_error("layernorm", x.shape(), gamma.shape());
  if (beta.ndim() != 1 || beta.dim(0) != d) shape_error("layernorm", x.shape(), beta.shape());
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<float> xhat(x.size());
  std::vector<float> inv_std(rows);
  const float* px = x.data();
  const float* pg = gamma.data();
  const float* pb = beta.data();
  float* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = px + r * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xr[j] - mean;
      var += c * c;
    }
    var /= d;
    const float inv = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[r] = inv;
    const float meanf = static_cast<float>(mean);
    for (int j = 0; j < d; ++j) {
      const float h = (xr[j] - meanf) * inv;
      xhat[r * d + j] = h;
      po[r * d + j] = pg[j] * h + pb[j];
    }
  }
  check_finite("layernorm", out);
  if (recording(x, gamma, beta)) {
    record("layernorm", out, {x.node(), gamma.node(), beta.node()},
           [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(),
            xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
             for (std::size_t r = 0; r < rows; ++r) {
               const float* dy = on->grad.data() + r * d;
               const float* h = xhat.data() + r * d;
               if (xn->requires_grad) {
                 double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
                 for (int j = 0; j < d; ++j) {
                   const double dh = static_cast<double>(dy[j]) * gn->data[j];
                   m1 += dh;
                   m2 += dh * h[j];
                 }
                 m1 /= d;
                 m2 /= d;
                 const float inv = inv_std[r];
                 for (int j = 0; j < d; ++j) {
                   const float dh = dy[j] * gn->data[j];
                   xn->grad[r * d + j] +=
                       inv * (dh - static_cast<float>(m1) - h[j] * static_cast<float>(m2));
                 }
               }
               if (gn->requires_grad)
                 for (int j = 0; j < d; ++j) gn->grad[j] += dy[j] * h[j];
               if (bn->requires_grad)
                 for (int j = 0; j < d; ++j) bn->grad[j] += dy[j];
             }
           });
  }
  return out;
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float v = px[i];
    const float t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    po[i] = 0.5f * v * (1.0f + t);
  }
  check_finite("gelu", out);
  if (recording(x)) {
    record("gelu", out, {x.node()}, [xn = x.node(), on = out.node()] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const float v = xn->data[i];
        const float t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const float du = kGeluC * (1.0f + 3.0f * kGeluA * v * v);
        const float dydx = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
        xn->grad[i] += dydx * on->grad[i];
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) po[i] = px[i] > 0.0f ? px[i] : 0.0f;
  if (recording(x)) {
    record("relu", out, {x.node()}, [xn = x.node(), on = out.node()] {
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        if (xn->data[i] > 0.0f) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

Tensor sqrt_op(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  float* po = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (px[i] < 0.0f) throw std::invalid_argument("sqrt: negative input");
    po[i] = std::sqrt(px[i]);
  }
  if (recording(x)) {
    record("sqrt", out, {x.node()}, [xn = x.node(), on = out.node()] {
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += 0.5f / on->data[i] * on->grad[i];
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  double sum = 0.0;
  for (float v : x.vec()) sum += v;
  const std::size_t n = x.size();
  Tensor out = Tensor::scalar(static_cast<float>(sum / static_cast<double>(n)));
  if (recording(x)) {
    record("mean_all", out, {x.node()}, [xn = x.node(), on = out.node(), n] {
      const float g = on->grad[0] / static_cast<float>(n);
      for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g;
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  double sum = 0.0;
  for (float v : x.vec()) sum += v;
  Tensor out = Tensor::scalar(static_cast<float>(sum));
  if (recording(x)) {
    record("sum_all", out, {x.node()}, [xn = x.node(), on = out.node()] {
      const float g = on->grad[0];
      for (std::size_t i = 0; i < xn->data.size(); ++i) xn->grad[i] += g;
    });
  }
  return out;
}

Tensor mean_axis0(const Tensor& x) {
  if (x.ndim() != 2) throw std::invalid_argument("mean_axis0: expects [N,d], got " + shape_str(x.shape()));
  const int n = x.dim(0), d = x.dim(1);
  Tensor out = Tensor::zeros({d});
  const float* px = x.data();
  for (int j = 0; j < d; ++j) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += px[static_cast<std::size_t>(i) * d + j];
    out.data()[j] = static_cast<float>(s / n);
  }
  if (recording(x)) {
    record("mean_axis0", out, {x.node()}, [xn = x.node(), on = out.node(), n, d] {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
          xn->grad[static_cast<std::size_t>(i) * d + j] += on->grad[j] / static_cast<float>(n);
    });
  }
  return out;
}

Tensor mean_tokens(const Tensor& x) {
  if (x.ndim() != 3) throw std::invalid_argument("mean_tokens: expects [N,P,D], got " + shape_str(x.shape()));
  const int n = x.dim(0), p = x.dim(1), d = x.dim(2);
  Tensor out = Tensor::zeros({n, d});
  const float* px = x.data();
  for (int in = 0; in < n; ++in)
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int ip = 0; ip < p; ++ip) s += px[(static_cast<std::size_t>(in) * p + ip) * d + j];
      out.data()[static_cast<std::size_t>(in) * d + j] = static_cast<float>(s / p);
    }
  if (recording(x)) {
    record("mean_tokens", out, {x.node()}, [xn = x.node(), on = out.node(), n, p, d] {
      for (int in = 0; in < n; ++in)
        for (int ip = 0; ip < p; ++ip)
          for (int j = 0; j < d; ++j)
            xn->grad[(static_cast<std::size_t>(in) * p + ip) * d + j] +=
                on->grad[static_cast<std::size_t>(in) * d + j] / static_cast<float>(p);
    });
  }
  return out;
}

Tensor broadcast_tokens(const Tensor& z, int count) {
  if (z.ndim() != 2) throw std::invalid_argument("broadcast_tokens: expects [N,D], got " + shape_str(z.shape()));
  if (count <= 0) throw std::invalid_argument("broadcast_tokens: count must be positive");
  const int n = z.dim(0), d = z.dim(1);
  Tensor out = Tensor::zeros({n, count, d});
  for (int in = 0; in < n; ++in)
    for (int ip = 0; ip < count; ++ip)
      std::memcpy(out.data() + (static_cast<std::size_t>(in) * count + ip) * d,
                  z.data() + static_cast<std::size_t>(in) * d, sizeof(float) * static_cast<std::size_t>(d));
  if (recording(z)) {
    record("broadcast_tokens", out, {z.node()}, [zn = z.node(), on = out.node(), n, count, d] {
      for (int in = 0; in < n; ++in)
        for (int ip = 0; ip < count; ++ip)
          for (int j = 0; j < d; ++j)
            zn->grad[static_cast<std::size_t>(in) * d + j] +=
                on->grad[(static_cast<std::size_t>(in) * count + ip) * d + j];
    });
  }
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mse", a.shape(), b.shape());
  const std::size_t n = a.size();
  double sum = 0.0;
  const float* pa = a.data();
  const float* pb = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = static_cast<double>(pa[i]) - pb[i];
    sum += diff * diff;
  }
  Tensor out = Tensor::scalar(static_cast<float>(sum / static_cast<double>(n)));
  if (recording(a, b)) {
    record("mse", out, {a.node(), b.node()}, [an = a.node(), bn = b.node(), on = out.node(), n] {
      const float g = 2.0f * on->grad[0] / static_cast<float>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const float diff = an->data[i] - bn->data[i];
        if (an->requires_grad) an->grad[i] += g * diff;
        if (bn->requires_grad) bn->grad[i] -= g * diff;
      }
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) throw std::invalid_argument("softmax_cross_entropy: expects [N,C] logits");
  const int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("softmax_cross_entropy: labels length " + std::to_string(labels.size()) +
                                " != batch " + std::to_string(n));
  for (int lab : labels)
    if (lab < 0 || lab >= c) throw std::invalid_argument("softmax_cross_entropy: label out of range");

  std::vector<float> probs(logits.size());
  const float* px = logits.data();
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* xr = px + static_cast<std::size_t>(i) * c;
    float mx = xr[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      probs[static_cast<std::size_t>(i) * c + j] = std::exp(xr[j] - mx);
      sum += static_cast<double>(probs[static_cast<std::size_t>(i) * c + j]);
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int j = 0; j < c; ++j) probs[static_cast<std::size_t>(i) * c + j] *= inv;
    loss += std::log(sum) + mx - xr[labels[static_cast<std::size_t>(i)]];
  }
  Tensor out = Tensor::scalar(static_cast<float>(loss / n));
  if (recording(logits)) {
    record("softmax_cross_entropy", out, {logits.node()},
           [xn = logits.node(), on = out.node(), probs = std::move(probs), labels, n, c] {
             const float g = on->grad[0] / static_cast<float>(n);
             for (int i = 0; i < n; ++i)
               for (int j = 0; j < c; ++j) {
                 const float ind = j == labels[static_cast<std::size_t>(i)] ? 1.0f : 0.0f;
                 xn->grad[static_cast<std::size_t>(i) * c + j] +=
                     g * (probs[static_cast<std::size_t>(i) * c + j] - ind);
               }
           });
  }
  return out;
}

Tensor offdiag_sq_sum(const Tensor& c) {
  if (c.ndim() != 2 || c.dim(0) != c.dim(1))
    throw std::invalid_argument("offdiag_sq_sum: expects a square matrix, got " + shape_str(c.shape()));
  const int d = c.dim(0);
  double sum = 0.0;
  const float* pc = c.data();
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (i != j) {
        const double v = pc[static_cast<std::size_t>(i) * d + j];
        sum += v * v;
      }
  Tensor out = Tensor::scalar(static_cast<float>(sum));
  if (recording(c)) {
    record("offdiag_sq_sum", out, {c.node()}, [cn = c.node(), on = out.node(), d] {
      const float g = on->grad[0];
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          if (i != j)
            cn->grad[static_cast<std::size_t>(i) * d + j] +=
                2.0f * g * cn->data[static_cast<std::size_t>(i) * d + j];
    });
  }
  return out;
}

namespace {
void patch_grid(const char* op, int h, int w, int patch, int& gh, int& gw) {
  if (patch <= 0 || h % patch != 0 || w % patch != 0)
    throw std::invalid_argument(std::string(op) + ": image " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by patch " + std::to_string(patch));
  gh = h / patch;
  gw = w / patch;
}
}  // namespace

Tensor patchify(const Tensor& images, int patch) {
  if (images.ndim() != 4) throw std::invalid_argument("patchify: expects [N,C,H,W], got " + shape_str(images.shape()));
  const int n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  int gh, gw;
  patch_grid("patchify", h, w, patch, gh, gw);
  const int p2 = patch * patch;
  const int token_dim = c * p2;
  Tensor out = Tensor::zeros({n, gh * gw, token_dim});
  const float* px = images.data();
  float* po = out.data();
  for (int in = 0; in < n; ++in)
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        const std::size_t t = static_cast<std::size_t>(in) * gh * gw + static_cast<std::size_t>(gy) * gw + gx;
        for (int ic = 0; ic < c; ++ic)
          for (int iy = 0; iy < patch; ++iy)
            for (int ix = 0; ix < patch; ++ix)
              po[t * token_dim + static_cast<std::size_t>(ic) * p2 + static_cast<std::size_t>(iy) * patch + ix] =
                  px[((static_cast<std::size_t>(in) * c + ic) * h + gy * patch + iy) * w + gx * patch + ix];
      }
  if (recording(images)) {
    record("patchify", out, {images.node()},
           [xn = images.node(), on = out.node(), n, c, h, w, patch, gh, gw, p2, token_dim] {
             for (int in = 0; in < n; ++in)
               for (int gy = 0; gy < gh; ++gy)
                 for (int gx = 0; gx < gw; ++gx) {
                   const std::size_t t =
                       static_cast<std::size_t>(in) * gh * gw + static_cast<std::size_t>(gy) * gw + gx;
                   for (int ic = 0; ic < c; ++ic)
                     for (int iy = 0; iy < patch; ++iy)
                       for (int ix = 0; ix < patch; ++ix)
                         xn->grad[((static_cast<std::size_t>(in) * c + ic) * h + gy * patch + iy) * w +
                                  gx * patch + ix] +=
                             on->grad[t * token_dim + static_cast<std::size_t>(ic) * p2 +
                                      static_cast<std::size_t>(iy) * patch + ix];
                 }
           });
  }
  return out;
}

Tensor unpatchify(const Tensor& tokens, int channels, int height, int width, int patch) {
  if (tokens.ndim() != 3) throw std::invalid_argument("unpatchify: expects [N,P,D], got " + shape_str(tokens.shape()));
  int gh, gw;
  patch_grid("unpatchify", height, width, patch, gh, gw);
  const int p2 = patch * patch;
  const int token_dim = channels * p2;
  const int n = tokens.dim(0);
  if (tokens.dim(1) != gh * gw || tokens.dim(2) != token_dim)
    throw std::invalid_argument("unpatchify: token shape " + shape_str(tokens.shape()) + " does not match geometry");
  Tensor out = Tensor::zeros({n, channels, height, width});
  const float* px = tokens.data();
  float* po = out.data();
  for (int in = 0; in < n; ++in)
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        const std::size_t t = static_cast<std::size_t>(in) * gh * gw + static_cast<std::size_t>(gy) * gw + gx;
        for (int ic = 0; ic < channels; ++ic)
          for (int iy = 0; iy < patch; ++iy)
            for (int ix = 0; ix < patch; ++ix)
              po[((static_cast<std::size_t>(in) * channels + ic) * height + gy * patch + iy) * width +
                 gx * patch + ix] =
                  px[t * token_dim + static_cast<std::size_t>(ic) * p2 + static_cast<std::size_t>(iy) * patch + ix];
      }
  if (recording(tokens)) {
    record("unpatchify", out, {tokens.node()},
           [xn = tokens.node(), on = out.node(), n, channels, height, width, patch, gh, gw, p2, token_dim] {
             for (int in = 0; in < n; ++in)
               for (int gy = 0; gy < gh; ++gy)
                 for (int gx = 0; gx < gw; ++gx) {
                   const std::size_t t =
                       static_cast<std::size_t>(in) * gh * gw + static_cast<std::size_t>(gy) * gw + gx;
                   for (int ic = 0; ic < channels; ++ic)
                     for (int iy = 0; iy < patch; ++iy)
                       for (int ix = 0; ix < patch; ++ix)
                         xn->grad[t * token_dim + static_cast<std::size_t>(ic) * p2 +
                                  static_cast<std::size_t>(iy) * patch + ix] +=
                             on->grad[((static_cast<std::size_t>(in) * channels + ic) * height +
                                       gy * patch + iy) * width + gx * patch + ix];
                 }
           });
  }
  return out;
}

}  // namespace eqr
