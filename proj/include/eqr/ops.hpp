#pragma once

#include <vector>

#include "eqr/tensor.hpp"

namespace eqr {

// Differentiable ops. Forward math is f32 with fixed loop order; reductions
// and row statistics accumulate in f64. Each op records a backward rule on
// the active tape when any input requires grad.

// b's shape must equal a's shape or a suffix of it (bias / positional add).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);  // same suffix rule
Tensor mul(const Tensor& a, const Tensor& b);  // same shape only
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float c);

// a: [..., m, k]; b: [k, n] shared or [..., k, n] with matching leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// a: [..., m, k]; b: [n, k] shared or [..., n, k]. Computes A * B^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_lastdim(const Tensor& a, int offset, int length);
Tensor concat_lastdim(const Tensor& a, const Tensor& b);
Tensor split_heads(const Tensor& x, int heads);  // [N,P,D] -> [N,h,P,D/h]
Tensor merge_heads(const Tensor& x);             // [N,h,P,hd] -> [N,P,h*hd]

Tensor softmax_lastdim(const Tensor& x);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sqrt_op(const Tensor& x);

Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_axis0(const Tensor& x);                  // [N,d] -> [d]
Tensor mean_tokens(const Tensor& x);                 // [N,P,D] -> [N,D]
Tensor broadcast_tokens(const Tensor& z, int count); // [N,D] -> [N,count,D]

Tensor mse(const Tensor& a, const Tensor& b);
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
Tensor offdiag_sq_sum(const Tensor& c);  // [d,d] -> scalar, diagonal excluded

// Exact inverse pair; pure index permutations.
Tensor patchify(const Tensor& images, int patch);  // [N,C,H,W] -> [N,P,C*p*p]
Tensor unpatchify(const Tensor& tokens, int channels, int height, int width, int patch);

// Canonical list of differentiable op names; gradcheck must cover all of it.
const std::vector<const char*>& differentiable_op_names();

}  // namespace eqr
