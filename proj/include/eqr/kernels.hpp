#pragma once

#include <cstddef>

namespace eqr {

// Dense row-major single-precision matrix kernels. Every output element is
// produced by exactly one thread with a fixed sequential reduction order, so
// results are bit-identical regardless of thread count.

// C (+)= A[m,k] * B[k,n]
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);

// C (+)= A[m,k] * B[n,k]^T
void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);

// C (+)= A[m,k]^T * B[m,n]   (result is [k,n])
void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate);

}  // namespace eqr
