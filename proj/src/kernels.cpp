#include "eqr/kernels.hpp"

#include <cstring>

namespace eqr {

namespace {
// Threading pays off only once the row loop amortizes the fork/join.
constexpr long kParallelCutoff = 64 * 1024;
}  // namespace

void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
  for (int i = 0; i < m; ++i) {
    float* ci = c + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::memset(ci, 0, sizeof(float) * static_cast<std::size_t>(n));
    const float* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const float av = ai[p];
      const float* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
  for (int i = 0; i < m; ++i) {
    const float* ai = a + static_cast<std::size_t>(i) * k;
    float* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* bj = b + static_cast<std::size_t>(j) * k;
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
  for (int p = 0; p < k; ++p) {
    float* cp = c + static_cast<std::size_t>(p) * n;
    if (!accumulate) std::memset(cp, 0, sizeof(float) * static_cast<std::size_t>(n));
    for (int i = 0; i < m; ++i) {
      const float av = a[static_cast<std::size_t>(i) * k + p];
      const float* bi = b + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace eqr
