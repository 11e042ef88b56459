// Compiled with -mavx2 only; callers reach it through the runtime dispatcher.
#include <immintrin.h>

#include "kernel_impl.hpp"
#include "kernels_internal.hpp"

namespace patch::kernels::detail {
namespace {

struct Avx2Ops {
  static void gemm_row(const float* a, const float* b, float* crow, std::size_t k, std::size_t n) {
    std::size_t j = 0;
    for (; j + 32 <= n; j += 32) {
      __m256 c0 = _mm256_loadu_ps(crow + j);
      __m256 c1 = _mm256_loadu_ps(crow + j + 8);
      __m256 c2 = _mm256_loadu_ps(crow + j + 16);
      __m256 c3 = _mm256_loadu_ps(crow + j + 24);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const __m256 w = _mm256_set1_ps(a[kk]);
        const float* brow = b + kk * n + j;
        c0 = _mm256_add_ps(c0, _mm256_mul_ps(w, _mm256_loadu_ps(brow)));
        c1 = _mm256_add_ps(c1, _mm256_mul_ps(w, _mm256_loadu_ps(brow + 8)));
        c2 = _mm256_add_ps(c2, _mm256_mul_ps(w, _mm256_loadu_ps(brow + 16)));
        c3 = _mm256_add_ps(c3, _mm256_mul_ps(w, _mm256_loadu_ps(brow + 24)));
      }
      _mm256_storeu_ps(crow + j, c0);
      _mm256_storeu_ps(crow + j + 8, c1);
      _mm256_storeu_ps(crow + j + 16, c2);
      _mm256_storeu_ps(crow + j + 24, c3);
    }
    for (; j + 8 <= n; j += 8) {
      __m256 c0 = _mm256_loadu_ps(crow + j);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const __m256 w = _mm256_set1_ps(a[kk]);
        c0 = _mm256_add_ps(c0, _mm256_mul_ps(w, _mm256_loadu_ps(b + kk * n + j)));
      }
      _mm256_storeu_ps(crow + j, c0);
    }
    for (; j < n; ++j) {
      float acc = crow[j];
      for (std::size_t kk = 0; kk < k; ++kk) acc = acc + a[kk] * b[kk * n + j];
      crow[j] = acc;
    }
  }

  static void axpy1(float* y, const float* x, float w, std::size_t n) {
    const __m256 vw = _mm256_set1_ps(w);
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256 acc = _mm256_loadu_ps(y + j);
      acc = _mm256_add_ps(acc, _mm256_mul_ps(vw, _mm256_loadu_ps(x + j)));
      _mm256_storeu_ps(y + j, acc);
    }
    for (; j < n; ++j) y[j] = y[j] + w * x[j];
  }

  static void axpy2(float* y, const float* x0, float w0, const float* x1, float w1,
                    std::size_t n) {
    const __m256 v0 = _mm256_set1_ps(w0);
    const __m256 v1 = _mm256_set1_ps(w1);
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256 acc = _mm256_loadu_ps(y + j);
      acc = _mm256_add_ps(acc, _mm256_mul_ps(v0, _mm256_loadu_ps(x0 + j)));
      acc = _mm256_add_ps(acc, _mm256_mul_ps(v1, _mm256_loadu_ps(x1 + j)));
      _mm256_storeu_ps(y + j, acc);
    }
    for (; j < n; ++j) {
      float acc = y[j] + w0 * x0[j];
      y[j] = acc + w1 * x1[j];
    }
  }

  static void axpy4(float* y, const float* x, std::size_t stride, const float* w, std::size_t n) {
    const __m256 v0 = _mm256_set1_ps(w[0]);
    const __m256 v1 = _mm256_set1_ps(w[1]);
    const __m256 v2 = _mm256_set1_ps(w[2]);
    const __m256 v3 = _mm256_set1_ps(w[3]);
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      __m256 acc = _mm256_loadu_ps(y + j);
      acc = _mm256_add_ps(acc, _mm256_mul_ps(v0, _mm256_loadu_ps(x + j)));
      acc = _mm256_add_ps(acc, _mm256_mul_ps(v1, _mm256_loadu_ps(x + stride + j)));
      acc = _mm256_add_ps(acc, _mm256_mul_ps(v2, _mm256_loadu_ps(x + 2 * stride + j)));
      acc = _mm256_add_ps(acc, _mm256_mul_ps(v3, _mm256_loadu_ps(x + 3 * stride + j)));
      _mm256_storeu_ps(y + j, acc);
    }
    for (; j < n; ++j) {
      float acc = y[j];
      acc = acc + w[0] * x[j];
      acc = acc + w[1] * x[stride + j];
      acc = acc + w[2] * x[2 * stride + j];
      acc = acc + w[3] * x[3 * stride + j];
      y[j] = acc;
    }
  }
};

}  // namespace

void gemm_avx2(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  gemm_impl<Avx2Ops>(a, b, c, m, k, n, accumulate);
}

void spmm_rows_avx2(const HybridView& a, const float* x, std::size_t n, float* y,
                    std::size_t row_begin, std::size_t row_end, const SpmmBlocking& blocking) {
  spmm_rows_impl<Avx2Ops>(a, x, n, y, row_begin, row_end, blocking);
}

}  // namespace patch::kernels::detail
