#include "kernel_impl.hpp"
#include "kernels_internal.hpp"

namespace patch::kernels::detail {
namespace {

struct ScalarOps {
  static void gemm_row(const float* a, const float* b, float* crow, std::size_t k, std::size_t n) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float w = a[kk];
      const float* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] = crow[j] + w * brow[j];
    }
  }

  static void axpy1(float* y, const float* x, float w, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) y[j] = y[j] + w * x[j];
  }

  static void axpy2(float* y, const float* x0, float w0, const float* x1, float w1,
                    std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
      float acc = y[j] + w0 * x0[j];
      y[j] = acc + w1 * x1[j];
    }
  }

  static void axpy4(float* y, const float* x, std::size_t stride, const float* w, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) {
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

void gemm_scalar(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate) {
  gemm_impl<ScalarOps>(a, b, c, m, k, n, accumulate);
}

void spmm_rows_scalar(const HybridView& a, const float* x, std::size_t n, float* y,
                      std::size_t row_begin, std::size_t row_end, const SpmmBlocking& blocking) {
  spmm_rows_impl<ScalarOps>(a, x, n, y, row_begin, row_end, blocking);
}

}  // namespace patch::kernels::detail
