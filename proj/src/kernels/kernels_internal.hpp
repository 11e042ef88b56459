#pragma once

#include "patch/kernels.hpp"

namespace patch::kernels::detail {

void gemm_scalar(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate);
void spmm_rows_scalar(const HybridView& a, const float* x, std::size_t n, float* y,
                      std::size_t row_begin, std::size_t row_end, const SpmmBlocking& blocking);

#if PATCH_HAVE_AVX2
void gemm_avx2(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate);
void spmm_rows_avx2(const HybridView& a, const float* x, std::size_t n, float* y,
                    std::size_t row_begin, std::size_t row_end, const SpmmBlocking& blocking);
#endif

}  // namespace patch::kernels::detail
