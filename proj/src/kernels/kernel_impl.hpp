#pragma once

// Loop nests shared by the scalar and SIMD translation units. Everything here
// is a template over an `Ops` policy so each TU gets its own instantiation,
// compiled with that TU's target flags.

#include <algorithm>
#include <cstddef>
#include <cstring>

#include "patch/kernels.hpp"

namespace patch::kernels::detail {

template <class Ops>
void gemm_impl(const float* a, const float* b, float* c, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0f);
    Ops::gemm_row(a + i * k, b, crow, k, n);
  }
}

template <class Ops>
void spmm_rows_impl(const HybridView& a, const float* x, std::size_t n, float* y,
                    std::size_t row_begin, std::size_t row_end, const SpmmBlocking& blocking) {
  const std::size_t band = std::max<std::size_t>(1, blocking.rows);
  // Reduction blocks never split a group of four.
  const std::size_t block = std::max<std::size_t>(4, blocking.cols & ~std::size_t{3});
  const std::size_t tiles_per_row = a.d2 / a.b2;
  const std::size_t groups_per_tile_row = a.b2 / 4;

  for (std::size_t r = row_begin; r < row_end; ++r) std::fill(y + r * n, y + (r + 1) * n, 0.0f);

  auto segment = [&](std::size_t row, std::size_t c0, std::size_t c1) {
    float* yrow = y + row * n;
    const std::size_t tile_base = (row / a.b1) * tiles_per_row;
    const std::size_t local_row = row % a.b1;
    std::size_t c = c0;
    while (c < c1) {
      const std::size_t tc = c / a.b2;
      const std::size_t col0 = tc * a.b2;
      const std::size_t stop = std::min(c1, col0 + a.b2);
      const std::size_t tile = tile_base + tc;
      const std::size_t off = a.tile_offset[tile];
      if (a.tile_dense[tile]) {
        const float* w = a.dense_values + off + local_row * a.b2 - col0;
        std::size_t cc = c;
        for (; cc + 4 <= stop; cc += 4) {
          Ops::axpy4(yrow, x + cc * n, n, w + cc, n);
        }
        for (; cc < stop; ++cc) Ops::axpy1(yrow, x + cc * n, w[cc], n);
      } else {
        const std::size_t g0 = local_row * groups_per_tile_row + (c - col0) / 4;
        const std::size_t g1 = local_row * groups_per_tile_row + (stop - col0) / 4;
        const float* vals = a.sparse_values + off;
        const unsigned char* meta = a.sparse_meta + off / 2;
        std::size_t kbase = c;
        for (std::size_t g = g0; g < g1; ++g, kbase += 4) {
          const unsigned m = meta[g];
          const float* x0 = x + (kbase + (m & 3u)) * n;
          const float* x1 = x + (kbase + ((m >> 2) & 3u)) * n;
          Ops::axpy2(yrow, x0, vals[2 * g], x1, vals[2 * g + 1], n);
        }
      }
      c = stop;
    }
  };

  if (blocking.order == LoopOrder::kBandMajor) {
    for (std::size_t r0 = row_begin; r0 < row_end; r0 += band) {
      const std::size_t r1 = std::min(row_end, r0 + band);
      for (std::size_t c0 = 0; c0 < a.d2; c0 += block) {
        const std::size_t c1 = std::min(a.d2, c0 + block);
        for (std::size_t r = r0; r < r1; ++r) segment(r, c0, c1);
      }
    }
  } else {
    for (std::size_t c0 = 0; c0 < a.d2; c0 += block) {
      const std::size_t c1 = std::min(a.d2, c0 + block);
      for (std::size_t r0 = row_begin; r0 < row_end; r0 += band) {
        const std::size_t r1 = std::min(row_end, r0 + band);
        for (std::size_t r = r0; r < r1; ++r) segment(r, c0, c1);
      }
    }
  }
}

}  // namespace patch::kernels::detail
