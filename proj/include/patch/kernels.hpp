#pragma once

// Data-parallel inner loops. Every kernel has a portable scalar reference and
// an AVX2 variant selected at runtime. Both variants accumulate each output
// element in ascending reduction index with separate multiply and add (no
// fused multiply-add), so they agree bit for bit.

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace patch::kernels {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);

// True when the running CPU supports the AVX2 variant.
bool cpu_has_avx2();

// Best ISA for this process. Honors PATCH_SIMD=scalar in the environment.
Isa active_isa();

// Forces the ISA used by the dispatching entry points; used by tests and by
// the bench tool. Requesting kAvx2 on a CPU without it falls back to scalar.
void set_isa(Isa isa);

// C[m x n] (+)= A[m x k] * B[k x n], all row-major.
void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate);
void gemm(Isa isa, const float* a, const float* b, float* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate);

// Read-only view of a hybrid tile matrix in its in-memory execution layout.
// Tiles are numbered row-major over the tile grid. For dense tiles
// `tile_offset` indexes `dense_values` (b1*b2 row-major floats); for sparse
// tiles it indexes `sparse_values` (b1*b2/2 floats in group order) and
// tile_offset/2 indexes `sparse_meta` (one byte per group: low two bits are
// the first kept column offset, next two bits the second).
struct HybridView {
  std::size_t d1 = 0, d2 = 0, b1 = 0, b2 = 0;
  const std::uint8_t* tile_dense = nullptr;
  const std::size_t* tile_offset = nullptr;
  const float* dense_values = nullptr;
  const float* sparse_values = nullptr;
  const std::uint8_t* sparse_meta = nullptr;
};

enum class LoopOrder { kBandMajor, kBlockMajor };

struct SpmmBlocking {
  std::size_t rows = 64;  // output rows per band
  std::size_t cols = 64;  // reduction columns per block
  LoopOrder order = LoopOrder::kBandMajor;
};

// Y[row_begin:row_end, :] = A[row_begin:row_end, :] * X for X of shape d2 x n.
// Rows outside the range are left untouched.
void spmm_rows(const HybridView& a, const float* x, std::size_t n, float* y,
               std::size_t row_begin, std::size_t row_end, const SpmmBlocking& blocking);
void spmm_rows(Isa isa, const HybridView& a, const float* x, std::size_t n, float* y,
               std::size_t row_begin, std::size_t row_end, const SpmmBlocking& blocking);

}  // namespace patch::kernels
