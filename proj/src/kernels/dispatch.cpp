#include <atomic>
#include <cstdlib>
#include <string>

#include "kernels_internal.hpp"

namespace patch::kernels {
namespace {

Isa detect() {
  if (const char* env = std::getenv("PATCH_SIMD"); env != nullptr && std::string(env) == "scalar") {
    return Isa::kScalar;
  }
  return cpu_has_avx2() ? Isa::kAvx2 : Isa::kScalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::kAvx2 ? "avx2" : "scalar"; }

bool cpu_has_avx2() {
#if PATCH_HAVE_AVX2 && (defined(__GNUC__) || defined(__clang__))
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (isa == Isa::kAvx2 && !cpu_has_avx2()) isa = Isa::kScalar;
  current().store(isa, std::memory_order_relaxed);
}

void gemm(Isa isa, const float* a, const float* b, float* c, std::size_t m, std::size_t k,
          std::size_t n, bool accumulate) {
#if PATCH_HAVE_AVX2
  if (isa == Isa::kAvx2 && cpu_has_avx2()) {
    detail::gemm_avx2(a, b, c, m, k, n, accumulate);
    return;
  }
#endif
  (void)isa;
  detail::gemm_scalar(a, b, c, m, k, n, accumulate);
}

void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  gemm(active_isa(), a, b, c, m, k, n, accumulate);
}

void spmm_rows(Isa isa, const HybridView& a, const float* x, std::size_t n, float* y,
               std::size_t row_begin, std::size_t row_end, const SpmmBlocking& blocking) {
#if PATCH_HAVE_AVX2
  if (isa == Isa::kAvx2 && cpu_has_avx2()) {
    detail::spmm_rows_avx2(a, x, n, y, row_begin, row_end, blocking);
    return;
  }
#endif
  (void)isa;
  detail::spmm_rows_scalar(a, x, n, y, row_begin, row_end, blocking);
}

void spmm_rows(const HybridView& a, const float* x, std::size_t n, float* y,
               std::size_t row_begin, std::size_t row_end, const SpmmBlocking& blocking) {
  spmm_rows(active_isa(), a, x, n, y, row_begin, row_end, blocking);
}

}  // namespace patch::kernels
