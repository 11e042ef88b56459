#pragma once

// Compressed storage and execution for hybrid dense / 2:4 tile matrices.
//
// On-disk ".hsm" layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "PTCHHSM1"
//   offset 8   u32 x 4   d1, d2, b1, b2
//   offset 24  ceil(T/8) tile bitmap, bit t%8 of byte t/8 set = tile t dense
//   ...        per tile in row-major tile order:
//                dense : b1*b2 float32, row-major within the tile
//                sparse: b1*b2/2 float32 kept values in group order, then
//                        ceil(b1*b2/8) bytes of metadata, one nibble per group
//                        (even group -> low nibble); within a nibble bits 0-1
//                        hold the first kept offset, bits 2-3 the second.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "patch/kernels.hpp"
#include "patch/mask.hpp"

namespace patch::hsm {

inline constexpr char kMagic[8] = {'P', 'T', 'C', 'H', 'H', 'S', 'M', '1'};
inline constexpr std::size_t kHeaderBytes = 8 + 4 * 4;

class HybridSparseMatrix {
 public:
  HybridSparseMatrix() = default;

  std::size_t d1() const { return d1_; }
  std::size_t d2() const { return d2_; }
  std::size_t b1() const { return b1_; }
  std::size_t b2() const { return b2_; }
  std::size_t grid_rows() const { return d1_ / b1_; }
  std::size_t grid_cols() const { return d2_ / b2_; }
  std::size_t tiles() const { return tile_dense_.size(); }
  std::size_t dense_tiles() const;
  bool tile_is_dense(std::size_t tile) const { return tile_dense_.at(tile) != 0; }

  // Fraction of matrix positions that hold a stored (unpruned) weight.
  double density() const;
  std::size_t stored_weights() const;

  kernels::HybridView view() const;

  const std::vector<std::uint8_t>& tile_flags() const { return tile_dense_; }
  const std::vector<float>& dense_values() const { return dense_values_; }
  const std::vector<float>& sparse_values() const { return sparse_values_; }
  const std::vector<std::uint8_t>& sparse_meta() const { return sparse_meta_; }

  friend bool operator==(const HybridSparseMatrix& a, const HybridSparseMatrix& b);

 private:
  friend HybridSparseMatrix compress(std::span<const float>, std::size_t, std::size_t,
                                     const mask::HybridMask&);
  friend HybridSparseMatrix deserialize(std::span<const std::uint8_t>);
  void init_geometry(std::size_t d1, std::size_t d2, std::size_t b1, std::size_t b2);
  void assign_offsets();

  std::size_t d1_ = 0, d2_ = 0, b1_ = 0, b2_ = 0;
  std::vector<std::uint8_t> tile_dense_;
  std::vector<std::size_t> tile_offset_;
  std::vector<float> dense_values_;
  std::vector<float> sparse_values_;
  std::vector<std::uint8_t> sparse_meta_;  // one byte per group, unpacked
};

// Dense tiles keep their raw weights; sparse tiles keep the two weights the
// mask selects in each group.
HybridSparseMatrix compress(std::span<const float> weights, std::size_t d1, std::size_t d2,
                            const mask::HybridMask& mask);

// Row-major d1 x d2 matrix equal to W * expand(mask).
std::vector<float> decompress(const HybridSparseMatrix& a);

// Recovers the hardened mask; pattern indices inside dense tiles are 0.
mask::HybridMask to_mask(const HybridSparseMatrix& a);

std::vector<std::uint8_t> serialize(const HybridSparseMatrix& a);
// Throws FormatError naming the byte offset of the first inconsistency.
HybridSparseMatrix deserialize(std::span<const std::uint8_t> bytes);

void save(const HybridSparseMatrix& a, const std::filesystem::path& path);
HybridSparseMatrix load(const std::filesystem::path& path);

struct KernelPlan {
  std::size_t tile_rows = 64;
  std::size_t tile_cols = 64;
  kernels::LoopOrder order = kernels::LoopOrder::kBandMajor;
  std::size_t threads = 1;

  std::string describe() const;
  friend bool operator==(const KernelPlan&, const KernelPlan&) = default;
};

// Execution tiles 128x128, 128x64, 64x128, 64x64 and the storage tile,
// clamped to the matrix, filtered to those that divide or are divided by the
// storage tile, each under both loop orders. Canonical order is stable.
std::vector<KernelPlan> candidate_plans(const HybridSparseMatrix& a, std::size_t threads = 1);

// Y = A * X with X of shape d2 x n (row-major). Output rows are partitioned
// into contiguous bands, one per thread, so results do not depend on the
// thread count.
std::vector<float> spmm(const HybridSparseMatrix& a, std::span<const float> x, std::size_t n,
                        const KernelPlan& plan = {});

struct PlanTiming {
  KernelPlan plan;
  std::vector<double> seconds;
  double median = 0.0;
};

struct AutotuneReport {
  std::vector<PlanTiming> timings;
  std::size_t chosen = 0;
  const KernelPlan& plan() const { return timings.at(chosen).plan; }
};

// Index of the smallest median; ties go to the earliest candidate.
std::size_t select_plan(std::span<const PlanTiming> timings);

// Times every candidate `repetitions` times (>= 5) on a deterministic input
// and picks the minimum median runtime.
AutotuneReport autotune(const HybridSparseMatrix& a, std::size_t n, std::size_t threads = 1,
                        std::size_t repetitions = 5);
AutotuneReport autotune(const HybridSparseMatrix& a, std::size_t n,
                        std::span<const KernelPlan> candidates, std::size_t repetitions = 5);

struct Accounting {
  std::uint64_t bytes = 0;        // serialized size including header and bitmap
  std::uint64_t dense_bytes = 0;  // 4 * d1 * d2
  double bytes_ratio = 0.0;
  std::uint64_t flops = 0;        // 2 * n * stored weights
  std::uint64_t dense_flops = 0;  // 2 * n * d1 * d2
  double flops_ratio = 0.0;
  double density = 0.0;
};

std::uint64_t tile_payload_bytes(std::size_t b1, std::size_t b2, bool dense);
Accounting accounting(const HybridSparseMatrix& a, std::size_t n = 1);

// Plain-text sidecar with the accounting fields.
void write_meta_json(const HybridSparseMatrix& a, std::size_t n, const std::filesystem::path& path);

}  // namespace patch::hsm
