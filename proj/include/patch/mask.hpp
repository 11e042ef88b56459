#pragma once

// Mask mathematics for hybrid tile sparsity: Gumbel-Softmax relaxation, the
// 2:4 candidate pattern table, soft 2:4 and tile masks, their merge, and
// hardening into an inference-time HybridMask.
//
// Layout conventions used everywhere in the project:
//  * groups of four run along the column dimension of a row-major d1 x d2
//    matrix, so group g covers flat elements [4g, 4g + 4);
//  * tiles are numbered row-major over the (d1/b1) x (d2/b2) tile grid.

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "patch/tensor.hpp"

namespace patch::mask {

using Rng = std::mt19937_64;

inline constexpr std::size_t kNumPatterns = 6;
inline constexpr std::size_t kGroupSize = 4;

// Rows of S in lexicographically descending order of the 4-bit keep string:
// 1100, 1010, 1001, 0110, 0101, 0011.
inline constexpr std::array<std::array<std::uint8_t, 4>, kNumPatterns> kPatterns{{
    {1, 1, 0, 0},
    {1, 0, 1, 0},
    {1, 0, 0, 1},
    {0, 1, 1, 0},
    {0, 1, 0, 1},
    {0, 0, 1, 1},
}};

// Column offsets (ascending) of the two kept elements of each pattern.
inline constexpr std::array<std::array<std::uint8_t, 2>, kNumPatterns> kPatternOffsets{{
    {0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3},
}};

// Pattern index whose kept offsets are (lo, hi); lo < hi < 4 required.
std::size_t pattern_from_offsets(std::size_t lo, std::size_t hi);

// S as a constant 6 x 4 tensor.
ad::Tensor pattern_matrix();

// Pattern maximizing the summed score of its kept positions; ties resolve to
// the lowest pattern index.
std::size_t best_pattern(std::span<const float, 4> scores);

// Argmax over six logits with lowest-index tie-break.
std::size_t argmax_pattern(std::span<const float, kNumPatterns> logits);

// Learnable 6-way categorical per group of four: shape 6 x (d1*d2/4).
struct PatternLogits {
  std::size_t d1 = 0, d2 = 0;
  ad::Tensor logits;

  PatternLogits() = default;
  PatternLogits(std::size_t rows, std::size_t cols, std::vector<float> values,
                bool trainable = true);
  static PatternLogits zeros(std::size_t rows, std::size_t cols, bool trainable = true);

  std::size_t groups() const { return d1 * d2 / kGroupSize; }
  // Logit of pattern p for group g.
  float at(std::size_t pattern, std::size_t group) const {
    return logits.data()[pattern * groups() + group];
  }
};

// Learnable dense-vs-sparse logit per b1 x b2 tile: shape (d1/b1) x (d2/b2).
struct TileLogits {
  std::size_t d1 = 0, d2 = 0, b1 = 0, b2 = 0;
  ad::Tensor logits;

  TileLogits() = default;
  TileLogits(std::size_t rows, std::size_t cols, std::size_t tile_rows, std::size_t tile_cols,
             std::vector<float> values, bool trainable = true);
  static TileLogits zeros(std::size_t rows, std::size_t cols, std::size_t tile_rows,
                          std::size_t tile_cols, bool trainable = true);

  std::size_t grid_rows() const { return d1 / b1; }
  std::size_t grid_cols() const { return d2 / b2; }
  std::size_t tiles() const { return grid_rows() * grid_cols(); }
};

// Relaxed mask with entries in [0, 1], shape d1 x d2.
struct SoftMask {
  ad::Tensor values;

  std::size_t rows() const { return values.dim(0); }
  std::size_t cols() const { return values.dim(1); }
};

// Hardened inference mask. `pattern_idx` holds one entry per group of the
// whole matrix; entries inside dense tiles are carried but ignored.
struct HybridMask {
  std::size_t d1 = 0, d2 = 0, b1 = 0, b2 = 0;
  std::vector<std::uint8_t> tile_dense;
  std::vector<std::uint8_t> pattern_idx;

  HybridMask() = default;
  HybridMask(std::size_t rows, std::size_t cols, std::size_t tile_rows, std::size_t tile_cols);

  std::size_t grid_cols() const { return d2 / b2; }
  std::size_t tiles() const { return (d1 / b1) * (d2 / b2); }
  std::size_t groups() const { return d1 * d2 / kGroupSize; }
  std::size_t tile_of_group(std::size_t group) const;
  std::size_t dense_tiles() const;
  friend bool operator==(const HybridMask&, const HybridMask&) = default;
};

// Validates tile and group geometry; throws LayoutError.
void check_geometry(std::size_t d1, std::size_t d2, std::size_t b1, std::size_t b2);

enum class Interpolation { kLinear, kExponential };

struct GumbelSchedule {
  double tau_start = 4.0;
  double tau_end = 0.05;
  double kappa_start = 1.0;
  double kappa_end = 100.0;
  long total_steps = 2000;
  Interpolation tau_interp = Interpolation::kLinear;
  Interpolation kappa_interp = Interpolation::kExponential;

  void validate() const;
  double tau(long step) const;
  double kappa(long step) const;
};

// softmax((kappa * logits + z) / tau) along `axis`, z ~ Gumbel(0, 1) drawn
// from `rng` in flat row-major order, or z = 0 when `noise` is false.
ad::Tensor gumbel_softmax(const ad::Tensor& logits, std::size_t axis, double tau, double kappa,
                          Rng* rng, bool noise);
// Same along the trailing axis.
ad::Tensor gumbel_softmax(const ad::Tensor& logits, double tau, double kappa, Rng* rng,
                          bool noise);

SoftMask soft_mask_2_4(const PatternLogits& p, double tau, double kappa, Rng* rng, bool noise);
SoftMask soft_mask_tile(const TileLogits& p, double tau, double kappa, Rng* rng, bool noise);

// M = M_tile + (1 - M_tile) * M_24.
SoftMask merge_masks(const SoftMask& tile, const SoftMask& m24);

HybridMask harden(const TileLogits& tile, const PatternLogits& p24);

// Binary d1 x d2 mask (row-major) from a hardened mask.
std::vector<float> expand(const HybridMask& mask);
SoftMask expand_soft(const HybridMask& mask);

// Number of ones in expand(mask).
std::size_t kept_count(const HybridMask& mask);
double density(const HybridMask& mask);
// Sum of mask entries over the element count.
double density(const SoftMask& mask);
// Sum of mask entries over an explicit ||W||_0 denominator.
double density(const SoftMask& mask, std::size_t weights_nnz);

}  // namespace patch::mask
