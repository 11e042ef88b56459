#include "patch/mask.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "patch/error.hpp"

namespace patch::mask {
namespace {

constexpr double kUniformLo = 1e-10;
constexpr double kUniformHi = 1.0 - 1e-10;

std::string geometry_string(std::size_t d1, std::size_t d2, std::size_t b1, std::size_t b2) {
  return std::to_string(d1) + "x" + std::to_string(d2) + " with tiles " + std::to_string(b1) +
         "x" + std::to_string(b2);
}

double interpolate(double start, double end, Interpolation how, double frac) {
  if (how == Interpolation::kLinear) return start + (end - start) * frac;
  return start * std::pow(end / start, frac);
}

}  // namespace

std::size_t pattern_from_offsets(std::size_t lo, std::size_t hi) {
  for (std::size_t p = 0; p < kNumPatterns; ++p) {
    if (kPatternOffsets[p][0] == lo && kPatternOffsets[p][1] == hi) return p;
  }
  throw IndexError("no 2:4 pattern keeps offsets (" + std::to_string(lo) + ", " +
                   std::to_string(hi) + ")");
}

ad::Tensor pattern_matrix() {
  std::vector<float> s;
  s.reserve(kNumPatterns * kGroupSize);
  for (const auto& row : kPatterns)
    for (auto v : row) s.push_back(static_cast<float>(v));
  return ad::Tensor::constant({kNumPatterns, kGroupSize}, std::move(s));
}

std::size_t best_pattern(std::span<const float, 4> scores) {
  std::size_t best = 0;
  float best_score = scores[kPatternOffsets[0][0]] + scores[kPatternOffsets[0][1]];
  for (std::size_t p = 1; p < kNumPatterns; ++p) {
    const float s = scores[kPatternOffsets[p][0]] + scores[kPatternOffsets[p][1]];
    if (s > best_score) {
      best = p;
      best_score = s;
    }
  }
  return best;
}

std::size_t argmax_pattern(std::span<const float, kNumPatterns> logits) {
  std::size_t best = 0;
  for (std::size_t p = 1; p < kNumPatterns; ++p)
    if (logits[p] > logits[best]) best = p;
  return best;
}

void check_geometry(std::size_t d1, std::size_t d2, std::size_t b1, std::size_t b2) {
  if (d1 == 0 || d2 == 0 || b1 == 0 || b2 == 0 || d1 % b1 != 0 || d2 % b2 != 0) {
    throw LayoutError("matrix " + geometry_string(d1, d2, b1, b2) +
                      " does not divide into whole tiles");
  }
  if (d2 % kGroupSize != 0 || b2 % kGroupSize != 0) {
    throw LayoutError("matrix " + geometry_string(d1, d2, b1, b2) +
                      ": column extents must be multiples of 4 for 2:4 groups");
  }
}

PatternLogits::PatternLogits(std::size_t rows, std::size_t cols, std::vector<float> values,
                             bool trainable)
    : d1(rows), d2(cols) {
  if ((rows * cols) % kGroupSize != 0 || rows * cols == 0) {
    throw LayoutError("2:4 logits need an element count divisible by 4, got " +
                      std::to_string(rows) + "x" + std::to_string(cols));
  }
  ad::Shape shape{kNumPatterns, rows * cols / kGroupSize};
  logits = trainable ? ad::Tensor::parameter(std::move(shape), std::move(values))
                     : ad::Tensor::constant(std::move(shape), std::move(values));
}

PatternLogits PatternLogits::zeros(std::size_t rows, std::size_t cols, bool trainable) {
  return PatternLogits(rows, cols, std::vector<float>(kNumPatterns * rows * cols / kGroupSize),
                       trainable);
}

TileLogits::TileLogits(std::size_t rows, std::size_t cols, std::size_t tile_rows,
                       std::size_t tile_cols, std::vector<float> values, bool trainable)
    : d1(rows), d2(cols), b1(tile_rows), b2(tile_cols) {
  if (rows == 0 || cols == 0 || tile_rows == 0 || tile_cols == 0 || rows % tile_rows != 0 ||
      cols % tile_cols != 0) {
    throw LayoutError("tile logits: matrix " + geometry_string(rows, cols, tile_rows, tile_cols) +
                      " does not divide into whole tiles");
  }
  ad::Shape shape{rows / tile_rows, cols / tile_cols};
  logits = trainable ? ad::Tensor::parameter(std::move(shape), std::move(values))
                     : ad::Tensor::constant(std::move(shape), std::move(values));
}

TileLogits TileLogits::zeros(std::size_t rows, std::size_t cols, std::size_t tile_rows,
                             std::size_t tile_cols, bool trainable) {
  const std::size_t n = (tile_rows && tile_cols) ? (rows / tile_rows) * (cols / tile_cols) : 0;
  return TileLogits(rows, cols, tile_rows, tile_cols, std::vector<float>(n), trainable);
}

HybridMask::HybridMask(std::size_t rows, std::size_t cols, std::size_t tile_rows,
                       std::size_t tile_cols)
    : d1(rows), d2(cols), b1(tile_rows), b2(tile_cols) {
  check_geometry(rows, cols, tile_rows, tile_cols);
  tile_dense.assign(tiles(), 0);
  pattern_idx.assign(groups(), 0);
}

std::size_t HybridMask::tile_of_group(std::size_t group) const {
  const std::size_t flat = group * kGroupSize;
  const std::size_t row = flat / d2, col = flat % d2;
  return (row / b1) * grid_cols() + col / b2;
}

std::size_t HybridMask::dense_tiles() const {
  std::size_t k = 0;
  for (auto f : tile_dense) k += f ? 1 : 0;
  return k;
}

void GumbelSchedule::validate() const {
  if (!(tau_start > 0.0) || !(tau_end > 0.0)) throw ParameterError("tau must be positive");
  if (!(kappa_start > 0.0) || !(kappa_end > 0.0)) throw ParameterError("kappa must be positive");
  if (tau_end > tau_start) throw ParameterError("tau schedule must be non-increasing");
  if (kappa_end < kappa_start) throw ParameterError("kappa schedule must be non-decreasing");
  if (total_steps < 1) throw ParameterError("total_steps must be at least 1");
}

double GumbelSchedule::tau(long step) const {
  const double frac = total_steps > 1 ? static_cast<double>(step) / (total_steps - 1) : 1.0;
  return interpolate(tau_start, tau_end, tau_interp, std::clamp(frac, 0.0, 1.0));
}

double GumbelSchedule::kappa(long step) const {
  const double frac = total_steps > 1 ? static_cast<double>(step) / (total_steps - 1) : 1.0;
  return interpolate(kappa_start, kappa_end, kappa_interp, std::clamp(frac, 0.0, 1.0));
}

ad::Tensor gumbel_softmax(const ad::Tensor& logits, std::size_t axis, double tau, double kappa,
                          Rng* rng, bool noise) {
  if (!(tau > 0.0)) throw ParameterError("gumbel_softmax: tau must be > 0, got " + std::to_string(tau));
  if (!(kappa > 0.0)) {
    throw ParameterError("gumbel_softmax: kappa must be > 0, got " + std::to_string(kappa));
  }
  ad::Tensor x = ad::scale(logits, static_cast<float>(kappa));
  if (noise) {
    if (rng == nullptr) throw ParameterError("gumbel_softmax: noise requested without an rng");
    std::vector<float> z(logits.size());
    for (auto& v : z) {
      const double u = std::clamp(std::generate_canonical<double, 53>(*rng), kUniformLo, kUniformHi);
      v = static_cast<float>(-std::log(-std::log(u)));
    }
    x = ad::add(x, ad::Tensor::constant(logits.shape(), std::move(z)));
  }
  return ad::softmax(ad::scale(x, static_cast<float>(1.0 / tau)), axis);
}

ad::Tensor gumbel_softmax(const ad::Tensor& logits, double tau, double kappa, Rng* rng,
                          bool noise) {
  return gumbel_softmax(logits, logits.rank() - 1, tau, kappa, rng, noise);
}

SoftMask soft_mask_2_4(const PatternLogits& p, double tau, double kappa, Rng* rng, bool noise) {
  if (p.d2 % kGroupSize != 0) {
    throw LayoutError("2:4 mask: column count " + std::to_string(p.d2) +
                      " is not a multiple of 4");
  }
  // [6 x G] -> per-group pattern weights [G x 6] -> [G x 4] -> d1 x d2.
  ad::Tensor probs = gumbel_softmax(p.logits, 0, tau, kappa, rng, noise);
  ad::Tensor groups = ad::matmul(ad::transpose(probs), pattern_matrix());
  return SoftMask{ad::reshape(groups, {p.d1, p.d2})};
}

SoftMask soft_mask_tile(const TileLogits& p, double tau, double kappa, Rng* rng, bool noise) {
  const ad::Tensor pair =
      ad::stack_last({p.logits, ad::Tensor::zeros(p.logits.shape())});
  ad::Tensor dense_prob = ad::select_last(gumbel_softmax(pair, tau, kappa, rng, noise), 0);
  return SoftMask{ad::kron_expand(dense_prob, p.b1, p.b2)};
}

SoftMask merge_masks(const SoftMask& tile, const SoftMask& m24) {
  if (tile.values.shape() != m24.values.shape()) {
    throw DimensionError("merge_masks: shape mismatch " + ad::to_string(tile.values.shape()) +
                         " vs " + ad::to_string(m24.values.shape()));
  }
  const ad::Tensor sparse_weight = ad::add_scalar(ad::scale(tile.values, -1.0f), 1.0f);
  return SoftMask{ad::add(tile.values, ad::mul(sparse_weight, m24.values))};
}

HybridMask harden(const TileLogits& tile, const PatternLogits& p24) {
  if (tile.d1 != p24.d1 || tile.d2 != p24.d2) {
    throw DimensionError("harden: tile logits cover " + std::to_string(tile.d1) + "x" +
                         std::to_string(tile.d2) + " but 2:4 logits cover " +
                         std::to_string(p24.d1) + "x" + std::to_string(p24.d2));
  }
  HybridMask out(tile.d1, tile.d2, tile.b1, tile.b2);
  const auto t = tile.logits.data();
  for (std::size_t i = 0; i < out.tile_dense.size(); ++i) out.tile_dense[i] = t[i] > 0.0f ? 1 : 0;
  const std::size_t g = out.groups();
  const auto p = p24.logits.data();
  std::array<float, kNumPatterns> col{};
  for (std::size_t j = 0; j < g; ++j) {
    for (std::size_t k = 0; k < kNumPatterns; ++k) col[k] = p[k * g + j];
    out.pattern_idx[j] = static_cast<std::uint8_t>(argmax_pattern(col));
  }
  return out;
}

std::vector<float> expand(const HybridMask& mask) {
  std::vector<float> out(mask.d1 * mask.d2, 0.0f);
  for (std::size_t g = 0; g < mask.groups(); ++g) {
    float* dst = out.data() + g * kGroupSize;
    if (mask.tile_dense[mask.tile_of_group(g)]) {
      std::fill(dst, dst + kGroupSize, 1.0f);
    } else {
      const auto& row = kPatterns.at(mask.pattern_idx[g]);
      for (std::size_t k = 0; k < kGroupSize; ++k) dst[k] = row[k];
    }
  }
  return out;
}

SoftMask expand_soft(const HybridMask& mask) {
  return SoftMask{ad::Tensor::constant({mask.d1, mask.d2}, expand(mask))};
}

std::size_t kept_count(const HybridMask& mask) {
  const std::size_t tile_elems = mask.b1 * mask.b2;
  const std::size_t dense = mask.dense_tiles();
  return dense * tile_elems + (mask.tiles() - dense) * tile_elems / 2;
}

double density(const HybridMask& mask) {
  return static_cast<double>(kept_count(mask)) / static_cast<double>(mask.d1 * mask.d2);
}

double density(const SoftMask& mask) { return density(mask, mask.values.size()); }

double density(const SoftMask& mask, std::size_t weights_nnz) {
  double total = 0.0;
  for (float v : mask.values.data()) total += v;
  return total / static_cast<double>(weights_nnz);
}

}  // namespace patch::mask
