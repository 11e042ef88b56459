#pragma once

// One-shot pruning scorers: magnitude and Wanda-style |W| * ||X_j||_2, with
// 2:4 and unstructured selection.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patch/mask.hpp"
#include "patch/tensor.hpp"

namespace patch::oneshot {

enum class Method { kMagnitude, kWanda };

Method parse_method(const std::string& name);
std::string method_name(Method m);

// Running per-input-feature sum of squared activations.
class CalibrationStats {
 public:
  CalibrationStats() = default;
  explicit CalibrationStats(std::size_t features) : sq_sums_(features, 0.0) {}

  // Adds a batch of activation rows (rows x features, row-major).
  void accumulate(std::span<const float> rows, std::size_t features);
  void merge(const CalibrationStats& other);

  std::size_t features() const { return sq_sums_.size(); }
  std::size_t samples() const { return samples_; }
  std::vector<double> norms() const;
  const std::vector<double>& sq_sums() const { return sq_sums_; }

  static CalibrationStats from_sums(std::vector<double> sq_sums, std::size_t samples);

 private:
  std::vector<double> sq_sums_;
  std::size_t samples_ = 0;
};

// magnitude: |W_ij|; wanda: |W_ij| * ||X_j||_2 with j the input (column) index.
std::vector<float> score(const ad::Tensor& weights, Method method,
                         const std::optional<CalibrationStats>& calib = std::nullopt);

// Keeps the top-2 scores of every group of four (lower index wins ties).
// The result has every tile sparse.
mask::HybridMask prune_2_4(std::span<const float> scores, std::size_t d1, std::size_t d2,
                           std::size_t b1, std::size_t b2);

// Zeroes exactly floor(n * sparsity) entries: the lowest scores, ties broken
// by lower flat index first.
std::vector<std::uint8_t> prune_unstructured(std::span<const float> scores, double sparsity);

}  // namespace patch::oneshot
