#include "patch/oneshot.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "patch/error.hpp"

namespace patch::oneshot {

Method parse_method(const std::string& name) {
  if (name == "magnitude") return Method::kMagnitude;
  if (name == "wanda") return Method::kWanda;
  throw ConfigError("unknown one-shot method '" + name + "' (expected magnitude or wanda)");
}

std::string method_name(Method m) { return m == Method::kMagnitude ? "magnitude" : "wanda"; }

void CalibrationStats::accumulate(std::span<const float> rows, std::size_t features) {
  if (sq_sums_.empty()) sq_sums_.assign(features, 0.0);
  if (features != sq_sums_.size() || rows.size() % features != 0) {
    throw DimensionError("calibration: expected rows of " + std::to_string(sq_sums_.size()) +
                         " features, got " + std::to_string(rows.size()) + " values of width " +
                         std::to_string(features));
  }
  const std::size_t n = rows.size() / features;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < features; ++j) {
      const double v = rows[r * features + j];
      sq_sums_[j] += v * v;
    }
  }
  samples_ += n;
}

void CalibrationStats::merge(const CalibrationStats& other) {
  if (sq_sums_.empty()) sq_sums_.assign(other.sq_sums_.size(), 0.0);
  if (other.sq_sums_.size() != sq_sums_.size()) {
    throw DimensionError("calibration merge: feature counts differ");
  }
  for (std::size_t j = 0; j < sq_sums_.size(); ++j) sq_sums_[j] += other.sq_sums_[j];
  samples_ += other.samples_;
}

std::vector<double> CalibrationStats::norms() const {
  std::vector<double> out(sq_sums_.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = std::sqrt(sq_sums_[j]);
  return out;
}

CalibrationStats CalibrationStats::from_sums(std::vector<double> sq_sums, std::size_t samples) {
  CalibrationStats s;
  s.sq_sums_ = std::move(sq_sums);
  s.samples_ = samples;
  return s;
}

std::vector<float> score(const ad::Tensor& weights, Method method,
                         const std::optional<CalibrationStats>& calib) {
  if (weights.rank() != 2) {
    throw DimensionError("score: weights must be a matrix, got " + ad::to_string(weights.shape()));
  }
  const std::size_t cols = weights.dim(1);
  const auto w = weights.data();
  std::vector<float> out(w.size());
  if (method == Method::kMagnitude) {
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = std::fabs(w[i]);
    return out;
  }
  if (!calib) throw ConfigError("wanda scoring requires calibration statistics");
  if (calib->features() != cols) {
    throw DimensionError("wanda: calibration has " + std::to_string(calib->features()) +
                         " features but weights have " + std::to_string(cols) + " columns");
  }
  const auto norms = calib->norms();
  for (std::size_t i = 0; i < w.size(); ++i) {
    out[i] = static_cast<float>(std::fabs(static_cast<double>(w[i])) * norms[i % cols]);
  }
  return out;
}

mask::HybridMask prune_2_4(std::span<const float> scores, std::size_t d1, std::size_t d2,
                           std::size_t b1, std::size_t b2) {
  mask::HybridMask out(d1, d2, b1, b2);
  if (scores.size() != d1 * d2) {
    throw DimensionError("prune_2_4: " + std::to_string(scores.size()) + " scores for a " +
                         std::to_string(d1) + "x" + std::to_string(d2) + " matrix");
  }
  for (std::size_t g = 0; g < out.groups(); ++g) {
    out.pattern_idx[g] = static_cast<std::uint8_t>(
        mask::best_pattern(std::span<const float, 4>(scores.data() + 4 * g, 4)));
  }
  return out;
}

std::vector<std::uint8_t> prune_unstructured(std::span<const float> scores, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity <= 1.0)) {
    throw ParameterError("prune_unstructured: sparsity must lie in [0, 1]");
  }
  const std::size_t n = scores.size();
  const auto zeros = static_cast<std::size_t>(std::floor(static_cast<double>(n) * sparsity));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<std::uint8_t> keep(n, 1);
  for (std::size_t i = 0; i < zeros; ++i) keep[order[i]] = 0;
  return keep;
}

}  // namespace patch::oneshot
