#pragma once

// Mask training: the three-term objective over a MaskedLayerRegistry, the
// annealed Gumbel-Softmax loop, prior initialization of tile logits, frozen
// 2:4 patterns for tile-only mode, and allocation reporting.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "patch/mask.hpp"
#include "patch/oneshot.hpp"
#include "patch/toy_lm.hpp"

namespace patch::train {

enum class Mode { kJoint, kTileOnly };
enum class Scope { kGlobal, kPerLayer };
enum class Prior { kRandom, kMagnitude, kWanda };

Mode parse_mode(const std::string& s);
Scope parse_scope(const std::string& s);
Prior parse_prior(const std::string& s);
std::string mode_name(Mode m);
std::string scope_name(Scope s);
std::string prior_name(Prior p);

struct OptimizerConfig {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct TrainConfig {
  double rho = 0.65;
  double lambda1 = 10.0;
  double lambda2 = 0.5;
  std::size_t tile_rows = 16;
  std::size_t tile_cols = 16;
  Mode mode = Mode::kJoint;
  Scope scope = Scope::kGlobal;
  mask::GumbelSchedule schedule;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  Prior prior = Prior::kMagnitude;
  double prior_strength = 0.5;

  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys and malformed values raise ConfigError; absent keys keep
  // their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
};

struct LossTerms {
  ad::Tensor total;
  ad::Tensor lm;
  ad::Tensor sparsity;    // lambda1-weighted, >= 0
  ad::Tensor weight_reg;  // lambda2-weighted, <= 0
  double soft_density = 0.0;
};

// Soft masks for one step: Gumbel-Softmax draws at the step's tau and kappa.
// Tile-only layers use their frozen 2:4 choice.
lm::MaskSet sample_masks(const lm::MaskedLayerRegistry& registry, const TrainConfig& config,
                         long step, mask::Rng& rng, bool noise = true);

// The objective for fixed masks.
LossTerms loss_terms(const lm::Model& model, const lm::Batch& batch,
                     const lm::MaskedLayerRegistry& registry, const lm::MaskSet& masks,
                     const TrainConfig& config);

// Samples masks for `step` and evaluates the objective. Throws
// ParameterError unless 0 <= step < total_steps.
LossTerms total_loss(const lm::Model& model, const lm::Batch& batch,
                     const lm::MaskedLayerRegistry& registry, const TrainConfig& config, long step,
                     mask::Rng& rng);

using CalibrationMap = std::map<std::string, oneshot::CalibrationStats>;

// Unstructured pruning of each layer at sparsity 1 - rho, then a model-wide
// ranking of tiles by retained count (ties: registry order, then tile index).
// The top llround((2 rho - 1) * tiles) get +strength, the rest -strength. The
// random prior draws N(0, strength^2) instead.
void init_tile_priors(lm::MaskedLayerRegistry& registry, Prior prior, double strength, double rho,
                      std::uint64_t seed, const CalibrationMap* calib = nullptr);

// 2:4 logits: +strength on each group's best magnitude pattern, 0 elsewhere.
void init_pattern_priors(lm::MaskedLayerRegistry& registry, double strength);

using PatternMap = std::map<std::string, std::vector<std::uint8_t>>;

// Best one-shot pattern per group, stored as each layer's frozen patterns.
PatternMap freeze_24_for_tile_mode(lm::MaskedLayerRegistry& registry, oneshot::Method source,
                                   const CalibrationMap* calib = nullptr);
// Installs externally supplied pattern indices.
void set_frozen_patterns(lm::MaskedLayerRegistry& registry, const PatternMap& patterns);

nlohmann::json patterns_to_json(const PatternMap& patterns);
PatternMap patterns_from_json(const nlohmann::json& j);

struct StepRecord {
  long step = 0;
  double tau = 0.0;
  double kappa = 0.0;
  double lm = 0.0;
  double sparsity = 0.0;
  double weight_reg = 0.0;
  double total = 0.0;
  double soft_density = 0.0;
  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct LayerResult {
  std::string name;
  int block = -1;
  std::string role;
  std::size_t elements = 0;
  std::size_t kept = 0;
  std::size_t tiles = 0;
  std::size_t dense_tiles = 0;
  mask::HybridMask mask;

  double density() const { return static_cast<double>(kept) / static_cast<double>(elements); }
  friend bool operator==(const LayerResult&, const LayerResult&) = default;
};

struct TrainReport {
  TrainConfig config;
  std::vector<StepRecord> steps;
  std::vector<LayerResult> layers;
  double density = 0.0;          // hardened, global
  double validation_loss = 0.0;  // held-out loss of the hardened model
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
  std::map<std::string, mask::HybridMask> masks() const;
};

// Equal in everything except wall time.
bool same_result(const TrainReport& a, const TrainReport& b);

// Hardened global density: total kept over total elements.
double hardened_density(const std::vector<LayerResult>& layers);

// Per-layer results for arbitrary hardened masks (one per registered layer).
std::vector<LayerResult> layer_results(const lm::MaskedLayerRegistry& registry,
                                       const std::map<std::string, mask::HybridMask>& masks);

// Held-out loss with every registered layer replaced by W * expand(mask).
double evaluate_hard(const lm::Model& model, const lm::Corpus& corpus,
                     const lm::MaskedLayerRegistry& registry,
                     const std::map<std::string, mask::HybridMask>& masks);

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  // Overrides the frozen 2:4 source in tile-only mode.
  const PatternMap* patterns = nullptr;
  // Reused calibration statistics; computed from the corpus when absent.
  const CalibrationMap* calib = nullptr;
};

// Full run: priors, total_steps of Adam on the logits, hardening and
// evaluation. Throws DivergenceError on a non-finite loss.
TrainReport train(const lm::Model& model, const lm::Corpus& corpus, const TrainConfig& config,
                  const TrainHooks& hooks = {});

struct AllocationRow {
  int block = -1;
  std::string role;
  double density = 0.0;
  double dense_tile_fraction = 0.0;
};

std::vector<AllocationRow> allocation_report(const TrainReport& report);
std::string allocation_csv(const std::vector<AllocationRow>& rows);

inline constexpr std::size_t kCalibrationSequences = 128;

}  // namespace patch::train
