#pragma once

// Byte-level toy language model: a small pre-norm transformer with single-head
// causal attention, a gated MLP and an untied output projection. Every linear
// weight (q, k, v, o, up, gate, down and the output head) is a maskable layer.
// Linear layers have no biases, so zeroing all of them yields uniform logits.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "patch/mask.hpp"
#include "patch/oneshot.hpp"
#include "patch/tensor.hpp"

namespace patch::lm {

struct ModelConfig {
  std::size_t vocab_size = 128;
  std::size_t context_len = 64;
  std::size_t hidden_dim = 64;
  std::size_t mlp_dim = 128;
  std::size_t num_blocks = 2;
  std::uint64_t seed = 1234;

  void validate() const;
  // Throws LayoutError unless every maskable matrix splits into b1 x b2 tiles.
  void check_tiles(std::size_t b1, std::size_t b2) const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct PretrainOptions {
  long steps = 1500;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  double weight_decay = 0.0;
};

// Token stream: every byte maps to byte % vocab_size. The last tenth is held
// out for validation.
struct Corpus {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> validation;
  std::size_t vocab_size = 0;

  static Corpus from_bytes(std::span<const std::uint8_t> bytes, std::size_t vocab_size);
  static Corpus from_file(const std::filesystem::path& path, std::size_t vocab_size);
};

inline constexpr std::size_t kMinCorpusBytes = 100000;

struct Batch {
  std::vector<std::int32_t> inputs;   // sequences x length
  std::vector<std::int32_t> targets;  // inputs shifted by one
  std::size_t sequences = 0;
  std::size_t length = 0;
};

// Random windows drawn uniformly from `tokens`.
Batch sample_batch(std::span<const std::int32_t> tokens, std::size_t sequences, std::size_t length,
                   std::mt19937_64& rng);
// Up to `max_sequences` evenly spaced non-overlapping windows; deterministic.
std::vector<Batch> evaluation_batches(std::span<const std::int32_t> tokens, std::size_t length,
                                      std::size_t max_sequences, std::size_t per_batch);

struct NamedWeight {
  std::string name;
  int block = -1;    // -1 for the output head
  std::string role;  // q, k, v, o, up, gate, down, head; empty for embeddings
  ad::Tensor value;
};

class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedWeight>& weights() { return weights_; }
  const std::vector<NamedWeight>& weights() const { return weights_; }
  const NamedWeight& weight(const std::string& name) const;
  NamedWeight& weight(const std::string& name);
  // Maskable matrices in canonical order.
  std::vector<const NamedWeight*> maskable() const;

  // Replaces a weight's values (same shape) as a frozen constant.
  void set_weight(const std::string& name, std::vector<float> values);
  void freeze();
  void make_trainable();

  // Maps a maskable weight to the tensor actually used in the forward pass.
  using WeightFn = std::function<ad::Tensor(const NamedWeight&)>;
  // Observes the input rows of every maskable linear layer.
  using CaptureFn = std::function<void(const NamedWeight&, const ad::Tensor& input)>;

  ad::Tensor loss(const Batch& batch, const WeightFn& effective = nullptr,
                  const CaptureFn& capture = nullptr) const;

  double dense_validation_loss = 0.0;

 private:
  ModelConfig config_;
  std::vector<NamedWeight> weights_;
};

// Trains all weights with Adam from the config seed. Deterministic.
Model pretrain(const Corpus& corpus, const ModelConfig& config, const PretrainOptions& options,
               const std::function<void(long, float)>& on_step = nullptr);

// Mean held-out loss over deterministic validation windows.
double evaluate(const Model& model, const Corpus& corpus, const Model::WeightFn& effective = nullptr,
                std::size_t max_sequences = 64);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> checkpoint_bytes(const Model& model);
Model checkpoint_from_bytes(std::span<const std::uint8_t> bytes);

struct MaskedLayer {
  std::string name;
  int block = -1;
  std::string role;
  const NamedWeight* weight = nullptr;
  mask::TileLogits tile;
  mask::PatternLogits pattern;
  // Tile-only mode: fixed hard 2:4 choice per group.
  std::vector<std::uint8_t> frozen_patterns;

  std::size_t elements() const { return weight->value.size(); }
};

// Every maskable weight of a model exactly once, in canonical order.
class MaskedLayerRegistry {
 public:
  MaskedLayerRegistry(const Model& model, std::size_t b1, std::size_t b2);

  std::vector<MaskedLayer>& layers() { return layers_; }
  const std::vector<MaskedLayer>& layers() const { return layers_; }
  std::size_t size() const { return layers_.size(); }
  const MaskedLayer& layer(const std::string& name) const;
  MaskedLayer& layer(const std::string& name);

  // Sum of ||W_i||_0, taken as the element count of each frozen matrix.
  std::size_t total_elements() const;
  // Sum of ||W_i||_2^2.
  double total_sq_norm() const;
  std::size_t b1() const { return b1_; }
  std::size_t b2() const { return b2_; }

 private:
  std::vector<MaskedLayer> layers_;
  std::size_t b1_ = 0, b2_ = 0;
};

using MaskSet = std::map<std::string, mask::SoftMask>;

// M_i * W_i for every registered layer; throws ConfigError on a missing mask
// and DimensionError on a shape mismatch.
std::map<std::string, ad::Tensor> masked_weights(const MaskedLayerRegistry& registry,
                                                 const MaskSet& masks);

ad::Tensor forward_masked(const Model& model, const Batch& batch,
                          const MaskedLayerRegistry& registry, const MaskSet& masks);

// Per-layer input activation statistics over `sequences` calibration windows.
std::map<std::string, oneshot::CalibrationStats> calibrate(const Model& model, const Corpus& corpus,
                                                           std::size_t sequences,
                                                           std::uint64_t seed);

}  // namespace patch::lm
