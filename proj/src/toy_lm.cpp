#include "patch/toy_lm.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <type_traits>
#include <utility>

#include "patch/adam.hpp"
#include "patch/error.hpp"

namespace patch::lm {
namespace {

constexpr float kMaskedScore = -1e9f;

ad::Tensor causal_mask(std::size_t t) {
  std::vector<float> m(t * t, 0.0f);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = kMaskedScore;
  return ad::Tensor::constant({t, t}, std::move(m));
}

std::vector<float> normal_values(std::size_t n, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<float> out(n);
  for (auto& v : out) v = static_cast<float>(dist(rng));
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2 || vocab_size > 256) throw ConfigError("vocab_size must lie in [2, 256]");
  if (context_len < 2) throw ConfigError("context_len must be at least 2");
  if (hidden_dim == 0 || mlp_dim == 0) throw ConfigError("hidden_dim and mlp_dim must be positive");
  if (num_blocks == 0) throw ConfigError("num_blocks must be positive");
}

void ModelConfig::check_tiles(std::size_t b1, std::size_t b2) const {
  for (std::size_t d : {hidden_dim, mlp_dim, vocab_size}) {
    if (b1 == 0 || b2 == 0 || d % b1 != 0 || d % b2 != 0) {
      throw LayoutError("model extent " + std::to_string(d) + " is not divisible by tile " +
                        std::to_string(b1) + "x" + std::to_string(b2));
    }
  }
}

Corpus Corpus::from_bytes(std::span<const std::uint8_t> bytes, std::size_t vocab_size) {
  if (vocab_size < 2 || vocab_size > 256) throw ConfigError("vocab_size must lie in [2, 256]");
  if (bytes.size() < 16) throw DataError("corpus too small: " + std::to_string(bytes.size()) + " bytes");
  Corpus c;
  c.vocab_size = vocab_size;
  const std::size_t split = bytes.size() - bytes.size() / 10;
  c.train.reserve(split);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const auto id = static_cast<std::int32_t>(bytes[i] % vocab_size);
    (i < split ? c.train : c.validation).push_back(id);
  }
  return c;
}

Corpus Corpus::from_file(const std::filesystem::path& path, std::size_t vocab_size) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open corpus " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_bytes(bytes, vocab_size);
}

Batch sample_batch(std::span<const std::int32_t> tokens, std::size_t sequences, std::size_t length,
                   std::mt19937_64& rng) {
  if (tokens.size() <= length + 1) throw DataError("token stream shorter than one window");
  Batch b;
  b.sequences = sequences;
  b.length = length;
  b.inputs.reserve(sequences * length);
  b.targets.reserve(sequences * length);
  std::uniform_int_distribution<std::size_t> start(0, tokens.size() - length - 1);
  for (std::size_t s = 0; s < sequences; ++s) {
    const std::size_t at = start(rng);
    b.inputs.insert(b.inputs.end(), tokens.begin() + at, tokens.begin() + at + length);
    b.targets.insert(b.targets.end(), tokens.begin() + at + 1, tokens.begin() + at + 1 + length);
  }
  return b;
}

std::vector<Batch> evaluation_batches(std::span<const std::int32_t> tokens, std::size_t length,
                                      std::size_t max_sequences, std::size_t per_batch) {
  if (tokens.size() <= length + 1) throw DataError("validation stream shorter than one window");
  const std::size_t windows = std::min(max_sequences, (tokens.size() - 1) / length);
  std::vector<Batch> out;
  for (std::size_t w = 0; w < windows; w += per_batch) {
    Batch b;
    b.length = length;
    b.sequences = std::min(per_batch, windows - w);
    for (std::size_t s = 0; s < b.sequences; ++s) {
      const std::size_t at = (w + s) * length;
      b.inputs.insert(b.inputs.end(), tokens.begin() + at, tokens.begin() + at + length);
      b.targets.insert(b.targets.end(), tokens.begin() + at + 1, tokens.begin() + at + 1 + length);
    }
    out.push_back(std::move(b));
  }
  return out;
}

Model::Model(ModelConfig config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const std::size_t v = config_.vocab_size, h = config_.hidden_dim, f = config_.mlp_dim;
  const double lin_h = 1.0 / std::sqrt(static_cast<double>(h));
  const double lin_f = 1.0 / std::sqrt(static_cast<double>(f));
  auto add = [&](std::string name, int block, std::string role, ad::Shape shape, double stddev) {
    auto values = normal_values(ad::numel(shape), stddev, rng);
    weights_.push_back({std::move(name), block, std::move(role),
                        ad::Tensor::constant(std::move(shape), std::move(values))});
  };
  add("tok_emb", -1, "", {v, h}, 1.0);
  add("pos_emb", -1, "", {config_.context_len, h}, 0.5);
  for (std::size_t b = 0; b < config_.num_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    const int bi = static_cast<int>(b);
    add(p + "attn.q", bi, "q", {h, h}, lin_h);
    add(p + "attn.k", bi, "k", {h, h}, lin_h);
    add(p + "attn.v", bi, "v", {h, h}, lin_h);
    add(p + "attn.o", bi, "o", {h, h}, lin_h);
    add(p + "mlp.up", bi, "up", {f, h}, lin_h);
    add(p + "mlp.gate", bi, "gate", {f, h}, lin_h);
    add(p + "mlp.down", bi, "down", {h, f}, lin_f);
  }
  add("head", -1, "head", {v, h}, lin_h);
}

const NamedWeight& Model::weight(const std::string& name) const {
  for (const auto& w : weights_)
    if (w.name == name) return w;
  throw ConfigError("model has no weight named '" + name + "'");
}

NamedWeight& Model::weight(const std::string& name) {
  return const_cast<NamedWeight&>(std::as_const(*this).weight(name));
}

std::vector<const NamedWeight*> Model::maskable() const {
  std::vector<const NamedWeight*> out;
  for (const auto& w : weights_)
    if (!w.role.empty()) out.push_back(&w);
  return out;
}

void Model::set_weight(const std::string& name, std::vector<float> values) {
  NamedWeight& w = weight(name);
  w.value = ad::Tensor::constant(w.value.shape(), std::move(values));
}

void Model::freeze() {
  for (auto& w : weights_) {
    auto data = w.value.data();
    w.value = ad::Tensor::constant(w.value.shape(), std::vector<float>(data.begin(), data.end()));
  }
}

void Model::make_trainable() {
  for (auto& w : weights_) {
    auto data = w.value.data();
    w.value = ad::Tensor::parameter(w.value.shape(), std::vector<float>(data.begin(), data.end()));
  }
}

ad::Tensor Model::loss(const Batch& batch, const WeightFn& effective, const CaptureFn& capture) const {
  const std::size_t t = batch.length, n = batch.sequences * batch.length;
  if (t > config_.context_len || t == 0) {
    throw DataError("sequence length " + std::to_string(t) + " outside (0, " +
                    std::to_string(config_.context_len) + "]");
  }
  if (batch.inputs.size() != n || batch.targets.size() != n) {
    throw DataError("batch arrays do not match sequences x length");
  }
  std::vector<std::int32_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<std::int32_t>(i % t);

  auto use = [&](const NamedWeight& w) { return effective ? effective(w) : w.value; };
  auto linear = [&](const ad::Tensor& in, const std::string& name) {
    const NamedWeight& w = weight(name);
    if (capture) capture(w, in);
    return ad::matmul(in, ad::transpose(use(w)));
  };

  const ad::Tensor causal = causal_mask(t);
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(config_.hidden_dim));
  ad::Tensor x = ad::add(ad::embedding(weight("tok_emb").value, batch.inputs),
                         ad::embedding(weight("pos_emb").value, positions));
  for (std::size_t b = 0; b < config_.num_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    const ad::Tensor a = ad::rms_norm(x);
    const ad::Tensor q = linear(a, p + "attn.q");
    const ad::Tensor k = linear(a, p + "attn.k");
    const ad::Tensor v = linear(a, p + "attn.v");
    std::vector<ad::Tensor> heads;
    heads.reserve(batch.sequences);
    for (std::size_t s = 0; s < batch.sequences; ++s) {
      const ad::Tensor qs = ad::slice_rows(q, s * t, t);
      const ad::Tensor ks = ad::slice_rows(k, s * t, t);
      const ad::Tensor vs = ad::slice_rows(v, s * t, t);
      const ad::Tensor scores = ad::scale(ad::matmul(qs, ad::transpose(ks)), att_scale);
      heads.push_back(ad::matmul(ad::softmax(ad::add(scores, causal), 1), vs));
    }
    x = ad::add(x, linear(ad::concat_rows(heads), p + "attn.o"));
    const ad::Tensor m = ad::rms_norm(x);
    const ad::Tensor up = linear(m, p + "mlp.up");
    const ad::Tensor gate = linear(m, p + "mlp.gate");
    x = ad::add(x, linear(ad::mul(ad::silu(gate), up), p + "mlp.down"));
  }
  const ad::Tensor logits = linear(ad::rms_norm(x), "head");
  return ad::cross_entropy(logits, batch.targets);
}

Model pretrain(const Corpus& corpus, const ModelConfig& config, const PretrainOptions& options,
               const std::function<void(long, float)>& on_step) {
  const std::size_t total = corpus.train.size() + corpus.validation.size();
  if (total < kMinCorpusBytes) {
    throw DataError("corpus has " + std::to_string(total) + " characters; pretraining needs at least " +
                    std::to_string(kMinCorpusBytes));
  }
  if (corpus.vocab_size != config.vocab_size) {
    throw ConfigError("corpus vocabulary " + std::to_string(corpus.vocab_size) +
                      " differs from model vocab_size " + std::to_string(config.vocab_size));
  }
  Model model(config);
  model.make_trainable();
  Adam adam({options.learning_rate, 0.9, 0.99, 1e-8, options.weight_decay});
  for (auto& w : model.weights()) adam.add(w.value);
  std::mt19937_64 data_rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  const double base_lr = options.learning_rate;
  for (long step = 0; step < options.steps; ++step) {
    // Linear warm-up then cosine decay to a tenth of the base rate.
    const long warm = std::min<long>(50, std::max<long>(1, options.steps / 10));
    double lr = base_lr;
    if (step < warm) {
      lr = base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
    } else {
      const double frac = static_cast<double>(step - warm) / std::max<long>(1, options.steps - warm);
      lr = base_lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
    }
    Batch batch = sample_batch(corpus.train, options.batch_size, config.context_len, data_rng);
    ad::Tensor loss = model.loss(batch);
    if (!std::isfinite(loss.item())) throw DivergenceError(step);
    ad::Tape tape(loss);
    tape.backward();
    adam.set_learning_rate(lr);
    adam.step();
    adam.zero_grad();
    if (on_step) on_step(step, loss.item());
  }
  model.freeze();
  model.dense_validation_loss = evaluate(model, corpus);
  return model;
}

double evaluate(const Model& model, const Corpus& corpus, const Model::WeightFn& effective,
                std::size_t max_sequences) {
  const auto batches = evaluation_batches(corpus.validation, model.config().context_len,
                                          max_sequences, 16);
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& b : batches) {
    const ad::Tensor loss = model.loss(b, effective);
    total += static_cast<double>(loss.item()) * static_cast<double>(b.inputs.size());
    tokens += b.inputs.size();
  }
  return total / static_cast<double>(tokens);
}

MaskedLayerRegistry::MaskedLayerRegistry(const Model& model, std::size_t b1, std::size_t b2)
    : b1_(b1), b2_(b2) {
  model.config().check_tiles(b1, b2);
  for (const NamedWeight* w : model.maskable()) {
    const std::size_t d1 = w->value.dim(0), d2 = w->value.dim(1);
    mask::check_geometry(d1, d2, b1, b2);
    MaskedLayer layer;
    layer.name = w->name;
    layer.block = w->block;
    layer.role = w->role;
    layer.weight = w;
    layer.tile = mask::TileLogits::zeros(d1, d2, b1, b2);
    layer.pattern = mask::PatternLogits::zeros(d1, d2);
    layers_.push_back(std::move(layer));
  }
}

const MaskedLayer& MaskedLayerRegistry::layer(const std::string& name) const {
  for (const auto& l : layers_)
    if (l.name == name) return l;
  throw ConfigError("no masked layer named '" + name + "'");
}

MaskedLayer& MaskedLayerRegistry::layer(const std::string& name) {
  return const_cast<MaskedLayer&>(std::as_const(*this).layer(name));
}

std::size_t MaskedLayerRegistry::total_elements() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.elements();
  return n;
}

double MaskedLayerRegistry::total_sq_norm() const {
  double s = 0.0;
  for (const auto& l : layers_)
    for (float v : l.weight->value.data()) s += static_cast<double>(v) * v;
  return s;
}

std::map<std::string, ad::Tensor> masked_weights(const MaskedLayerRegistry& registry,
                                                 const MaskSet& masks) {
  std::map<std::string, ad::Tensor> out;
  for (const auto& l : registry.layers()) {
    auto it = masks.find(l.name);
    if (it == masks.end()) throw ConfigError("no mask supplied for layer '" + l.name + "'");
    out.emplace(l.name, ad::mul(it->second.values, l.weight->value));
  }
  return out;
}

ad::Tensor forward_masked(const Model& model, const Batch& batch,
                          const MaskedLayerRegistry& registry, const MaskSet& masks) {
  const auto weights = masked_weights(registry, masks);
  return model.loss(batch, [&](const NamedWeight& w) { return weights.at(w.name); });
}

std::map<std::string, oneshot::CalibrationStats> calibrate(const Model& model, const Corpus& corpus,
                                                           std::size_t sequences,
                                                           std::uint64_t seed) {
  std::map<std::string, oneshot::CalibrationStats> stats;
  std::mt19937_64 rng(seed);
  const std::size_t per_batch = 16;
  for (std::size_t done = 0; done < sequences; done += per_batch) {
    const Batch b = sample_batch(corpus.train, std::min(per_batch, sequences - done),
                                 model.config().context_len, rng);
    (void)model.loss(b, nullptr, [&](const NamedWeight& w, const ad::Tensor& in) {
      stats[w.name].accumulate(in.data(), in.dim(1));
    });
  }
  return stats;
}

}  // namespace patch::lm

namespace patch::lm {
namespace {

constexpr char kCheckpointMagic[8] = {'P', 'T', 'C', 'H', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    if constexpr (std::is_floating_point_v<T>) {
      out.push_back(std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value)[i]);
    } else {
      out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
    }
  }
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw FormatError("checkpoint truncated", pos_);
    std::array<std::uint8_t, sizeof(T)> raw{};
    std::copy_n(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), sizeof(T), raw.begin());
    pos_ += sizeof(T);
    if constexpr (std::is_floating_point_v<T>) {
      return std::bit_cast<T>(raw);
    } else {
      T v = 0;
      for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(raw[i]) << (8 * i);
      return v;
    }
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> checkpoint_bytes(const Model& model) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  const ModelConfig& c = model.config();
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.vocab_size));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.context_len));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.hidden_dim));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.mlp_dim));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.num_blocks));
  put<std::uint64_t>(out, c.seed);
  put<double>(out, model.dense_validation_loss);
  for (const auto& w : model.weights())
    for (float v : w.value.data()) put<float>(out, v);
  return out;
}

Model checkpoint_from_bytes(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin())) {
    throw FormatError("bad checkpoint magic", 0);
  }
  Reader r(bytes.subspan(sizeof(kCheckpointMagic)));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 8);
  }
  ModelConfig c;
  c.vocab_size = r.get<std::uint32_t>();
  c.context_len = r.get<std::uint32_t>();
  c.hidden_dim = r.get<std::uint32_t>();
  c.mlp_dim = r.get<std::uint32_t>();
  c.num_blocks = r.get<std::uint32_t>();
  c.seed = r.get<std::uint64_t>();
  const double dense_loss = r.get<double>();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what(), 12);
  }
  Model model(c);
  model.dense_validation_loss = dense_loss;
  for (auto& w : model.weights()) {
    std::vector<float> values(w.value.size());
    for (auto& v : values) v = r.get<float>();
    w.value = ad::Tensor::constant(w.value.shape(), std::move(values));
  }
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes after checkpoint weights", sizeof(kCheckpointMagic) + r.pos());
  }
  return model;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = checkpoint_bytes(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

}  // namespace patch::lm
