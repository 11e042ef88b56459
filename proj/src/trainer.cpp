#include "patch/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "patch/adam.hpp"
#include "patch/error.hpp"

namespace patch::train {
namespace {

using nlohmann::json;

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return std::mt19937_64(seq);
}

enum Stream : std::uint32_t { kData = 1, kGumbel = 2, kPrior = 3, kCalib = 4 };

std::string interp_name(mask::Interpolation i) {
  return i == mask::Interpolation::kLinear ? "linear" : "exponential";
}

mask::Interpolation parse_interp(const std::string& s) {
  if (s == "linear") return mask::Interpolation::kLinear;
  if (s == "exponential") return mask::Interpolation::kExponential;
  throw ConfigError("unknown interpolation '" + s + "' (expected linear or exponential)");
}

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

std::vector<float> hard_product(const lm::MaskedLayer& layer, const mask::HybridMask& m) {
  const auto w = layer.weight->value.data();
  std::vector<float> out = mask::expand(m);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= w[i];
  return out;
}

}  // namespace

Mode parse_mode(const std::string& s) {
  if (s == "joint") return Mode::kJoint;
  if (s == "tile_only") return Mode::kTileOnly;
  throw ConfigError("unknown mode '" + s + "' (expected joint or tile_only)");
}

Scope parse_scope(const std::string& s) {
  if (s == "global") return Scope::kGlobal;
  if (s == "per_layer") return Scope::kPerLayer;
  throw ConfigError("unknown sparsity_scope '" + s + "' (expected global or per_layer)");
}

Prior parse_prior(const std::string& s) {
  if (s == "random") return Prior::kRandom;
  if (s == "magnitude_unstructured" || s == "magnitude") return Prior::kMagnitude;
  if (s == "wanda_unstructured" || s == "wanda") return Prior::kWanda;
  throw ConfigError("unknown prior '" + s +
                    "' (expected random, magnitude_unstructured or wanda_unstructured)");
}

std::string mode_name(Mode m) { return m == Mode::kJoint ? "joint" : "tile_only"; }
std::string scope_name(Scope s) { return s == Scope::kGlobal ? "global" : "per_layer"; }

std::string prior_name(Prior p) {
  switch (p) {
    case Prior::kRandom: return "random";
    case Prior::kMagnitude: return "magnitude_unstructured";
    case Prior::kWanda: return "wanda_unstructured";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (!(rho >= 0.5 && rho <= 1.0)) {
    throw ConfigError("rho must lie in [0.5, 1.0] (sparse tiles are exactly 2:4), got " +
                      std::to_string(rho));
  }
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw ConfigError("lambda1 and lambda2 must be >= 0");
  if (tile_rows == 0 || tile_cols == 0 || tile_cols % mask::kGroupSize != 0) {
    throw ConfigError("tile must be positive with a column extent divisible by 4");
  }
  if (!(prior_strength > 0.0)) throw ConfigError("prior_strength must be positive");
  if (!(optimizer.learning_rate > 0.0)) throw ConfigError("optimizer.lr must be positive");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) ||
      !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (optimizer.batch_size == 0 || optimizer.seq_len < 2) {
    throw ConfigError("optimizer.batch_size must be positive and seq_len at least 2");
  }
  try {
    schedule.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
}

json TrainConfig::to_json() const {
  return json{
      {"rho", rho},
      {"lambda1", lambda1},
      {"lambda2", lambda2},
      {"tile", {tile_rows, tile_cols}},
      {"mode", mode_name(mode)},
      {"sparsity_scope", scope_name(scope)},
      {"schedule",
       {{"tau_start", schedule.tau_start},
        {"tau_end", schedule.tau_end},
        {"kappa_start", schedule.kappa_start},
        {"kappa_end", schedule.kappa_end},
        {"total_steps", schedule.total_steps},
        {"tau_interpolation", interp_name(schedule.tau_interp)},
        {"kappa_interpolation", interp_name(schedule.kappa_interp)}}},
      {"optimizer",
       {{"lr", optimizer.learning_rate},
        {"beta1", optimizer.beta1},
        {"beta2", optimizer.beta2},
        {"eps", optimizer.eps},
        {"batch_size", optimizer.batch_size},
        {"seq_len", optimizer.seq_len}}},
      {"seed", seed},
      {"prior", prior_name(prior)},
      {"prior_strength", prior_strength},
  };
}

TrainConfig TrainConfig::from_json(const json& j) {
  check_keys(j, "config", {"rho", "lambda1", "lambda2", "tile", "mode", "sparsity_scope",
                           "schedule", "optimizer", "seed", "prior", "prior_strength"});
  TrainConfig c;
  read(j, "rho", c.rho, "config");
  read(j, "lambda1", c.lambda1, "config");
  read(j, "lambda2", c.lambda2, "config");
  read(j, "seed", c.seed, "config");
  read(j, "prior_strength", c.prior_strength, "config");
  if (j.contains("tile")) {
    const auto& t = j["tile"];
    if (t.is_number_unsigned()) {
      c.tile_rows = c.tile_cols = t.get<std::size_t>();
    } else if (t.is_array() && t.size() == 2 && t[0].is_number_unsigned() &&
               t[1].is_number_unsigned()) {
      c.tile_rows = t[0].get<std::size_t>();
      c.tile_cols = t[1].get<std::size_t>();
    } else {
      throw ConfigError("config.tile must be [b1, b2] or a single positive integer");
    }
  }
  std::string s;
  if (j.contains("mode")) c.mode = parse_mode((read(j, "mode", s, "config"), s));
  if (j.contains("sparsity_scope")) {
    c.scope = parse_scope((read(j, "sparsity_scope", s, "config"), s));
  }
  if (j.contains("prior")) c.prior = parse_prior((read(j, "prior", s, "config"), s));
  if (j.contains("schedule")) {
    const auto& sj = j["schedule"];
    check_keys(sj, "schedule", {"tau_start", "tau_end", "kappa_start", "kappa_end", "total_steps",
                                "tau_interpolation", "kappa_interpolation"});
    read(sj, "tau_start", c.schedule.tau_start, "schedule");
    read(sj, "tau_end", c.schedule.tau_end, "schedule");
    read(sj, "kappa_start", c.schedule.kappa_start, "schedule");
    read(sj, "kappa_end", c.schedule.kappa_end, "schedule");
    read(sj, "total_steps", c.schedule.total_steps, "schedule");
    if (sj.contains("tau_interpolation")) {
      c.schedule.tau_interp = parse_interp((read(sj, "tau_interpolation", s, "schedule"), s));
    }
    if (sj.contains("kappa_interpolation")) {
      c.schedule.kappa_interp = parse_interp((read(sj, "kappa_interpolation", s, "schedule"), s));
    }
  }
  if (j.contains("optimizer")) {
    const auto& oj = j["optimizer"];
    check_keys(oj, "optimizer", {"lr", "beta1", "beta2", "eps", "batch_size", "seq_len"});
    read(oj, "lr", c.optimizer.learning_rate, "optimizer");
    read(oj, "beta1", c.optimizer.beta1, "optimizer");
    read(oj, "beta2", c.optimizer.beta2, "optimizer");
    read(oj, "eps", c.optimizer.eps, "optimizer");
    read(oj, "batch_size", c.optimizer.batch_size, "optimizer");
    read(oj, "seq_len", c.optimizer.seq_len, "optimizer");
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

lm::MaskSet sample_masks(const lm::MaskedLayerRegistry& registry, const TrainConfig& config,
                         long step, mask::Rng& rng, bool noise) {
  const double tau = config.schedule.tau(step);
  const double kappa = config.schedule.kappa(step);
  lm::MaskSet out;
  for (const auto& layer : registry.layers()) {
    const mask::SoftMask tile = mask::soft_mask_tile(layer.tile, tau, kappa, &rng, noise);
    mask::SoftMask m24;
    if (config.mode == Mode::kTileOnly) {
      if (layer.frozen_patterns.size() != layer.pattern.groups()) {
        throw ConfigError("tile-only mode: layer '" + layer.name + "' has no frozen 2:4 patterns");
      }
      mask::HybridMask fixed(layer.tile.d1, layer.tile.d2, layer.tile.b1, layer.tile.b2);
      fixed.pattern_idx = layer.frozen_patterns;
      m24 = mask::expand_soft(fixed);
    } else {
      m24 = mask::soft_mask_2_4(layer.pattern, tau, kappa, &rng, noise);
    }
    out.emplace(layer.name, mask::merge_masks(tile, m24));
  }
  return out;
}

LossTerms loss_terms(const lm::Model& model, const lm::Batch& batch,
                     const lm::MaskedLayerRegistry& registry, const lm::MaskSet& masks,
                     const TrainConfig& config) {
  const auto weights = lm::masked_weights(registry, masks);
  LossTerms t;
  t.lm = model.loss(batch, [&](const lm::NamedWeight& w) { return weights.at(w.name); });

  const auto rho = static_cast<float>(config.rho);
  std::vector<ad::Tensor> kept, per_layer_gap;
  double kept_total = 0.0;
  for (const auto& layer : registry.layers()) {
    const ad::Tensor s = ad::sum(masks.at(layer.name).values);
    kept_total += s.item();
    if (config.scope == Scope::kGlobal) {
      kept.push_back(s);
    } else {
      const float inv = 1.0f / static_cast<float>(layer.elements());
      per_layer_gap.push_back(ad::abs(ad::add_scalar(ad::scale(s, inv), -rho)));
    }
  }
  t.soft_density = kept_total / static_cast<double>(registry.total_elements());
  auto add_all = [](const std::vector<ad::Tensor>& xs) {
    ad::Tensor acc = xs.front();
    for (std::size_t i = 1; i < xs.size(); ++i) acc = ad::add(acc, xs[i]);
    return acc;
  };
  ad::Tensor gap;
  if (config.scope == Scope::kGlobal) {
    const float inv = 1.0f / static_cast<float>(registry.total_elements());
    gap = ad::abs(ad::add_scalar(ad::scale(add_all(kept), inv), -rho));
  } else {
    gap = ad::scale(add_all(per_layer_gap), 1.0f / static_cast<float>(per_layer_gap.size()));
  }
  t.sparsity = ad::scale(gap, static_cast<float>(config.lambda1));

  std::vector<ad::Tensor> norms;
  for (const auto& layer : registry.layers()) norms.push_back(ad::sq_norm(weights.at(layer.name)));
  const double total_sq = registry.total_sq_norm();
  t.weight_reg = ad::scale(add_all(norms), static_cast<float>(-config.lambda2 / total_sq));
  t.total = ad::add(ad::add(t.lm, t.sparsity), t.weight_reg);
  return t;
}

LossTerms total_loss(const lm::Model& model, const lm::Batch& batch,
                     const lm::MaskedLayerRegistry& registry, const TrainConfig& config, long step,
                     mask::Rng& rng) {
  if (step < 0 || step >= config.schedule.total_steps) {
    throw ParameterError("step " + std::to_string(step) + " outside [0, " +
                         std::to_string(config.schedule.total_steps) + ")");
  }
  return loss_terms(model, batch, registry, sample_masks(registry, config, step, rng), config);
}

void init_tile_priors(lm::MaskedLayerRegistry& registry, Prior prior, double strength, double rho,
                      std::uint64_t seed, const CalibrationMap* calib) {
  if (prior == Prior::kRandom) {
    auto rng = derived_rng(seed, kPrior);
    std::normal_distribution<double> dist(0.0, strength);
    for (auto& layer : registry.layers()) {
      std::vector<float> v(layer.tile.tiles());
      for (auto& x : v) x = static_cast<float>(dist(rng));
      layer.tile = mask::TileLogits(layer.tile.d1, layer.tile.d2, layer.tile.b1, layer.tile.b2,
                                    std::move(v));
    }
    return;
  }
  const auto method = prior == Prior::kWanda ? oneshot::Method::kWanda : oneshot::Method::kMagnitude;
  struct Ranked {
    std::size_t retained, layer, tile;
  };
  std::vector<Ranked> ranked;
  for (std::size_t li = 0; li < registry.size(); ++li) {
    const auto& layer = registry.layers()[li];
    std::optional<oneshot::CalibrationStats> stats;
    if (method == oneshot::Method::kWanda) {
      if (calib == nullptr || !calib->count(layer.name)) {
        throw ConfigError("wanda prior needs calibration statistics for '" + layer.name + "'");
      }
      stats = calib->at(layer.name);
    }
    const auto scores = oneshot::score(layer.weight->value, method, stats);
    const auto keep = oneshot::prune_unstructured(scores, 1.0 - rho);
    const auto& t = layer.tile;
    for (std::size_t tr = 0; tr < t.grid_rows(); ++tr) {
      for (std::size_t tc = 0; tc < t.grid_cols(); ++tc) {
        std::size_t count = 0;
        for (std::size_t r = tr * t.b1; r < (tr + 1) * t.b1; ++r)
          for (std::size_t c = tc * t.b2; c < (tc + 1) * t.b2; ++c) count += keep[r * t.d2 + c];
        ranked.push_back({count, li, tr * t.grid_cols() + tc});
      }
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.retained > b.retained; });
  const auto dense = static_cast<std::size_t>(
      std::llround(std::clamp(2.0 * rho - 1.0, 0.0, 1.0) * static_cast<double>(ranked.size())));
  std::vector<std::vector<float>> values(registry.size());
  for (std::size_t li = 0; li < registry.size(); ++li) {
    values[li].assign(registry.layers()[li].tile.tiles(), static_cast<float>(-strength));
  }
  for (std::size_t i = 0; i < dense; ++i) {
    values[ranked[i].layer][ranked[i].tile] = static_cast<float>(strength);
  }
  for (std::size_t li = 0; li < registry.size(); ++li) {
    auto& t = registry.layers()[li].tile;
    t = mask::TileLogits(t.d1, t.d2, t.b1, t.b2, std::move(values[li]));
  }
}

void init_pattern_priors(lm::MaskedLayerRegistry& registry, double strength) {
  for (auto& layer : registry.layers()) {
    const auto w = layer.weight->value.data();
    const std::size_t g = layer.pattern.groups();
    std::vector<float> v(mask::kNumPatterns * g, 0.0f);
    std::array<float, 4> mag{};
    for (std::size_t j = 0; j < g; ++j) {
      for (std::size_t k = 0; k < 4; ++k) mag[k] = std::fabs(w[j * 4 + k]);
      v[mask::best_pattern(mag) * g + j] = static_cast<float>(strength);
    }
    layer.pattern = mask::PatternLogits(layer.pattern.d1, layer.pattern.d2, std::move(v));
  }
}

PatternMap freeze_24_for_tile_mode(lm::MaskedLayerRegistry& registry, oneshot::Method source,
                                   const CalibrationMap* calib) {
  PatternMap out;
  for (auto& layer : registry.layers()) {
    std::optional<oneshot::CalibrationStats> stats;
    if (source == oneshot::Method::kWanda) {
      if (calib == nullptr || !calib->count(layer.name)) {
        throw ConfigError("wanda 2:4 source needs calibration statistics for '" + layer.name + "'");
      }
      stats = calib->at(layer.name);
    }
    const auto scores = oneshot::score(layer.weight->value, source, stats);
    const auto m = oneshot::prune_2_4(scores, layer.tile.d1, layer.tile.d2, layer.tile.b1,
                                      layer.tile.b2);
    layer.frozen_patterns = m.pattern_idx;
    out.emplace(layer.name, m.pattern_idx);
  }
  return out;
}

void set_frozen_patterns(lm::MaskedLayerRegistry& registry, const PatternMap& patterns) {
  for (auto& layer : registry.layers()) {
    auto it = patterns.find(layer.name);
    if (it == patterns.end()) throw ConfigError("pattern file lacks layer '" + layer.name + "'");
    if (it->second.size() != layer.pattern.groups()) {
      throw DimensionError("pattern file: layer '" + layer.name + "' has " +
                           std::to_string(it->second.size()) + " groups, expected " +
                           std::to_string(layer.pattern.groups()));
    }
    for (auto p : it->second) {
      if (p >= mask::kNumPatterns) {
        throw IndexError("pattern file: index " + std::to_string(p) + " in '" + layer.name + "'");
      }
    }
    layer.frozen_patterns = it->second;
  }
}

json patterns_to_json(const PatternMap& patterns) {
  json j = json::object();
  for (const auto& [name, idx] : patterns) j[name] = idx;
  return j;
}

PatternMap patterns_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("pattern file must be a JSON object of index arrays");
  PatternMap out;
  try {
    for (const auto& [name, v] : j.items()) out.emplace(name, v.get<std::vector<std::uint8_t>>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pattern file: ") + e.what());
  }
  return out;
}

json TrainReport::to_json() const {
  json layers_j = json::array();
  for (const auto& l : layers) {
    layers_j.push_back({{"name", l.name},
                        {"block", l.block},
                        {"role", l.role},
                        {"elements", l.elements},
                        {"kept", l.kept},
                        {"density", l.density()},
                        {"tiles", l.tiles},
                        {"dense_tiles", l.dense_tiles}});
  }
  json steps_j = json::array();
  for (const auto& s : steps) {
    steps_j.push_back({{"step", s.step},
                       {"tau", s.tau},
                       {"kappa", s.kappa},
                       {"lm", s.lm},
                       {"sparsity", s.sparsity},
                       {"weight_reg", s.weight_reg},
                       {"total", s.total},
                       {"soft_density", s.soft_density}});
  }
  return json{{"config", config.to_json()},
              {"density", density},
              {"validation_loss", validation_loss},
              {"perplexity", std::exp(validation_loss)},
              {"wall_seconds", wall_seconds},
              {"layers", layers_j},
              {"steps", steps_j}};
}

std::map<std::string, mask::HybridMask> TrainReport::masks() const {
  std::map<std::string, mask::HybridMask> out;
  for (const auto& l : layers) out.emplace(l.name, l.mask);
  return out;
}

bool same_result(const TrainReport& a, const TrainReport& b) {
  return a.config.to_json() == b.config.to_json() && a.steps == b.steps && a.layers == b.layers &&
         a.density == b.density && a.validation_loss == b.validation_loss;
}

double hardened_density(const std::vector<LayerResult>& layers) {
  std::size_t kept = 0, total = 0;
  for (const auto& l : layers) {
    kept += l.kept;
    total += l.elements;
  }
  return static_cast<double>(kept) / static_cast<double>(total);
}

std::vector<LayerResult> layer_results(const lm::MaskedLayerRegistry& registry,
                                       const std::map<std::string, mask::HybridMask>& masks) {
  std::vector<LayerResult> out;
  for (const auto& layer : registry.layers()) {
    auto it = masks.find(layer.name);
    if (it == masks.end()) throw ConfigError("no hardened mask for layer '" + layer.name + "'");
    const auto& m = it->second;
    if (m.d1 != layer.weight->value.dim(0) || m.d2 != layer.weight->value.dim(1)) {
      throw DimensionError("mask for '" + layer.name + "' does not match the weight shape");
    }
    out.push_back({layer.name, layer.block, layer.role, layer.elements(), mask::kept_count(m),
                   m.tiles(), m.dense_tiles(), m});
  }
  return out;
}

double evaluate_hard(const lm::Model& model, const lm::Corpus& corpus,
                     const lm::MaskedLayerRegistry& registry,
                     const std::map<std::string, mask::HybridMask>& masks) {
  std::map<std::string, ad::Tensor> effective;
  for (const auto& layer : registry.layers()) {
    auto it = masks.find(layer.name);
    if (it == masks.end()) throw ConfigError("no hardened mask for layer '" + layer.name + "'");
    effective.emplace(layer.name, ad::Tensor::constant(layer.weight->value.shape(),
                                                       hard_product(layer, it->second)));
  }
  return lm::evaluate(model, corpus,
                      [&](const lm::NamedWeight& w) { return effective.at(w.name); });
}

TrainReport train(const lm::Model& model, const lm::Corpus& corpus, const TrainConfig& config,
                  const TrainHooks& hooks) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  lm::MaskedLayerRegistry registry(model, config.tile_rows, config.tile_cols);

  const bool needs_calib = config.prior == Prior::kWanda;
  CalibrationMap own_calib;
  const CalibrationMap* calib = hooks.calib;
  if (needs_calib && calib == nullptr) {
    own_calib = lm::calibrate(model, corpus, kCalibrationSequences, config.seed);
    calib = &own_calib;
  }

  init_tile_priors(registry, config.prior, config.prior_strength, config.rho, config.seed, calib);
  std::vector<ad::Tensor> params;
  for (auto& layer : registry.layers()) params.push_back(layer.tile.logits);
  if (config.mode == Mode::kTileOnly) {
    if (hooks.patterns != nullptr) {
      set_frozen_patterns(registry, *hooks.patterns);
    } else {
      freeze_24_for_tile_mode(registry,
                              config.prior == Prior::kWanda ? oneshot::Method::kWanda
                                                            : oneshot::Method::kMagnitude,
                              calib);
    }
  } else {
    init_pattern_priors(registry, config.prior_strength);
    for (auto& layer : registry.layers()) params.push_back(layer.pattern.logits);
  }

  Adam adam({config.optimizer.learning_rate, config.optimizer.beta1, config.optimizer.beta2,
             config.optimizer.eps, 0.0});
  for (auto& p : params) adam.add(p);

  auto data_rng = derived_rng(config.seed, kData);
  auto gumbel_rng = derived_rng(config.seed, kGumbel);
  const std::size_t seq_len = std::min(config.optimizer.seq_len, model.config().context_len);

  TrainReport report;
  report.config = config;
  report.steps.reserve(static_cast<std::size_t>(config.schedule.total_steps));
  for (long step = 0; step < config.schedule.total_steps; ++step) {
    const lm::Batch batch =
        lm::sample_batch(corpus.train, config.optimizer.batch_size, seq_len, data_rng);
    LossTerms t = total_loss(model, batch, registry, config, step, gumbel_rng);
    const double total = t.total.item();
    if (!std::isfinite(total)) throw DivergenceError(step);
    ad::Tape tape(t.total);
    tape.backward();
    adam.step();
    adam.zero_grad();
    StepRecord rec{step,
                   config.schedule.tau(step),
                   config.schedule.kappa(step),
                   t.lm.item(),
                   t.sparsity.item(),
                   t.weight_reg.item(),
                   total,
                   t.soft_density};
    if (hooks.on_step) hooks.on_step(rec);
    report.steps.push_back(rec);
  }

  std::map<std::string, mask::HybridMask> hard;
  for (const auto& layer : registry.layers()) {
    mask::HybridMask m = mask::harden(layer.tile, layer.pattern);
    if (config.mode == Mode::kTileOnly) m.pattern_idx = layer.frozen_patterns;
    hard.emplace(layer.name, std::move(m));
  }
  report.layers = layer_results(registry, hard);
  report.density = hardened_density(report.layers);
  report.validation_loss = evaluate_hard(model, corpus, registry, hard);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::vector<AllocationRow> allocation_report(const TrainReport& report) {
  std::vector<AllocationRow> rows;
  for (const auto& l : report.layers) {
    rows.push_back({l.block, l.role, l.density(),
                    static_cast<double>(l.dense_tiles) / static_cast<double>(l.tiles)});
  }
  return rows;
}

std::string allocation_csv(const std::vector<AllocationRow>& rows) {
  std::ostringstream out;
  out << "block,role,density,dense_tile_fraction\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.17g,%.17g\n", r.block, r.role.c_str(), r.density,
                  r.dense_tile_fraction);
    out << buf;
  }
  return out.str();
}

}  // namespace patch::train
