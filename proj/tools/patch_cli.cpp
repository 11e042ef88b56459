// patch_cli: pretrain, prune, oneshot, eval, bench and synth subcommands.
// Every command prints one JSON document on stdout; diagnostics go to stderr.
//
// Exit codes: 0 success, 2 usage or configuration, 3 numerical failure,
// 4 format corruption.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "patch/error.hpp"
#include "patch/hybrid_format.hpp"
#include "patch/oneshot.hpp"
#include "patch/toy_lm.hpp"
#include "patch/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace patch;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitFormat = 4;

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct PretrainSpec {
  lm::ModelConfig model;
  lm::PretrainOptions options;
};

PretrainSpec parse_pretrain_config(const json& j) {
  if (!j.is_object()) throw ConfigError("pretrain config must be a JSON object");
  PretrainSpec s;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "vocab_size") s.model.vocab_size = v.get<std::size_t>();
      else if (key == "context_len") s.model.context_len = v.get<std::size_t>();
      else if (key == "hidden_dim") s.model.hidden_dim = v.get<std::size_t>();
      else if (key == "mlp_dim") s.model.mlp_dim = v.get<std::size_t>();
      else if (key == "num_blocks") s.model.num_blocks = v.get<std::size_t>();
      else if (key == "seed") s.model.seed = v.get<std::uint64_t>();
      else if (key == "steps") s.options.steps = v.get<long>();
      else if (key == "batch_size") s.options.batch_size = v.get<std::size_t>();
      else if (key == "learning_rate") s.options.learning_rate = v.get<double>();
      else if (key == "weight_decay") s.options.weight_decay = v.get<double>();
      else throw ConfigError("unknown key '" + key + "' in pretrain config");
    } catch (const json::exception& e) {
      throw ConfigError("pretrain config key '" + key + "': " + e.what());
    }
  }
  s.model.validate();
  if (s.options.steps < 1 || s.options.batch_size == 0 || !(s.options.learning_rate > 0.0)) {
    throw ConfigError("pretrain steps, batch_size and learning_rate must be positive");
  }
  return s;
}

std::string file_stem_for(const std::string& layer) { return layer + ".hsm"; }

void write_layer_matrices(const lm::MaskedLayerRegistry& registry,
                          const std::map<std::string, mask::HybridMask>& masks, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& layer : registry.layers()) {
    const auto& w = layer.weight->value;
    const auto a = hsm::compress(w.data(), w.dim(0), w.dim(1), masks.at(layer.name));
    const fs::path p = dir / file_stem_for(layer.name);
    hsm::save(a, p);
    hsm::write_meta_json(a, 1, fs::path(p.string() + ".meta.json"));
  }
}

// Effective weights for every registered layer, read from DIR/<layer>.hsm.
std::map<std::string, ad::Tensor> load_layer_matrices(const lm::MaskedLayerRegistry& registry,
                                                      const fs::path& dir, double* density) {
  std::map<std::string, ad::Tensor> out;
  std::size_t kept = 0, total = 0;
  for (const auto& layer : registry.layers()) {
    const fs::path p = dir / file_stem_for(layer.name);
    if (!fs::exists(p)) throw ConfigError("mask directory " + dir.string() + " lacks " + p.filename().string());
    hsm::HybridSparseMatrix a;
    try {
      a = hsm::load(p);
    } catch (const FormatError& e) {
      throw FormatError(p.string() + ": " + e.what(), e.offset());
    }
    const auto& shape = layer.weight->value.shape();
    if (a.d1() != shape[0] || a.d2() != shape[1]) {
      throw LayoutError(p.string() + " holds a " + std::to_string(a.d1()) + "x" +
                        std::to_string(a.d2()) + " matrix but layer '" + layer.name + "' is " +
                        ad::to_string(shape));
    }
    kept += a.stored_weights();
    total += a.d1() * a.d2();
    out.emplace(layer.name, ad::Tensor::constant(shape, hsm::decompress(a)));
  }
  if (density) *density = static_cast<double>(kept) / static_cast<double>(total);
  return out;
}

bool has_hsm(const fs::path& dir) {
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".hsm") return true;
  return false;
}

int run_pretrain(const std::string& corpus_path, const std::string& config_path,
                 const std::string& out, std::optional<std::uint64_t> seed) {
  PretrainSpec spec = config_path.empty() ? PretrainSpec{} : parse_pretrain_config(read_json(config_path));
  if (seed) spec.model.seed = *seed;
  const auto corpus = lm::Corpus::from_file(corpus_path, spec.model.vocab_size);
  const lm::Model model = lm::pretrain(corpus, spec.model, spec.options);
  const auto bytes = lm::checkpoint_bytes(model);
  {
    std::ofstream f(out, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + out);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  std::cout << json{{"command", "pretrain"},
                    {"checkpoint", out},
                    {"seed", spec.model.seed},
                    {"dense_validation_loss", model.dense_validation_loss},
                    {"bytes", bytes.size()},
                    {"checksum_fnv1a64", hex64(fnv1a(bytes))}}
                   .dump(2)
            << "\n";
  return 0;
}

int run_prune(const std::string& checkpoint, const std::string& config_path,
              const std::string& corpus_path, const std::string& out,
              const std::string& patterns_path, std::optional<std::uint64_t> seed) {
  train::TrainConfig config = train::TrainConfig::load(config_path);
  if (seed) config.seed = *seed;
  const lm::Model model = lm::load_checkpoint(checkpoint);
  const auto corpus = lm::Corpus::from_file(corpus_path, model.config().vocab_size);
  std::optional<train::PatternMap> patterns;
  if (!patterns_path.empty()) patterns = train::patterns_from_json(read_json(patterns_path));
  train::TrainHooks hooks;
  if (patterns) hooks.patterns = &*patterns;

  const train::TrainReport report = train::train(model, corpus, config, hooks);
  const fs::path dir(out);
  fs::create_directories(dir);
  write_text(dir / "report.json", report.to_json().dump(2) + "\n");
  write_text(dir / "allocation.csv", train::allocation_csv(train::allocation_report(report)));
  train::PatternMap chosen;
  for (const auto& l : report.layers) chosen.emplace(l.name, l.mask.pattern_idx);
  write_text(dir / "patterns.json", train::patterns_to_json(chosen).dump() + "\n");
  lm::MaskedLayerRegistry registry(model, config.tile_rows, config.tile_cols);
  write_layer_matrices(registry, report.masks(), dir / "masks");

  std::cout << json{{"command", "prune"},
                    {"out", out},
                    {"rho", config.rho},
                    {"mode", train::mode_name(config.mode)},
                    {"density", report.density},
                    {"validation_loss", report.validation_loss},
                    {"perplexity", std::exp(report.validation_loss)},
                    {"dense_validation_loss", model.dense_validation_loss},
                    {"wall_seconds", report.wall_seconds}}
                   .dump(2)
            << "\n";
  return 0;
}

int run_oneshot(const std::string& checkpoint, const std::string& corpus_path,
                const std::string& method_name, std::size_t tile, const std::string& out,
                std::optional<std::uint64_t> seed) {
  const lm::Model model = lm::load_checkpoint(checkpoint);
  const auto corpus = lm::Corpus::from_file(corpus_path, model.config().vocab_size);
  const auto method = oneshot::parse_method(method_name);
  lm::MaskedLayerRegistry registry(model, tile, tile);
  std::map<std::string, oneshot::CalibrationStats> calib;
  if (method == oneshot::Method::kWanda) {
    calib = lm::calibrate(model, corpus, train::kCalibrationSequences, seed.value_or(0));
  }
  std::map<std::string, mask::HybridMask> masks;
  for (const auto& layer : registry.layers()) {
    std::optional<oneshot::CalibrationStats> stats;
    if (method == oneshot::Method::kWanda) stats = calib.at(layer.name);
    const auto scores = oneshot::score(layer.weight->value, method, stats);
    masks.emplace(layer.name, oneshot::prune_2_4(scores, layer.tile.d1, layer.tile.d2, tile, tile));
  }
  const double loss = train::evaluate_hard(model, corpus, registry, masks);
  write_layer_matrices(registry, masks, fs::path(out));
  std::cout << json{{"command", "oneshot"},
                    {"method", oneshot::method_name(method)},
                    {"out", out},
                    {"density", 0.5},
                    {"validation_loss", loss},
                    {"perplexity", std::exp(loss)}}
                   .dump(2)
            << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& masks_dir,
             const std::string& corpus_path) {
  const lm::Model model = lm::load_checkpoint(checkpoint);
  const auto corpus = lm::Corpus::from_file(corpus_path, model.config().vocab_size);
  const fs::path root(masks_dir);
  if (!fs::is_directory(root)) throw IoError("mask directory " + masks_dir + " does not exist");
  std::vector<fs::path> configs;
  if (has_hsm(root)) {
    configs.push_back(root);
  } else {
    for (const auto& e : fs::directory_iterator(root)) {
      if (!e.is_directory()) continue;
      if (has_hsm(e.path())) configs.push_back(e.path());
      else if (fs::is_directory(e.path() / "masks") && has_hsm(e.path() / "masks")) {
        configs.push_back(e.path() / "masks");
      }
    }
    std::sort(configs.begin(), configs.end());
  }
  if (configs.empty()) throw ConfigError("no .hsm files found under " + masks_dir);

  // Any tile size works for the registry here: only names and weights are used.
  lm::MaskedLayerRegistry registry(model, 4, 4);
  const double dense = lm::evaluate(model, corpus);
  json rows = json::array();
  for (const auto& dir : configs) {
    double density = 0.0;
    const auto weights = load_layer_matrices(registry, dir, &density);
    const double loss =
        lm::evaluate(model, corpus, [&](const lm::NamedWeight& w) { return weights.at(w.name); });
    rows.push_back({{"config", dir.string()},
                    {"density", density},
                    {"loss", loss},
                    {"perplexity", std::exp(loss)}});
  }
  std::cout << json{{"command", "eval"},
                    {"dense", {{"loss", dense}, {"perplexity", std::exp(dense)}}},
                    {"configs", rows}}
                   .dump(2)
            << "\n";
  return 0;
}

int run_bench(const std::string& matrix, std::size_t batch, std::size_t threads, std::size_t reps) {
  const auto a = hsm::load(matrix);
  const auto report = hsm::autotune(a, batch, std::max<std::size_t>(1, threads), reps);
  json timings = json::array();
  for (const auto& t : report.timings) {
    timings.push_back({{"plan", t.plan.describe()}, {"median_seconds", t.median}, {"seconds", t.seconds}});
  }
  const auto acc = hsm::accounting(a, batch);
  std::cout << json{{"command", "bench"},
                    {"matrix", matrix},
                    {"isa", kernels::isa_name(kernels::active_isa())},
                    {"batch", batch},
                    {"threads", threads},
                    {"timings", timings},
                    {"chosen", report.chosen},
                    {"chosen_plan", report.plan().describe()},
                    {"accounting",
                     {{"bytes", acc.bytes},
                      {"dense_bytes", acc.dense_bytes},
                      {"bytes_ratio", acc.bytes_ratio},
                      {"flops", acc.flops},
                      {"dense_flops", acc.dense_flops},
                      {"flops_ratio", acc.flops_ratio},
                      {"density", acc.density}}}}
                   .dump(2)
            << "\n";
  return 0;
}

// Random matrix with a random hybrid mask of the requested density (rounded
// to whole tiles), for benchmarking.
int run_synth(std::size_t rows, std::size_t cols, std::size_t tile, double density,
              const std::string& out, std::uint64_t seed) {
  if (!(density >= 0.5 && density <= 1.0)) {
    throw ConfigError("density must lie in [0.5, 1.0], got " + std::to_string(density));
  }
  mask::HybridMask m(rows, cols, tile, tile);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(m.tiles());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto dense = static_cast<std::size_t>(std::llround((2.0 * density - 1.0) * m.tiles()));
  for (std::size_t i = 0; i < dense; ++i) m.tile_dense[order[i]] = 1;
  std::uniform_int_distribution<int> pat(0, mask::kNumPatterns - 1);
  for (auto& p : m.pattern_idx) p = static_cast<std::uint8_t>(pat(rng));
  std::normal_distribution<float> nd(0.0f, 1.0f);
  std::vector<float> w(rows * cols);
  for (auto& v : w) v = nd(rng);
  const auto a = hsm::compress(w, rows, cols, m);
  hsm::save(a, out);
  hsm::write_meta_json(a, 1, out + ".meta.json");
  std::cout << json{{"command", "synth"}, {"out", out}, {"density", a.density()}}.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid tile sparsity toolkit"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Seed for every random choice");

  std::string corpus, config, out, checkpoint, masks, matrix, patterns, method = "magnitude";
  std::size_t batch = 16, threads = 1, reps = 5, tile = 16, rows = 1024, cols = 1024;
  double density = 0.55;

  auto* pre = app.add_subcommand("pretrain", "Train the dense toy LM and write a checkpoint");
  pre->add_option("--corpus", corpus, "Training text")->required();
  pre->add_option("--config", config, "Model and pretraining JSON");
  pre->add_option("--out", out, "Checkpoint path")->required();
  pre->add_option("--seed", seed, "Model seed");

  auto* prune = app.add_subcommand("prune", "Learn hybrid tile masks");
  prune->add_option("--checkpoint", checkpoint)->required();
  prune->add_option("--config", config, "Mask-training JSON")->required();
  prune->add_option("--corpus", corpus)->required();
  prune->add_option("--out", out, "Output directory")->required();
  prune->add_option("--patterns", patterns, "Frozen 2:4 pattern indices for tile_only mode");
  prune->add_option("--seed", seed);

  auto* one = app.add_subcommand("oneshot", "Magnitude or Wanda 2:4 pruning");
  one->add_option("--checkpoint", checkpoint)->required();
  one->add_option("--corpus", corpus)->required();
  one->add_option("--method", method)->check(CLI::IsMember({"magnitude", "wanda"}));
  one->add_option("--tile", tile, "Square storage tile size");
  one->add_option("--out", out, "Output directory")->required();
  one->add_option("--seed", seed);

  auto* ev = app.add_subcommand("eval", "Held-out loss for compressed mask directories");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--masks", masks, "Directory of .hsm files or of such directories")->required();
  ev->add_option("--corpus", corpus)->required();
  ev->add_option("--seed", seed);

  auto* bench = app.add_subcommand("bench", "Autotune and time spmm on a .hsm matrix");
  bench->add_option("--matrix", matrix)->required();
  bench->add_option("--batch", batch)->check(CLI::PositiveNumber);
  bench->add_option("--threads", threads)->check(CLI::PositiveNumber);
  bench->add_option("--reps", reps)->check(CLI::Range(5, 1000));
  bench->add_option("--seed", seed);

  auto* synth = app.add_subcommand("synth", "Write a random hybrid matrix");
  synth->add_option("--rows", rows);
  synth->add_option("--cols", cols);
  synth->add_option("--tile", tile);
  synth->add_option("--density", density);
  synth->add_option("--out", out)->required();
  synth->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*pre) return run_pretrain(corpus, config, out, seed);
    if (*prune) return run_prune(checkpoint, config, corpus, out, patterns, seed);
    if (*one) return run_oneshot(checkpoint, corpus, method, tile, out, seed);
    if (*ev) return run_eval(checkpoint, masks, corpus);
    if (*bench) return run_bench(matrix, batch, threads, reps);
    if (*synth) return run_synth(rows, cols, tile, density, out, seed.value_or(0));
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const DivergenceError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
