// Acceptance harness: one PASS/FAIL line per criterion.
//
//   acceptance [--cache DIR] [--steps N] [--seeds K] [--only LIST]
//
// DIR keeps the pretrained toy LM between invocations and receives
// results.json. Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "../support/gradcheck.hpp"
#include "../support/reference_model.hpp"
#include "patch/hybrid_format.hpp"
#include "patch/kernels.hpp"
#include "patch/mask.hpp"
#include "patch/toy_lm.hpp"
#include "patch/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace patch;
namespace ref = patch::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Harness {
  fs::path cache;
  long steps = 400;
  int seeds = 5;
  lm::Corpus corpus;
  lm::Model model;
  bool have_model = false;
  std::map<std::string, train::TrainReport> runs;
  json results = json::object();

  const lm::Model& pretrained() {
    if (have_model) return model;
    corpus = lm::Corpus::from_file(PATCH_FIXTURE, lm::ModelConfig{}.vocab_size);
    const fs::path ckpt = cache / "pretrained.ckpt";
    if (fs::exists(ckpt)) {
      model = lm::load_checkpoint(ckpt);
      if (!(model.config() == lm::ModelConfig{})) model = lm::Model{};
    }
    if (model.weights().empty()) {
      const auto t0 = Clock::now();
      model = lm::pretrain(corpus, lm::ModelConfig{}, lm::PretrainOptions{});
      lm::save_checkpoint(model, ckpt);
      std::printf("# pretrained toy LM in %.1f s\n", seconds_since(t0));
    }
    model.freeze();
    std::printf("# dense held-out loss %.4f\n", model.dense_validation_loss);
    std::fflush(stdout);
    have_model = true;
    return model;
  }

  train::TrainConfig config(double rho, int seed) const {
    train::TrainConfig c;
    c.rho = rho;
    c.seed = static_cast<std::uint64_t>(seed);
    c.schedule.total_steps = steps;
    return c;
  }

  const train::TrainReport& run(const std::string& label, const train::TrainConfig& c) {
    const std::string key = label + "/" + c.to_json().dump();
    auto it = runs.find(key);
    if (it != runs.end()) return it->second;
    const auto& m = pretrained();
    const auto rep = train::train(m, corpus, c);
    std::printf("#   %-10s rho=%.2f seed=%llu loss=%.4f density=%.4f (%.1f s)\n", label.c_str(),
                c.rho, static_cast<unsigned long long>(c.seed), rep.validation_loss, rep.density,
                rep.wall_seconds);
    std::fflush(stdout);
    results["runs"].push_back({{"label", label},
                               {"rho", c.rho},
                               {"seed", c.seed},
                               {"validation_loss", rep.validation_loss},
                               {"density", rep.density}});
    return runs.emplace(key, rep).first->second;
  }

  // Mean held-out loss of `label` runs over all seeds.
  double mean_loss(const std::string& label, const std::function<void(train::TrainConfig&)>& edit,
                   double rho) {
    double s = 0.0;
    for (int seed = 1; seed <= seeds; ++seed) {
      auto c = config(rho, seed);
      edit(c);
      s += run(label, c).validation_loss;
    }
    return s / seeds;
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1. Finite-difference checks of every op and of the full objective.
Outcome gradient_suite(Harness& h) {
  double worst_fwd = 0.0, worst_grad = 0.0;
  std::string worst_op;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    for (auto& c : ref::make_op_cases(rng)) {
      const std::string name = c.name;
      const auto r = ref::check_op(std::move(c), rng);
      worst_fwd = std::max(worst_fwd, r.forward_rel);
      if (r.grad_rel > worst_grad) worst_grad = r.grad_rel, worst_op = name;
    }
  }
  const auto& model = h.pretrained();
  double worst_e2e = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    lm::MaskedLayerRegistry reg(model, 16, 16);
    std::normal_distribution<float> nd;
    for (auto& l : reg.layers()) {
      std::vector<float> t(l.tile.tiles()), p(l.pattern.logits.size());
      for (auto& x : t) x = nd(rng);
      for (auto& x : p) x = nd(rng);
      l.tile = mask::TileLogits(l.tile.d1, l.tile.d2, l.tile.b1, l.tile.b2, t);
      l.pattern = mask::PatternLogits(l.pattern.d1, l.pattern.d2, p);
    }
    auto c = h.config(0.65, static_cast<int>(seed));
    c.scope = seed % 2 ? train::Scope::kPerLayer : train::Scope::kGlobal;
    const long step = std::uniform_int_distribution<long>(0, c.schedule.total_steps / 2)(rng);
    const auto batch = lm::sample_batch(h.corpus.train, 1, 16, rng);
    const std::uint64_t noise_seed = rng();
    mask::Rng engine(noise_seed);
    ad::backward(train::total_loss(model, batch, reg, c, step, engine).total);

    std::mt19937_64 replay(noise_seed);
    const auto layers = ref::ref_layers(reg);
    const auto noise = ref::ref_noise(layers, false, replay);
    const double tau = c.schedule.tau(step), kappa = c.schedule.kappa(step);
    ref::Vec analytic, numeric;
    for (int i = 0; i < 10; ++i) {
      const std::size_t li = std::uniform_int_distribution<std::size_t>(0, layers.size() - 1)(rng);
      const bool tile = i % 2 == 0;
      const auto& src = tile ? layers[li].tile_logits : layers[li].pattern_logits;
      const std::size_t idx = std::uniform_int_distribution<std::size_t>(0, src.size() - 1)(rng);
      auto up = layers, dn = layers;
      (tile ? up[li].tile_logits : up[li].pattern_logits)[idx] += 1e-4;
      (tile ? dn[li].tile_logits : dn[li].pattern_logits)[idx] -= 1e-4;
      numeric.push_back((ref::ref_objective(model, batch, up, noise, tau, kappa, c).total -
                         ref::ref_objective(model, batch, dn, noise, tau, kappa, c).total) /
                        2e-4);
      const auto& l = reg.layers()[li];
      analytic.push_back((tile ? l.tile.logits.grad() : l.pattern.logits.grad())[idx]);
    }
    worst_e2e = std::max(worst_e2e, ref::rel_error(analytic, numeric));
  }
  return {worst_fwd < 1e-5 && worst_grad < 1e-4 && worst_e2e < 1e-3,
          fmt("ops: worst forward %.2e, worst grad %.2e (%s); objective: worst %.2e over 100 seeds",
              worst_fwd, worst_grad, worst_op.c_str(), worst_e2e)};
}

// 2. Hardened masks are valid hybrid masks.
Outcome mask_validity(Harness&) {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> nd(0.0f, 2.0f);
  std::size_t groups = 0, bad = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t b = 4u << (trial % 3);
    const std::size_t d1 = b * (1 + trial % 3), d2 = b * (1 + (trial / 3) % 3);
    std::vector<float> t((d1 / b) * (d2 / b)), p(6 * d1 * d2 / 4);
    for (auto& x : t) x = nd(rng);
    for (auto& x : p) x = nd(rng);
    const auto m = mask::harden(mask::TileLogits(d1, d2, b, b, t, false),
                                mask::PatternLogits(d1, d2, p, false));
    const auto e = mask::expand(m);
    for (std::size_t g = 0; g < m.groups(); ++g) {
      const float s = e[4 * g] + e[4 * g + 1] + e[4 * g + 2] + e[4 * g + 3];
      const bool dense = m.tile_dense[m.tile_of_group(g)];
      bool ok = dense ? s == 4.0f : s == 2.0f;
      for (std::size_t k = 0; k < 4; ++k) ok = ok && (e[4 * g + k] == 0.0f || e[4 * g + k] == 1.0f);
      ++groups;
      bad += !ok;
    }
  }
  return {bad == 0, fmt("%zu groups over 10^4 masks, %zu invalid", groups, bad)};
}

// 3. Gumbel-Softmax argmax frequencies follow softmax(kappa * p).
Outcome gumbel_distribution(Harness&) {
  std::mt19937_64 rng(3);
  double worst = 0.0;
  for (int v = 0; v < 20; ++v) {
    const std::size_t k = 2 + v % 5;
    std::normal_distribution<float> nd;
    std::vector<float> p(k);
    for (auto& x : p) x = nd(rng);
    const double kappa = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    const double tau = std::uniform_real_distribution<double>(0.1, 2.0)(rng);
    std::vector<double> expect(k);
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += expect[i] = std::exp(kappa * p[i]);
    for (auto& e : expect) e /= z;
    const auto logits = ad::Tensor::constant({k}, p);
    mask::Rng noise(100 + v);
    std::vector<std::size_t> counts(k, 0);
    const int n = 100000;
    for (int s = 0; s < n; ++s) {
      const auto sample = mask::gumbel_softmax(logits, tau, kappa, &noise, true);
      const auto y = sample.data();
      counts[static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin())]++;
    }
    for (std::size_t i = 0; i < k; ++i) worst = std::max(worst, std::fabs(counts[i] / double(n) - expect[i]));
  }
  return {worst <= 0.01, fmt("20 logit vectors x 10^5 draws, worst |freq - softmax| %.4f", worst)};
}

// 4. Hardened density hits rho.
Outcome targeting(Harness& h) {
  bool pass = true;
  std::string detail;
  for (double rho : {0.55, 0.65, 0.75}) {
    int hits = 0;
    double worst = 0.0;
    for (int seed = 1; seed <= h.seeds; ++seed) {
      const double d = h.run("joint", h.config(rho, seed)).density;
      hits += std::fabs(d - rho) <= 0.01;
      worst = std::max(worst, std::fabs(d - rho));
    }
    pass = pass && hits >= std::min(4, h.seeds);
    detail += fmt("rho %.2f: %d/%d within 0.01 (worst %.4f); ", rho, hits, h.seeds, worst);
  }
  return {pass, detail.substr(0, detail.size() - 2)};
}

// 5. Loss is monotone in density.
Outcome quality_ordering(Harness& h) {
  const auto none = [](train::TrainConfig&) {};
  std::vector<std::pair<std::string, double>> pts{
      {"2:4", h.mean_loss("joint", none, 0.5)},
      {"0.55", h.mean_loss("joint", none, 0.55)},
      {"0.65", h.mean_loss("joint", none, 0.65)},
      {"0.75", h.mean_loss("joint", none, 0.75)},
      {"dense", h.pretrained().dense_validation_loss}};
  int inversions = 0;
  double worst = 0.0;
  std::string detail;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    detail += fmt("%s %.4f%s", pts[i].first.c_str(), pts[i].second, i + 1 < pts.size() ? " >= " : "");
    if (i + 1 < pts.size() && pts[i + 1].second > pts[i].second) {
      ++inversions;
      worst = std::max(worst, (pts[i + 1].second - pts[i].second) / pts[i].second);
    }
  }
  h.results["quality_ordering"] = pts;
  return {inversions <= 1 && worst <= 0.005,
          detail + fmt(" (%d inversions, worst %.2f%%)", inversions, 100 * worst)};
}

Outcome joint_vs_tile(Harness& h) {
  const double joint = h.mean_loss("joint", [](train::TrainConfig&) {}, 0.65);
  const double tile = h.mean_loss("tile_only", [](train::TrainConfig& c) { c.mode = train::Mode::kTileOnly; }, 0.65);
  h.results["joint_vs_tile"] = {{"joint", joint}, {"tile_only", tile}};
  return {joint <= tile, fmt("joint %.4f vs tile-only %.4f", joint, tile)};
}

Outcome global_vs_layer(Harness& h) {
  const double global = h.mean_loss("joint", [](train::TrainConfig&) {}, 0.65);
  const double layer = h.mean_loss("per_layer", [](train::TrainConfig& c) { c.scope = train::Scope::kPerLayer; }, 0.65);
  h.results["global_vs_layer"] = {{"global", global}, {"per_layer", layer}};
  return {global <= layer, fmt("global %.4f vs per-layer %.4f", global, layer)};
}

Outcome prior_insensitivity(Harness& h) {
  const double mag = h.mean_loss("joint", [](train::TrainConfig&) {}, 0.65);
  const double rnd = h.mean_loss("random", [](train::TrainConfig& c) { c.prior = train::Prior::kRandom; }, 0.65);
  const double wan = h.mean_loss("wanda", [](train::TrainConfig& c) { c.prior = train::Prior::kWanda; }, 0.65);
  const double lo = std::min({mag, rnd, wan}), hi = std::max({mag, rnd, wan});
  h.results["priors"] = {{"magnitude", mag}, {"random", rnd}, {"wanda", wan}};
  return {(hi - lo) / lo <= 0.02, fmt("magnitude %.4f, random %.4f, wanda %.4f: gap %.2f%%", mag, rnd,
                                      wan, 100 * (hi - lo) / lo)};
}

// 9. Format round trips and spmm against a dense oracle.
Outcome format_correctness(Harness&) {
  std::mt19937_64 rng(9);
  std::normal_distribution<float> nd;
  std::uniform_int_distribution<int> pat(0, 5);
  auto random_mask = [&](std::size_t d1, std::size_t d2, std::size_t b1, std::size_t b2, double k) {
    mask::HybridMask m(d1, d2, b1, b2);
    std::bernoulli_distribution coin(k);
    for (auto& f : m.tile_dense) f = coin(rng);
    for (auto& p : m.pattern_idx) p = static_cast<std::uint8_t>(pat(rng));
    return m;
  };
  std::size_t bad_rt = 0;
  const std::array<std::size_t, 3> small{4, 8, 16};
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t b1 = small[trial % 3], b2 = small[(trial / 3) % 3];
    const std::size_t d1 = b1 * (1 + trial % 4), d2 = b2 * (1 + (trial / 4) % 3);
    std::vector<float> w(d1 * d2);
    for (auto& x : w) x = nd(rng);
    const auto m = random_mask(d1, d2, b1, b2, 0.5);
    const auto back = hsm::deserialize(hsm::serialize(hsm::compress(w, d1, d2, m)));
    const auto e = mask::expand(m);
    const auto dec = hsm::decompress(back);
    for (std::size_t i = 0; i < w.size(); ++i) bad_rt += dec[i] != w[i] * e[i];
  }
  double worst = 0.0;
  std::size_t points = 0;
  const std::array<std::size_t, 4> tiles{4, 8, 64, 128};
  for (std::size_t b1 : tiles)
    for (std::size_t b2 : tiles)
      for (double density : {0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
        const std::size_t d1 = std::max<std::size_t>(b1, 128), d2 = std::max<std::size_t>(b2, 128), n = 8;
        std::vector<float> w(d1 * d2), x(d2 * n);
        for (auto& v : w) v = nd(rng);
        for (auto& v : x) v = nd(rng);
        const auto a = hsm::compress(w, d1, d2, random_mask(d1, d2, b1, b2, 2 * density - 1));
        const auto dec = hsm::decompress(a);
        for (const auto& plan : hsm::candidate_plans(a)) {
          const auto y = hsm::spmm(a, x, n, plan);
          double num = 0.0, den = 0.0;
          for (std::size_t i = 0; i < d1; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              double s = 0.0;
              for (std::size_t k = 0; k < d2; ++k) s += double(dec[i * d2 + k]) * x[k * n + j];
              num += (y[i * n + j] - s) * (y[i * n + j] - s);
              den += s * s;
            }
          worst = std::max(worst, std::sqrt(num / den));
          ++points;
        }
      }
  return {bad_rt == 0 && worst < 1e-5,
          fmt("1000 round trips, %zu mismatched values; spmm worst rel %.2e over %zu grid points x plans",
              bad_rt, worst, points)};
}

// 10. Accounting equals the closed-form payload formula for every 4x4 bitmap.
Outcome accounting_formula(Harness&) {
  std::size_t bad = 0, configs = 0;
  for (std::size_t b : {std::size_t{4}, std::size_t{8}}) {
    const std::size_t d = 4 * b;
    std::vector<float> w(d * d);
    std::mt19937_64 rng(10);
    std::normal_distribution<float> nd;
    for (auto& x : w) x = nd(rng);
    for (std::uint32_t bits = 0; bits < (1u << 16); ++bits) {
      mask::HybridMask m(d, d, b, b);
      std::size_t dense = 0;
      for (std::size_t t = 0; t < 16; ++t) dense += m.tile_dense[t] = (bits >> t) & 1u;
      const auto acc = hsm::accounting(hsm::compress(w, d, d, m), 16);
      const double bytes = 8 + 16 + 2 + dense * 4.0 * b * b +
                           (16 - dense) * (2.0 * b * b + std::ceil(b * b / 8.0));
      const double density = (dense + 0.5 * (16 - dense)) / 16.0;
      const bool ok = acc.bytes_ratio == bytes / (4.0 * d * d) && acc.density == density &&
                      acc.flops_ratio == density && acc.flops == 2 * 16 * (dense * b * b + (16 - dense) * b * b / 2);
      bad += !ok;
      ++configs;
    }
  }
  return {bad == 0, fmt("%zu tile bitmaps (4x4 grid, tiles 4 and 8), %zu mismatches", configs, bad)};
}

// 11. Per-role densities weighted by element count give the global density.
Outcome allocation_identity(Harness& h) {
  double worst = 0.0;
  std::size_t reports = 0;
  for (const auto& [key, rep] : h.runs) {
    const auto rows = train::allocation_report(rep);
    double kept = 0.0, elems = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      kept += rows[i].density * static_cast<double>(rep.layers[i].elements);
      elems += static_cast<double>(rep.layers[i].elements);
    }
    worst = std::max(worst, std::fabs(kept / elems - rep.density));
    ++reports;
  }
  if (reports == 0) return {false, "no training reports available"};
  return {worst <= 1e-9, fmt("%zu reports, worst |weighted - global| %.2e", reports, worst)};
}

// 12. spmm at density 0.55 is at least 10% faster than dense on one thread.
Outcome work_reduction(Harness&) {
  const std::size_t d = 1024, n = 16, reps = 20;
  std::mt19937_64 rng(12);
  std::normal_distribution<float> nd;
  std::vector<float> w(d * d), x(d * n);
  for (auto& v : w) v = nd(rng);
  for (auto& v : x) v = nd(rng);
  auto build = [&](double density) {
    mask::HybridMask m(d, d, 32, 32);
    std::vector<std::size_t> order(m.tiles());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const auto dense = static_cast<std::size_t>(std::llround((2 * density - 1) * m.tiles()));
    for (std::size_t i = 0; i < dense; ++i) m.tile_dense[order[i]] = 1;
    auto a = hsm::compress(w, d, d, m);
    const auto plan = hsm::autotune(a, n, 1, 5).plan();
    return std::make_pair(std::move(a), plan);
  };
  const auto full = build(1.0);
  const auto hybrid = build(0.55);
  auto once = [&](const auto& c) {
    const auto t0 = Clock::now();
    const auto y = hsm::spmm(c.first, x, n, c.second);
    const double s = seconds_since(t0);
    if (y.empty()) std::abort();
    return s;
  };
  // Alternate so drift in machine load hits both sides equally.
  for (int i = 0; i < 3; ++i) once(full), once(hybrid);
  std::vector<double> a100, a55;
  for (std::size_t r = 0; r < reps; ++r) {
    a100.push_back(once(full));
    a55.push_back(once(hybrid));
  }
  auto median = [&](std::vector<double>& t) {
    std::sort(t.begin(), t.end());
    return (t[reps / 2 - 1] + t[reps / 2]) / 2;
  };
  const double t100 = median(a100), t55 = median(a55);
  const double d100 = full.first.density(), d55 = hybrid.first.density();
  return {t55 <= 0.9 * t100,
          fmt("%s: density %.4f %.3f ms vs density %.1f %.3f ms (%.1f%% less)",
              std::string(kernels::isa_name(kernels::active_isa())).c_str(), d55, 1e3 * t55, d100,
              1e3 * t100, 100 * (1 - t55 / t100))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  Harness h;
  std::string cache = "acceptance_cache";
  std::vector<int> only;
  app.add_option("--cache", cache, "Directory for the pretrained model and results.json");
  app.add_option("--steps", h.steps, "Mask-training steps per run")->check(CLI::PositiveNumber);
  app.add_option("--seeds", h.seeds, "Seeds per statistical criterion")->check(CLI::Range(1, 20));
  app.add_option("--only", only, "Criteria to run")->delimiter(',')->check(CLI::Range(1, 12));
  CLI11_PARSE(app, argc, argv);
  h.cache = cache;
  fs::create_directories(h.cache);

  using Fn = Outcome (*)(Harness&);
  const std::vector<std::pair<const char*, Fn>> criteria{
      {"gradient suite", gradient_suite},
      {"mask validity", mask_validity},
      {"gumbel distribution", gumbel_distribution},
      {"sparsity targeting", targeting},
      {"quality ordering", quality_ordering},
      {"joint vs tile-only", joint_vs_tile},
      {"global vs per-layer", global_vs_layer},
      {"prior insensitivity", prior_insensitivity},
      {"format correctness", format_correctness},
      {"accounting formula", accounting_formula},
      {"allocation identity", allocation_identity},
      {"cpu work reduction", work_reduction},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  h.results["steps"] = h.steps;
  h.results["seeds"] = h.seeds;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second(h);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    failures += !o.pass;
    std::printf("criterion %2d %-22s %s  %s [%.1f s]\n", id, criteria[i].first, o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
    h.results["criteria"][std::to_string(id)] = {
        {"name", criteria[i].first}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", secs}};
  }
  std::ofstream(h.cache / "results.json") << h.results.dump(2) << "\n";
  return failures == 0 ? 0 : 1;
}
