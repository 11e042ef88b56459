#include <algorithm>
#include <chrono>
#include <random>

#include "patch/error.hpp"
#include "patch/hybrid_format.hpp"

namespace patch::hsm {
namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

std::size_t select_plan(std::span<const PlanTiming> timings) {
  if (timings.empty()) throw ParameterError("select_plan: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < timings.size(); ++i)
    if (timings[i].median < timings[best].median) best = i;
  return best;
}

AutotuneReport autotune(const HybridSparseMatrix& a, std::size_t n,
                        std::span<const KernelPlan> candidates, std::size_t repetitions) {
  if (candidates.empty()) throw ParameterError("autotune: empty candidate set");
  repetitions = std::max<std::size_t>(5, repetitions);
  std::vector<float> x(a.d2() * n);
  std::mt19937 rng(0x5eed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  for (auto& v : x) v = dist(rng);

  AutotuneReport report;
  // Candidates run one after another so their timings do not interfere.
  for (const KernelPlan& plan : candidates) {
    PlanTiming timing{plan, {}, 0.0};
    (void)spmm(a, x, n, plan);  // warm-up
    for (std::size_t r = 0; r < repetitions; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto y = spmm(a, x, n, plan);
      const auto t1 = std::chrono::steady_clock::now();
      timing.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
      if (y.empty() && a.d1() != 0) throw Error("spmm returned no output");
    }
    timing.median = median_of(timing.seconds);
    report.timings.push_back(std::move(timing));
  }
  report.chosen = select_plan(report.timings);
  return report;
}

AutotuneReport autotune(const HybridSparseMatrix& a, std::size_t n, std::size_t threads,
                        std::size_t repetitions) {
  const auto candidates = candidate_plans(a, threads);
  return autotune(a, n, candidates, repetitions);
}

}  // namespace patch::hsm
