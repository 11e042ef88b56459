#include "patch/adam.hpp"

#include <cmath>

#include "patch/error.hpp"

namespace patch {

void Adam::add(ad::Tensor param) {
  if (!param.requires_grad()) throw ParameterError("Adam: parameter does not require grad");
  const std::size_t n = param.size();
  slots_.push_back({std::move(param), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    const auto g = s.param.grad();
    auto p = s.param.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      s.m[i] = options_.beta1 * s.m[i] + (1.0 - options_.beta1) * g[i];
      s.v[i] = options_.beta2 * s.v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double update = (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + options_.eps);
      double value = p[i];
      if (options_.weight_decay > 0.0) value -= options_.learning_rate * options_.weight_decay * value;
      p[i] = static_cast<float>(value - options_.learning_rate * update);
    }
  }
}

void Adam::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

}  // namespace patch
