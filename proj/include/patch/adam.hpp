#pragma once

#include <cstddef>
#include <vector>

#include "patch/tensor.hpp"

namespace patch {

struct AdamOptions {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

// Adam over leaf tensors. step() reads each parameter's grad, updates the
// values in place and leaves the grads untouched.
class Adam {
 public:
  explicit Adam(AdamOptions options) : options_(options) {}

  void add(ad::Tensor param);
  void step();
  void zero_grad();
  long steps() const { return t_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }

 private:
  struct Slot {
    ad::Tensor param;
    std::vector<double> m, v;
  };
  AdamOptions options_;
  std::vector<Slot> slots_;
  long t_ = 0;
};

}  // namespace patch
