#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "idfcr/nn/layers.hpp"

namespace idfcr::nn {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment gradient descent over a ParamSet. Parameters with
// requires_grad == false are never touched.
class Adam {
 public:
  Adam(ParamSet params, AdamOptions options);

  void step();
  void zero_grad() { params_.zero_grad(); }

  std::int64_t steps() const { return steps_; }
  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };

  ParamSet params_;
  AdamOptions options_;
  std::map<std::string, Moments> moments_;
  std::int64_t steps_ = 0;
};

}  // namespace idfcr::nn
