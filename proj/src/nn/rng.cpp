#include "idfcr/nn/rng.hpp"

namespace idfcr::nn {

Tensor Rng::normal_tensor(const Shape& shape) {
  Tensor t(shape);
  for (double& v : t.values()) v = normal();
  return t;
}

Tensor Rng::uniform_tensor(const Shape& shape, double lo, double hi) {
  Tensor t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values()) v = dist(engine_);
  return t;
}

}  // namespace idfcr::nn
