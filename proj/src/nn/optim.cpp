#include "idfcr/nn/optim.hpp"

#include <cmath>

namespace idfcr::nn {

Adam::Adam(ParamSet params, AdamOptions options)
    : params_(std::move(params)), options_(options) {}

void Adam::step() {
  ++steps_;
  const double bias1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bias2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (auto& [name, var] : params_.entries()) {
    if (!var.requires_grad() || !var.has_grad()) continue;
    auto [it, inserted] = moments_.try_emplace(name);
    if (inserted) {
      it->second.m = Tensor(var.shape());
      it->second.v = Tensor(var.shape());
    }
    Tensor& m = it->second.m;
    Tensor& v = it->second.v;
    const Tensor& g = var.node()->grad;
    Tensor& w = var.node()->value;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      w[i] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
}

}  // namespace idfcr::nn
