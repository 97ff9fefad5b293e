#include "idfcr/nn/layers.hpp"

#include <cmath>

#include "idfcr/error.hpp"

namespace idfcr::nn {

void ParamSet::add(const std::string& name, const Var& param) {
  if (!params_.emplace(name, param).second) {
    throw ConfigError("duplicate parameter name '" + name + "'");
  }
}

void ParamSet::merge(const std::string& prefix, const ParamSet& other) {
  for (const auto& [name, var] : other.params_) add(prefix + name, var);
}

const Var& ParamSet::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

Var& ParamSet::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, var] : params_) n += var.size();
  return n;
}

std::vector<Var> ParamSet::vars() const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& [_, var] : params_) out.push_back(var);
  return out;
}

void ParamSet::set_requires_grad(bool flag) {
  for (auto& [_, var] : params_) var.set_requires_grad(flag);
}

void ParamSet::zero_grad() {
  for (auto& [_, var] : params_) var.zero_grad();
}

void ParamSet::load_values(const ParamSet& other) {
  if (other.size() != size()) {
    throw ConfigError("parameter count mismatch: " + std::to_string(other.size()) + " vs " +
                      std::to_string(size()));
  }
  for (auto& [name, var] : params_) {
    const Var& src = other.get(name);
    if (src.shape() != var.shape()) {
      throw ConfigError("shape mismatch for '" + name + "': " + to_string(src.shape()) + " vs " +
                        to_string(var.shape()));
    }
    var.mutable_value() = src.value();
  }
}

std::map<std::string, Tensor> ParamSet::snapshot() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, var] : params_) out.emplace(name, var.value());
  return out;
}

Var make_param(Tensor init) { return Var(std::move(init), true); }

Tensor fan_in_uniform(const Shape& shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_tensor(shape, -bound, bound);
}

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride_, int padding_, Rng& rng)
    : weight(make_param(fan_in_uniform({out_channels, in_channels, kernel, kernel},
                                       in_channels * kernel * kernel, rng))),
      bias(make_param(fan_in_uniform({out_channels}, in_channels * kernel * kernel, rng))),
      stride(stride_),
      padding(padding_) {}

Conv2d Conv2d::zeros(int in_channels, int out_channels, int kernel, int stride, int padding) {
  Conv2d conv;
  conv.weight = make_param(Tensor({out_channels, in_channels, kernel, kernel}));
  conv.bias = make_param(Tensor({out_channels}));
  conv.stride = stride;
  conv.padding = padding;
  return conv;
}

void Conv2d::collect(ParamSet& set, const std::string& prefix) const {
  set.add(prefix + "weight", weight);
  set.add(prefix + "bias", bias);
}

ConvTranspose2d::ConvTranspose2d(int in_channels, int out_channels, int kernel, int stride_,
                                 int padding_, Rng& rng)
    : weight(make_param(fan_in_uniform({in_channels, out_channels, kernel, kernel},
                                       out_channels * kernel * kernel, rng))),
      bias(make_param(fan_in_uniform({out_channels}, out_channels * kernel * kernel, rng))),
      stride(stride_),
      padding(padding_) {}

void ConvTranspose2d::collect(ParamSet& set, const std::string& prefix) const {
  set.add(prefix + "weight", weight);
  set.add(prefix + "bias", bias);
}

Linear::Linear(int in_features, int out_features, Rng& rng)
    : weight(make_param(fan_in_uniform({out_features, in_features}, in_features, rng))),
      bias(make_param(fan_in_uniform({out_features}, in_features, rng))) {}

void Linear::collect(ParamSet& set, const std::string& prefix) const {
  set.add(prefix + "weight", weight);
  set.add(prefix + "bias", bias);
}

LayerNorm::LayerNorm(int features)
    : gamma(make_param(Tensor({features}, 1.0))), beta(make_param(Tensor({features}))) {}

void LayerNorm::collect(ParamSet& set, const std::string& prefix) const {
  set.add(prefix + "gamma", gamma);
  set.add(prefix + "beta", beta);
}

GroupNorm::GroupNorm(int groups_, int channels)
    : gamma(make_param(Tensor({channels}, 1.0))),
      beta(make_param(Tensor({channels}))),
      groups(groups_) {}

void GroupNorm::collect(ParamSet& set, const std::string& prefix) const {
  set.add(prefix + "gamma", gamma);
  set.add(prefix + "beta", beta);
}

}  // namespace idfcr::nn
