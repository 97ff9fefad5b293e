#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "idfcr/nn/autograd.hpp"
#include "idfcr/nn/ops.hpp"
#include "idfcr/nn/rng.hpp"

namespace idfcr::nn {

// Named trainable tensors, ordered by hierarchical name ("blocks.0.attn.qkv.weight").
class ParamSet {
 public:
  void add(const std::string& name, const Var& param);
  void merge(const std::string& prefix, const ParamSet& other);

  const Var& get(const std::string& name) const;
  Var& get(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  const std::map<std::string, Var>& entries() const& { return params_; }
  // Safe to range over on a temporary set.
  std::map<std::string, Var> entries() && { return std::move(params_); }
  std::vector<Var> vars() const;

  void set_requires_grad(bool flag);
  void zero_grad();
  // Copies values (not handles) from `other`; names and shapes must match.
  void load_values(const ParamSet& other);
  std::map<std::string, Tensor> snapshot() const;

 private:
  std::map<std::string, Var> params_;
};

Var make_param(Tensor init);
// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor fan_in_uniform(const Shape& shape, int fan_in, Rng& rng);

struct Conv2d {
  Var weight;
  Var bias;
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng);
  static Conv2d zeros(int in_channels, int out_channels, int kernel, int stride, int padding);

  Var operator()(const Var& x) const { return conv2d(x, weight, bias, stride, padding); }
  void collect(ParamSet& set, const std::string& prefix) const;
};

struct ConvTranspose2d {
  Var weight;
  Var bias;
  int stride = 2;
  int padding = 1;

  ConvTranspose2d() = default;
  ConvTranspose2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng);

  Var operator()(const Var& x) const { return conv_transpose2d(x, weight, bias, stride, padding); }
  void collect(ParamSet& set, const std::string& prefix) const;
};

struct Linear {
  Var weight;
  Var bias;

  Linear() = default;
  Linear(int in_features, int out_features, Rng& rng);

  Var operator()(const Var& x) const { return linear(x, weight, bias); }
  void collect(ParamSet& set, const std::string& prefix) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  LayerNorm() = default;
  explicit LayerNorm(int features);

  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
  void collect(ParamSet& set, const std::string& prefix) const;
};

struct GroupNorm {
  Var gamma;
  Var beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(int groups, int channels);

  Var operator()(const Var& x) const { return group_norm(x, groups, gamma, beta); }
  void collect(ParamSet& set, const std::string& prefix) const;
};

}  // namespace idfcr::nn
