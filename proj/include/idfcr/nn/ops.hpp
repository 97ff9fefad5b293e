#pragma once

#include <cstdint>
#include <vector>

#include "idfcr/nn/autograd.hpp"

// Differentiable tensor ops. Images and feature maps are [C,H,W]; token
// matrices are [N,C] row-major.
namespace idfcr::nn {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);

// x[C,H,W] * m[1,H,W], broadcast over channels.
Var mul_spatial(const Var& x, const Var& m);
// x[C,H,W] + v[C], broadcast over pixels.
Var add_channel(const Var& x, const Var& v);

Var sigmoid(const Var& x);
Var gelu(const Var& x);
Var silu(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
// mean |a - b|
Var l1_loss(const Var& a, const Var& b);
// mean (a - b)^2
Var mse_loss(const Var& a, const Var& b);

Var detach(const Var& x);
// Forward value is `quantized`; the gradient flows to `continuous` unchanged.
Var straight_through(const Var& continuous, const Var& quantized);

Var reshape(const Var& x, Shape shape);
// out[i] = x[index[i]]; the backward pass scatter-adds.
Var gather(const Var& x, std::vector<std::int32_t> index, Shape out_shape);
Var concat_channels(const Var& a, const Var& b);
Var upsample_nearest(const Var& x, int factor);

// x[Cin,H,W], weight[Cout,Cin,k,k], bias[Cout] or empty.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);
// x[Cin,H,W], weight[Cin,Cout,k,k]; output side = (in-1)*stride - 2*padding + k.
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride,
                     int padding);
// x[N,Cin], weight[Cout,Cin], bias[Cout] or empty.
Var linear(const Var& x, const Var& weight, const Var& bias);
// Normalizes each row of x[N,C].
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// x[C,H,W] with C divisible by groups.
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps = 1e-5);

struct AttentionSpec {
  int window_tokens = 0;  // tokens per window; rows of qkv are window-major
  int heads = 1;
  // Optional [num_windows, n, n] flags; nonzero marks a pair that may not attend.
  const std::vector<std::uint8_t>* mask = nullptr;
  // When set, receives softmax probabilities [num_windows, heads, n, n].
  Tensor* probs_out = nullptr;
};

// Multi-head self-attention inside contiguous token windows.
// qkv[N, 3C] packs queries, keys, values; bias is [heads,n,n] or empty.
// Returns [N, C].
Var window_attention(const Var& qkv, const Var& bias, const AttentionSpec& spec);

}  // namespace idfcr::nn
