#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "idfcr/datasets.hpp"
#include "idfcr/nn/layers.hpp"
#include "idfcr/nn/optim.hpp"

// Pixel-space cloud removal: shallow conv -> N cloud-removal blocks
// (windowed self-attention + cloudy attention) -> conv reconstruction.
namespace idfcr::pixel_cr {

struct PixelCRConfig {
  int in_channels = 3;
  int channels = 96;
  int num_blocks = 3;
  int window_size = 8;
  int heads = 4;
  int image_size = 64;
  int mlp_ratio = 2;
  // Windowed attention layers per block; layer i is shifted when i is odd.
  int swin_depth = 2;

  void validate() const;
};

struct SwinLayerWeights {
  nn::LayerNorm norm1;
  nn::Linear qkv;
  nn::Linear proj;
  nn::Var relative_bias;  // [(2w-1)^2, heads]
  nn::LayerNorm norm2;
  nn::Linear fc1;
  nn::Linear fc2;

  void collect(nn::ParamSet& set, const std::string& prefix) const;
};

struct CloudyAttentionWeights {
  nn::Conv2d reduce;
  nn::Conv2d to_map;

  void collect(nn::ParamSet& set, const std::string& prefix) const;
};

struct CRBlockWeights {
  std::vector<SwinLayerWeights> swin;
  CloudyAttentionWeights attention;
  std::optional<nn::Conv2d> tail_conv;  // last block only

  void collect(nn::ParamSet& set, const std::string& prefix) const;
};

struct PixelCRWeights {
  nn::Conv2d shallow;
  std::vector<CRBlockWeights> blocks;
  nn::Conv2d reconstruct1;
  nn::Conv2d reconstruct2;

  nn::ParamSet params() const;
};

PixelCRWeights init_weights(const PixelCRConfig& config, std::uint64_t seed);

nn::Var shallow_extract(const nn::Var& image, const PixelCRWeights& weights,
                        const PixelCRConfig& config);

// One windowed attention + MLP layer, pre-normalized with residuals. When
// `shift` is set windows are rolled by window_size/2 and cross-region pairs
// are masked. `attention_out` receives [windows, heads, n, n] probabilities.
nn::Var swin_block(const nn::Var& feat, const SwinLayerWeights& weights, bool shift,
                   const PixelCRConfig& config, nn::Tensor* attention_out = nullptr);

// Stack of swin_depth layers alternating plain/shifted windows.
nn::Var swin_stage(const nn::Var& feat, const CRBlockWeights& block, const PixelCRConfig& config);

// [C,H,W] -> [1,H,W] in [0,1].
nn::Var cloudy_attention(const nn::Var& feat, const CloudyAttentionWeights& weights);

struct BlockOutput {
  nn::Var features;
  nn::Var attention;
};

// out = a * s + s, or a * conv(s) + s for the last block.
BlockOutput cr_block(const nn::Var& feat, const CRBlockWeights& block, bool is_last,
                     const PixelCRConfig& config);

// Two 3x3 convolutions back to image channels; unclamped.
nn::Var reconstruct(const nn::Var& feat, const PixelCRWeights& weights);

struct ForwardResult {
  nn::Var decloudy_lq;
  std::vector<nn::Var> attentions;
};

ForwardResult pixel_cr_forward(const nn::Var& image, const PixelCRWeights& weights,
                               const PixelCRConfig& config);

// Gradient-free forward with the output clamped to [0,1].
nn::Tensor infer(const nn::Tensor& cloudy, const PixelCRWeights& weights,
                 const PixelCRConfig& config);

struct PixelLoss {
  nn::Var total;
  nn::Var l_cr;
  nn::Var l_attn;
};

// l_cr = mean |lq - label|; l_attn = mean over blocks of mean (a_i - M)^2.
PixelLoss loss_pixel(const nn::Var& decloudy_lq, const nn::Tensor& label,
                     const std::vector<nn::Var>& attentions, const datasets::CloudMask& mask);

struct StepResult {
  double total = 0.0;
  double l_cr = 0.0;
  double l_attn = 0.0;
};

// Batch-mean pixel loss with masks from compute_mask, one optimizer step.
StepResult train_step(std::span<const datasets::ImagePair> batch, const PixelCRWeights& weights,
                      const PixelCRConfig& config, nn::Adam& optimizer,
                      double mask_threshold = datasets::kDefaultMaskThreshold);

}  // namespace idfcr::pixel_cr
