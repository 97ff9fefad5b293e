#include "idfcr/pixel_cr.hpp"

#include <algorithm>
#include <string>

#include "idfcr/error.hpp"

namespace idfcr::pixel_cr {

using nn::Var;

namespace {

// Token ordering for one (possibly shifted) window partition of an HxW map.
struct WindowLayout {
  int tokens_per_window = 0;
  std::vector<std::int32_t> to_tokens;    // [C,H,W] -> [N,C]
  std::vector<std::int32_t> to_map;       // [N,C] -> [C,H,W]
  std::vector<std::uint8_t> mask;         // empty when unshifted
};

int region(int pos, int extent, int window, int shift) {
  if (pos < extent - window) return 0;
  if (pos < extent - shift) return 1;
  return 2;
}

WindowLayout make_layout(int channels, int h, int w, int window, int shift) {
  WindowLayout layout;
  const int n = window * window;
  const int wy_count = h / window, wx_count = w / window;
  const int tokens = h * w;
  layout.tokens_per_window = n;
  layout.to_tokens.resize(static_cast<std::size_t>(tokens) * channels);
  layout.to_map.resize(static_cast<std::size_t>(tokens) * channels);
  std::vector<int> region_id(tokens);
  int t = 0;
  for (int wy = 0; wy < wy_count; ++wy) {
    for (int wx = 0; wx < wx_count; ++wx) {
      for (int iy = 0; iy < window; ++iy) {
        for (int ix = 0; ix < window; ++ix, ++t) {
          const int sy = wy * window + iy;  // position in the rolled frame
          const int sx = wx * window + ix;
          const int y = (sy + shift) % h;
          const int x = (sx + shift) % w;
          for (int c = 0; c < channels; ++c) {
            const std::int32_t pixel = (c * h + y) * w + x;
            const std::int32_t token = t * channels + c;
            layout.to_tokens[token] = pixel;
            layout.to_map[pixel] = token;
          }
          region_id[t] = shift ? region(sy, h, window, shift) * 3 + region(sx, w, window, shift) : 0;
        }
      }
    }
  }
  if (shift) {
    const int windows = wy_count * wx_count;
    layout.mask.assign(static_cast<std::size_t>(windows) * n * n, 0);
    for (int win = 0; win < windows; ++win)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          layout.mask[(static_cast<std::size_t>(win) * n + i) * n + j] =
              region_id[win * n + i] != region_id[win * n + j];
  }
  return layout;
}

std::vector<std::int32_t> relative_bias_index(int window, int heads) {
  const int n = window * window;
  const int span = 2 * window - 1;
  std::vector<std::int32_t> index(static_cast<std::size_t>(heads) * n * n);
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const int dy = i / window - j / window + window - 1;
        const int dx = i % window - j % window + window - 1;
        index[(static_cast<std::size_t>(h) * n + i) * n + j] = (dy * span + dx) * heads + h;
      }
  return index;
}

void require_feature(const Var& feat, int channels, const char* op) {
  if (feat.value().rank() != 3 || feat.dim(0) != channels) {
    throw ConfigError(std::string(op) + ": expected [" + std::to_string(channels) +
                      ",H,W] features, got " + nn::to_string(feat.shape()));
  }
}

}  // namespace

void PixelCRConfig::validate() const {
  if (in_channels <= 0 || channels <= 0 || num_blocks <= 0 || window_size <= 0 || heads <= 0 ||
      image_size <= 0 || mlp_ratio <= 0 || swin_depth <= 0) {
    throw ConfigError("pixel_cr: all sizes must be positive");
  }
  if (channels % heads != 0) {
    throw ConfigError("pixel_cr: channels " + std::to_string(channels) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (image_size % window_size != 0 || (image_size / window_size) % 2 != 0) {
    throw ConfigError("pixel_cr: image_size " + std::to_string(image_size) +
                      " must be an even multiple of window_size " + std::to_string(window_size));
  }
}

void SwinLayerWeights::collect(nn::ParamSet& set, const std::string& prefix) const {
  norm1.collect(set, prefix + "norm1.");
  qkv.collect(set, prefix + "qkv.");
  proj.collect(set, prefix + "proj.");
  set.add(prefix + "relative_bias", relative_bias);
  norm2.collect(set, prefix + "norm2.");
  fc1.collect(set, prefix + "fc1.");
  fc2.collect(set, prefix + "fc2.");
}

void CloudyAttentionWeights::collect(nn::ParamSet& set, const std::string& prefix) const {
  reduce.collect(set, prefix + "reduce.");
  to_map.collect(set, prefix + "to_map.");
}

void CRBlockWeights::collect(nn::ParamSet& set, const std::string& prefix) const {
  for (std::size_t i = 0; i < swin.size(); ++i) {
    swin[i].collect(set, prefix + "swin." + std::to_string(i) + ".");
  }
  attention.collect(set, prefix + "attention.");
  if (tail_conv) tail_conv->collect(set, prefix + "tail_conv.");
}

nn::ParamSet PixelCRWeights::params() const {
  nn::ParamSet set;
  shallow.collect(set, "shallow.");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].collect(set, "blocks." + std::to_string(i) + ".");
  }
  reconstruct1.collect(set, "reconstruct1.");
  reconstruct2.collect(set, "reconstruct2.");
  return set;
}

PixelCRWeights init_weights(const PixelCRConfig& config, std::uint64_t seed) {
  config.validate();
  nn::Rng rng(seed);
  const int c = config.channels;
  const int span = 2 * config.window_size - 1;
  PixelCRWeights w;
  w.shallow = nn::Conv2d(config.in_channels, c, 3, 1, 1, rng);
  for (int b = 0; b < config.num_blocks; ++b) {
    CRBlockWeights block;
    for (int d = 0; d < config.swin_depth; ++d) {
      SwinLayerWeights layer;
      layer.norm1 = nn::LayerNorm(c);
      layer.qkv = nn::Linear(c, 3 * c, rng);
      layer.proj = nn::Linear(c, c, rng);
      layer.relative_bias = nn::make_param(rng.normal_tensor({span * span, config.heads}) * 0.02);
      layer.norm2 = nn::LayerNorm(c);
      layer.fc1 = nn::Linear(c, config.mlp_ratio * c, rng);
      layer.fc2 = nn::Linear(config.mlp_ratio * c, c, rng);
      block.swin.push_back(std::move(layer));
    }
    const int hidden = std::max(1, c / 4);
    block.attention.reduce = nn::Conv2d(c, hidden, 3, 1, 1, rng);
    block.attention.to_map = nn::Conv2d(hidden, 1, 3, 1, 1, rng);
    if (b + 1 == config.num_blocks) block.tail_conv = nn::Conv2d(c, c, 3, 1, 1, rng);
    w.blocks.push_back(std::move(block));
  }
  w.reconstruct1 = nn::Conv2d(c, c, 3, 1, 1, rng);
  w.reconstruct2 = nn::Conv2d(c, config.in_channels, 3, 1, 1, rng);
  return w;
}

Var shallow_extract(const Var& image, const PixelCRWeights& weights, const PixelCRConfig& config) {
  if (image.value().rank() != 3 || image.dim(0) != config.in_channels ||
      weights.shallow.weight.dim(1) != config.in_channels) {
    throw ConfigError("shallow_extract: image " + nn::to_string(image.shape()) +
                      " does not match " + std::to_string(config.in_channels) +
                      "-channel weights");
  }
  return weights.shallow(image);
}

Var swin_block(const Var& feat, const SwinLayerWeights& weights, bool shift,
               const PixelCRConfig& config, nn::Tensor* attention_out) {
  require_feature(feat, config.channels, "swin_block");
  const int c = config.channels, h = feat.dim(1), w = feat.dim(2);
  const int window = config.window_size;
  if (h % window != 0 || w % window != 0) {
    throw ConfigError("swin_block: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by window " + std::to_string(window));
  }
  // A single window spanning the map has nothing to shift across.
  const int offset = (shift && window < h && window < w) ? window / 2 : 0;
  const WindowLayout layout = make_layout(c, h, w, window, offset);
  const int n = layout.tokens_per_window;
  const int tokens = h * w;

  Var t = nn::gather(feat, layout.to_tokens, {tokens, c});
  Var bias = nn::gather(weights.relative_bias, relative_bias_index(window, config.heads),
                        {config.heads, n, n});
  nn::AttentionSpec spec{n, config.heads, offset ? &layout.mask : nullptr, attention_out};
  Var attended = nn::window_attention(weights.qkv(weights.norm1(t)), bias, spec);
  t = nn::add(t, weights.proj(attended));
  t = nn::add(t, weights.fc2(nn::gelu(weights.fc1(weights.norm2(t)))));
  return nn::gather(t, layout.to_map, {c, h, w});
}

Var swin_stage(const Var& feat, const CRBlockWeights& block, const PixelCRConfig& config) {
  Var x = feat;
  for (std::size_t i = 0; i < block.swin.size(); ++i) {
    x = swin_block(x, block.swin[i], i % 2 == 1, config);
  }
  return x;
}

Var cloudy_attention(const Var& feat, const CloudyAttentionWeights& weights) {
  if (feat.value().rank() != 3 || feat.dim(0) != weights.reduce.weight.dim(1)) {
    throw ConfigError("cloudy_attention: features " + nn::to_string(feat.shape()) +
                      " do not match weights");
  }
  return nn::sigmoid(weights.to_map(nn::gelu(weights.reduce(feat))));
}

BlockOutput cr_block(const Var& feat, const CRBlockWeights& block, bool is_last,
                     const PixelCRConfig& config) {
  require_feature(feat, config.channels, "cr_block");
  if (is_last && !block.tail_conv) throw ConfigError("cr_block: last block needs a tail conv");
  Var s = swin_stage(feat, block, config);
  Var a = cloudy_attention(s, block.attention);
  Var gated = nn::mul_spatial(is_last ? (*block.tail_conv)(s) : s, a);
  return {nn::add(gated, s), a};
}

Var reconstruct(const Var& feat, const PixelCRWeights& weights) {
  return weights.reconstruct2(nn::gelu(weights.reconstruct1(feat)));
}

ForwardResult pixel_cr_forward(const Var& image, const PixelCRWeights& weights,
                               const PixelCRConfig& config) {
  if (weights.blocks.size() != static_cast<std::size_t>(config.num_blocks)) {
    throw ConfigError("pixel_cr_forward: weights have " + std::to_string(weights.blocks.size()) +
                      " blocks, config expects " + std::to_string(config.num_blocks));
  }
  ForwardResult result;
  Var x = shallow_extract(image, weights, config);
  for (int i = 0; i < config.num_blocks; ++i) {
    BlockOutput out = cr_block(x, weights.blocks[i], i + 1 == config.num_blocks, config);
    x = out.features;
    result.attentions.push_back(out.attention);
  }
  result.decloudy_lq = reconstruct(x, weights);
  return result;
}

nn::Tensor infer(const nn::Tensor& cloudy, const PixelCRWeights& weights,
                 const PixelCRConfig& config) {
  nn::NoGradGuard no_grad;
  nn::Tensor out = pixel_cr_forward(Var(cloudy), weights, config).decloudy_lq.value();
  for (double& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

PixelLoss loss_pixel(const Var& decloudy_lq, const nn::Tensor& label,
                     const std::vector<Var>& attentions, const datasets::CloudMask& mask) {
  if (decloudy_lq.shape() != label.shape()) {
    throw DataError("loss_pixel: prediction " + nn::to_string(decloudy_lq.shape()) +
                    " vs label " + nn::to_string(label.shape()));
  }
  if (attentions.empty()) throw DataError("loss_pixel: no attention maps");
  for (double v : mask.mask.values()) {
    if (v != 0.0 && v != 1.0) throw DataError("loss_pixel: mask is not binary");
  }
  const Var target(mask.mask);
  Var attn_sum;
  for (const Var& a : attentions) {
    if (a.shape() != mask.mask.shape()) {
      throw DataError("loss_pixel: attention " + nn::to_string(a.shape()) + " vs mask " +
                      nn::to_string(mask.mask.shape()));
    }
    Var term = nn::mse_loss(a, target);
    attn_sum = attn_sum ? nn::add(attn_sum, term) : term;
  }
  PixelLoss loss;
  loss.l_cr = nn::l1_loss(decloudy_lq, Var(label));
  loss.l_attn = nn::scale(attn_sum, 1.0 / static_cast<double>(attentions.size()));
  loss.total = nn::add(loss.l_cr, loss.l_attn);
  return loss;
}

StepResult train_step(std::span<const datasets::ImagePair> batch, const PixelCRWeights& weights,
                      const PixelCRConfig& config, nn::Adam& optimizer, double mask_threshold) {
  if (batch.empty()) throw DataError("empty pixel batch");
  optimizer.zero_grad();
  StepResult result;
  Var total;
  for (const auto& pair : batch) {
    const ForwardResult fwd = pixel_cr_forward(Var(pair.cloudy), weights, config);
    const PixelLoss l = loss_pixel(fwd.decloudy_lq, pair.clear, fwd.attentions,
                                   datasets::compute_mask(pair, mask_threshold));
    result.total += l.total.value()[0];
    result.l_cr += l.l_cr.value()[0];
    result.l_attn += l.l_attn.value()[0];
    total = total ? nn::add(total, l.total) : l.total;
  }
  const double n = static_cast<double>(batch.size());
  nn::backward(nn::scale(total, 1.0 / n));
  optimizer.step();
  result.total /= n;
  result.l_cr /= n;
  result.l_attn /= n;
  return result;
}

}  // namespace idfcr::pixel_cr
