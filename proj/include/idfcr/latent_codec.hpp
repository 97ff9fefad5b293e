#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "idfcr/nn/layers.hpp"
#include "idfcr/nn/optim.hpp"

// Tiny vector-quantized autoencoder: strided-conv encoder, nearest-entry
// codebook lookup, transposed-conv decoder.
namespace idfcr::latent_codec {

struct CodecConfig {
  int in_channels = 3;
  int latent_dim = 8;        // D
  int codebook_size = 256;   // B
  int downsample = 4;        // f, a power of two
  double commitment = 0.25;  // beta_c
  int width = 32;

  void validate() const;
  int levels() const;
};

struct Codebook {
  nn::Var entries;  // [B, D]

  int size() const { return entries.dim(0); }
  int dim() const { return entries.dim(1); }
  // B >= 2, finite, pairwise distinct.
  void validate() const;
};

struct Encoder {
  nn::Conv2d stem;
  std::vector<nn::Conv2d> down;
  nn::Conv2d head;
};

struct Decoder {
  nn::Conv2d stem;
  std::vector<nn::ConvTranspose2d> up;
  nn::Conv2d head;
};

struct CodecWeights {
  Encoder encoder;
  Decoder decoder;
  Codebook codebook;

  nn::ParamSet params() const;
};

CodecWeights init_weights(const CodecConfig& config, std::uint64_t seed);

struct Quantized {
  nn::Tensor z_d;                 // [D,h,w]
  std::vector<std::int32_t> indices;  // [h*w], row-major
};

// [C,H,W] -> z_c [D,H/f,W/f]
nn::Var encode(const nn::Var& image, const CodecWeights& weights, const CodecConfig& config);

// Per site: argmin_j ||z_c - entries[j]||, lowest index on ties.
Quantized quantize(const nn::Tensor& z_c, const Codebook& codebook);

// Differentiable gather of codebook rows laid out as [D,h,w].
nn::Var lookup(const Codebook& codebook, const std::vector<std::int32_t>& indices, int h, int w);

// z [D,h,w] -> [C,H,W]; unclamped.
nn::Var decode(const nn::Var& z, const CodecWeights& weights, const CodecConfig& config);

// Gradient-free helpers for the pipeline. decode_image clamps to [0,1].
Quantized encode_quantize(const nn::Tensor& image, const CodecWeights& weights,
                          const CodecConfig& config);
nn::Tensor decode_image(const nn::Tensor& z, const CodecWeights& weights,
                        const CodecConfig& config);

struct VQLosses {
  nn::Var z_c;
  nn::Var z_st;  // straight-through latent fed to the decoder
  nn::Var recon;
  nn::Var codebook_loss;
  nn::Var commitment;
  nn::Var total;
};

// recon = mean (D(z_st) - x)^2; codebook = mean (sg(z_c) - z_d)^2;
// commitment = mean (z_c - sg(z_d))^2; total = recon + codebook + beta_c * commitment.
VQLosses vq_losses(const nn::Tensor& image, const CodecWeights& weights, const CodecConfig& config);

struct VQStepResult {
  double recon = 0.0;
  double codebook_loss = 0.0;
  double commitment = 0.0;
};

// Batch-mean losses, one optimizer step.
VQStepResult vq_train_step(std::span<const nn::Tensor> batch, const CodecWeights& weights,
                           const CodecConfig& config, nn::Adam& optimizer);

// Moves every entry no site of `images` selects onto a randomly chosen encoder
// output (plus a small jitter). Returns how many entries moved.
int restart_dead_codes(std::span<const nn::Tensor> images, const CodecWeights& weights,
                       const CodecConfig& config, nn::Rng& rng);

// Flat [B,D] little-endian float32.
void export_codebook(const std::filesystem::path& path, const Codebook& codebook);
std::vector<float> read_codebook_export(const std::filesystem::path& path);

}  // namespace idfcr::latent_codec
