#pragma once

#include <functional>
#include <span>
#include <vector>

#include "idfcr/datasets.hpp"
#include "idfcr/diffusion.hpp"
#include "idfcr/latent_codec.hpp"
#include "idfcr/pixel_cr.hpp"

// Iterative noise refinement: each batch is trained K times, the k-th time
// against the model's own detached noise prediction from step k-1.
namespace idfcr::inr {

struct INRConfig {
  int K = 3;
  bool detach_predictions = true;

  void validate() const;
};

struct BatchResult {
  int t = 0;
  std::vector<double> losses;                      // [K]
  std::vector<std::vector<nn::Tensor>> targets;    // [K][batch] noise each step trained against
  std::vector<std::vector<nn::Tensor>> predictions;  // [K][batch]
};

// Draws eps ~ N(0,I) per sample, then runs K optimizer steps at the fixed t.
BatchResult inr_train_batch(std::span<const diffusion::LatentSample> batch, int t,
                            const diffusion::DenoiserWeights& weights,
                            const diffusion::NoiseSchedule& schedule,
                            const diffusion::UNetConfig& unet, const INRConfig& config,
                            nn::Adam& optimizer, nn::Rng& rng);

// Draws t ~ U{1..T} first, in the same order as diffusion::train_step.
BatchResult inr_step(std::span<const diffusion::LatentSample> batch,
                     const diffusion::DenoiserWeights& weights,
                     const diffusion::NoiseSchedule& schedule, const diffusion::UNetConfig& unet,
                     const INRConfig& config, nn::Adam& optimizer, nn::Rng& rng);

// Frozen upstream stages mapping image pairs to diffusion latents.
struct LatentPipeline {
  const pixel_cr::PixelCRWeights* pixel = nullptr;
  pixel_cr::PixelCRConfig pixel_config;
  const latent_codec::CodecWeights* codec = nullptr;
  latent_codec::CodecConfig codec_config;
  double latent_scale = 1.0;
};

// z0 = scale * quantize(encode(label)); cond = scale * quantize(encode(pixel_cr(cloudy))).
diffusion::LatentSample to_latents(const datasets::ImagePair& pair, const LatentPipeline& pipeline);
std::vector<diffusion::LatentSample> to_latents(std::span<const datasets::ImagePair> pairs,
                                                const LatentPipeline& pipeline);

struct EpochStats {
  int batches = 0;
  std::int64_t optimizer_steps = 0;
  double mean_loss = 0.0;
  double mean_first_loss = 0.0;  // k = 0 losses only
};

using InnerLogger = std::function<void(int epoch, int batch, int k, double loss)>;

// One pass over `samples` in order, `batch_size` at a time; weights carry over.
EpochStats inr_epoch(std::span<const diffusion::LatentSample> samples, int epoch, int batch_size,
                     const diffusion::DenoiserWeights& weights,
                     const diffusion::NoiseSchedule& schedule, const diffusion::UNetConfig& unet,
                     const INRConfig& config, nn::Adam& optimizer, nn::Rng& rng,
                     const InnerLogger& log = nullptr);

EpochStats inr_epoch(std::span<const datasets::ImagePair> pairs, const LatentPipeline& pipeline,
                     int epoch, int batch_size, const diffusion::DenoiserWeights& weights,
                     const diffusion::NoiseSchedule& schedule, const diffusion::UNetConfig& unet,
                     const INRConfig& config, nn::Adam& optimizer, nn::Rng& rng,
                     const InnerLogger& log = nullptr);

}  // namespace idfcr::inr
