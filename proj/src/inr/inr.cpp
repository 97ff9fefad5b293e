#include "idfcr/inr.hpp"

#include <algorithm>
#include <string>

#include "idfcr/error.hpp"

namespace idfcr::inr {

using nn::Tensor;

void INRConfig::validate() const {
  if (K < 1) throw ConfigError("INR iterations K must be at least 1, got " + std::to_string(K));
  // An undetached target would backpropagate into a graph built from weights
  // the optimizer has already overwritten.
  if (!detach_predictions) throw ConfigError("INR requires detached noise predictions");
}

BatchResult inr_train_batch(std::span<const diffusion::LatentSample> batch, int t,
                            const diffusion::DenoiserWeights& weights,
                            const diffusion::NoiseSchedule& schedule,
                            const diffusion::UNetConfig& unet, const INRConfig& config,
                            nn::Adam& optimizer, nn::Rng& rng) {
  config.validate();
  BatchResult result;
  result.t = t;
  std::vector<Tensor> eps;
  for (const auto& s : batch) eps.push_back(rng.normal_tensor(s.z0.shape()));
  for (int k = 0; k < config.K; ++k) {
    diffusion::StepResult step =
        diffusion::train_step_at(batch, t, eps, weights, schedule, unet, optimizer);
    result.losses.push_back(step.loss);
    result.targets.push_back(eps);
    result.predictions.push_back(step.eps_pred);
    eps = std::move(step.eps_pred);
  }
  return result;
}

BatchResult inr_step(std::span<const diffusion::LatentSample> batch,
                     const diffusion::DenoiserWeights& weights,
                     const diffusion::NoiseSchedule& schedule, const diffusion::UNetConfig& unet,
                     const INRConfig& config, nn::Adam& optimizer, nn::Rng& rng) {
  const int t = rng.uniform_int(1, schedule.T);
  return inr_train_batch(batch, t, weights, schedule, unet, config, optimizer, rng);
}

diffusion::LatentSample to_latents(const datasets::ImagePair& pair, const LatentPipeline& p) {
  if (!p.pixel || !p.codec) throw ConfigError("latent pipeline is missing a stage");
  const Tensor lq = pixel_cr::infer(pair.cloudy, *p.pixel, p.pixel_config);
  diffusion::LatentSample s;
  s.z0 = latent_codec::encode_quantize(pair.clear, *p.codec, p.codec_config).z_d;
  s.cond = latent_codec::encode_quantize(lq, *p.codec, p.codec_config).z_d;
  s.z0 *= p.latent_scale;
  s.cond *= p.latent_scale;
  return s;
}

std::vector<diffusion::LatentSample> to_latents(std::span<const datasets::ImagePair> pairs,
                                                const LatentPipeline& pipeline) {
  std::vector<diffusion::LatentSample> out;
  out.reserve(pairs.size());
  for (const auto& pair : pairs) out.push_back(to_latents(pair, pipeline));
  return out;
}

EpochStats inr_epoch(std::span<const diffusion::LatentSample> samples, int epoch, int batch_size,
                     const diffusion::DenoiserWeights& weights,
                     const diffusion::NoiseSchedule& schedule, const diffusion::UNetConfig& unet,
                     const INRConfig& config, nn::Adam& optimizer, nn::Rng& rng,
                     const InnerLogger& log) {
  if (samples.empty()) throw DataError("INR epoch over an empty set");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  EpochStats stats;
  const std::int64_t steps_before = optimizer.steps();
  double total = 0.0, first = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t n = std::min<std::size_t>(batch_size, samples.size() - start);
    const BatchResult r =
        inr_step(samples.subspan(start, n), weights, schedule, unet, config, optimizer, rng);
    for (int k = 0; k < config.K; ++k) {
      if (log) log(epoch, stats.batches, k, r.losses[k]);
      total += r.losses[k];
      ++count;
    }
    first += r.losses.front();
    ++stats.batches;
  }
  stats.optimizer_steps = optimizer.steps() - steps_before;
  stats.mean_loss = total / static_cast<double>(count);
  stats.mean_first_loss = first / stats.batches;
  return stats;
}

EpochStats inr_epoch(std::span<const datasets::ImagePair> pairs, const LatentPipeline& pipeline,
                     int epoch, int batch_size, const diffusion::DenoiserWeights& weights,
                     const diffusion::NoiseSchedule& schedule, const diffusion::UNetConfig& unet,
                     const INRConfig& config, nn::Adam& optimizer, nn::Rng& rng,
                     const InnerLogger& log) {
  const std::vector<diffusion::LatentSample> samples = to_latents(pairs, pipeline);
  return inr_epoch(samples, epoch, batch_size, weights, schedule, unet, config, optimizer, rng, log);
}

}  // namespace idfcr::inr
