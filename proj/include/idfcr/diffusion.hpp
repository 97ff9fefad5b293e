#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "idfcr/nn/layers.hpp"
#include "idfcr/nn/optim.hpp"

// Latent DDPM: noise schedule, closed-form diffusion, posterior, a small UNet
// noise predictor with a ControlNet-style conditioning branch, and sampling.
namespace idfcr::diffusion {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;   // index t-1 holds step t
  std::vector<double> a;
  std::vector<double> a_bar;

  // 1-based accessors; a_bar_at(0) == 1.
  double a_at(int t) const;
  double a_bar_at(int t) const;
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end);
// Betas given for a 1000-step chain, rescaled by 1000/T so short chains still
// end near pure noise. Betas are capped at 0.999.
NoiseSchedule scaled_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

// z_t = sqrt(a_bar_t) z_0 + sqrt(1 - a_bar_t) eps
nn::Tensor forward_diffuse(const nn::Tensor& z0, int t, const nn::Tensor& eps,
                           const NoiseSchedule& schedule);

struct Posterior {
  nn::Tensor mu;
  double sigma2 = 0.0;
};

Posterior posterior_params(const nn::Tensor& z_t, const nn::Tensor& eps_pred, int t,
                           const NoiseSchedule& schedule);
// Same formulas between arbitrary retained steps t > t_prev.
Posterior posterior_between(const nn::Tensor& z_t, const nn::Tensor& eps_pred, int t, int t_prev,
                            const NoiseSchedule& schedule);

// Descending timesteps visited by the sampler: round(i*T/steps) for i = steps..1.
std::vector<int> sampling_timesteps(int T, int steps);

struct UNetConfig {
  int latent_dim = 8;
  int base_width = 32;
  int groups = 8;
  int heads = 4;

  void validate() const;
  int time_dim() const { return 4 * base_width; }
};

struct ResBlock {
  nn::GroupNorm norm1;
  nn::Conv2d conv1;
  nn::Linear emb_proj;
  nn::GroupNorm norm2;
  nn::Conv2d conv2;
  nn::Conv2d skip;  // 1x1, empty weight when channels match

  void collect(nn::ParamSet& set, const std::string& prefix) const;
};

struct AttentionBlock {
  nn::GroupNorm norm;
  nn::Linear qkv;
  nn::Linear proj;

  void collect(nn::ParamSet& set, const std::string& prefix) const;
};

// conv_in, two resolutions, middle. Mirrored by the control branch.
struct EncoderWeights {
  nn::Conv2d conv_in;
  ResBlock down0;
  nn::Conv2d downsample;
  ResBlock down1;
  ResBlock mid1;
  AttentionBlock mid_attn;
  ResBlock mid2;

  void collect(nn::ParamSet& set, const std::string& prefix) const;
};

struct TrunkWeights {
  nn::Linear time1;
  nn::Linear time2;
  nn::Var null_embedding;  // empty condition c
  EncoderWeights encoder;
  ResBlock up1;
  nn::Conv2d upsample_conv;
  ResBlock up0;
  ResBlock up_in;
  nn::GroupNorm norm_out;
  nn::Conv2d conv_out;

  void collect(nn::ParamSet& set, const std::string& prefix) const;
};

struct ControlWeights {
  nn::Conv2d cond_in;
  nn::Conv2d cond_out;
  EncoderWeights encoder;
  // Zero-initialized 1x1 convs into the trunk's skips and middle output.
  nn::Conv2d fuse_in;
  nn::Conv2d fuse0;
  nn::Conv2d fuse1;
  nn::Conv2d fuse_mid;

  void collect(nn::ParamSet& set, const std::string& prefix) const;
};

struct DenoiserWeights {
  TrunkWeights trunk;
  ControlWeights control;

  nn::ParamSet trunk_params() const;
  nn::ParamSet control_params() const;
  nn::ParamSet params() const;
  // Copies trunk encoder values into the control encoder.
  void clone_encoder_into_control() const;
  // Stops trunk updates and drops any stale trunk gradients.
  void freeze_trunk() const;
};

DenoiserWeights init_denoiser(const UNetConfig& config, std::uint64_t seed);

// Noise prediction for z_t [D,h,w] at step t. With `cond` null only the trunk
// runs; otherwise the control branch sees `cond` (C_latent, same shape as z_t).
nn::Var predict_noise(const nn::Var& z_t, int t, const nn::Tensor* cond,
                      const DenoiserWeights& weights, const UNetConfig& config);

struct LatentSample {
  nn::Tensor z0;
  nn::Tensor cond;  // empty tensor -> unconditioned
};

// Batch mean of mean (eps - eps_pred)^2 at a shared timestep.
nn::Var denoising_loss(std::span<const LatentSample> batch, int t, std::span<const nn::Tensor> eps,
                       const DenoiserWeights& weights, const NoiseSchedule& schedule,
                       const UNetConfig& config);

struct StepResult {
  double loss = 0.0;
  int t = 0;
  std::vector<nn::Tensor> eps_pred;  // detached predictions per sample
};

// One optimizer step at a given timestep and noise.
StepResult train_step_at(std::span<const LatentSample> batch, int t,
                         std::span<const nn::Tensor> eps, const DenoiserWeights& weights,
                         const NoiseSchedule& schedule, const UNetConfig& config,
                         nn::Adam& optimizer);

// Draws t ~ U{1..T}, then eps per sample, then calls train_step_at.
StepResult train_step(std::span<const LatentSample> batch, const DenoiserWeights& weights,
                      const NoiseSchedule& schedule, const UNetConfig& config, nn::Adam& optimizer,
                      nn::Rng& rng);

// Ancestral sampling from Z_T ~ N(0,I) over `steps` retained timesteps. With
// clip > 0 each step's implied z_0 estimate is clamped to [-clip, clip] and the
// noise prediction re-derived from it before the posterior step.
nn::Tensor ddpm_sample(const nn::Shape& shape, const nn::Tensor* cond,
                       const DenoiserWeights& weights, const NoiseSchedule& schedule,
                       const UNetConfig& config, nn::Rng& rng, int steps = 50,
                       double clip = 0.0);

struct PretrainOptions {
  int steps = 1000;
  int batch_size = 2;
  double lr = 1e-4;
};

using StepLogger = std::function<void(std::int64_t step, double loss)>;

// Unconditional training of the trunk on clean latents, then freeze and clone
// its encoder into the control branch.
void pretrain_trunk(std::span<const nn::Tensor> latents, const DenoiserWeights& weights,
                    const NoiseSchedule& schedule, const UNetConfig& config,
                    const PretrainOptions& options, nn::Rng& rng,
                    const StepLogger& log = nullptr);

}  // namespace idfcr::diffusion
