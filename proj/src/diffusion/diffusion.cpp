#include "idfcr/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "idfcr/error.hpp"

namespace idfcr::diffusion {

using nn::Tensor;
using nn::Var;

double NoiseSchedule::a_at(int t) const {
  if (t < 1 || t > T) throw ParameterError("timestep " + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
  return a[t - 1];
}

double NoiseSchedule::a_bar_at(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > T) throw ParameterError("timestep " + std::to_string(t) + " outside [0," + std::to_string(T) + "]");
  return a_bar[t - 1];
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule length must be positive, got " + std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("need 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) +
                      ", " + std::to_string(beta_end));
  }
  NoiseSchedule s;
  s.T = T;
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double beta =
        T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(T - 1);
    s.beta.push_back(beta);
    s.a.push_back(1.0 - beta);
    prod *= 1.0 - beta;
    s.a_bar.push_back(prod);
  }
  return s;
}

NoiseSchedule scaled_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule length must be positive, got " + std::to_string(T));
  const double scale = 1000.0 / T;
  return make_schedule(T, std::min(beta_start * scale, 0.999), std::min(beta_end * scale, 0.999));
}

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.T) throw ParameterError("forward_diffuse: timestep " + std::to_string(t) + " out of range");
  if (z0.shape() != eps.shape()) {
    throw ConfigError("noise shape " + nn::to_string(eps.shape()) + " differs from latent " +
                      nn::to_string(z0.shape()));
  }
  const double ab = schedule.a_bar_at(t);
  const double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c0 * z0[i] + c1 * eps[i];
  return out;
}

namespace {

Posterior posterior_from(const Tensor& z_t, const Tensor& eps_pred, double a_t, double a_bar_t,
                         double a_bar_prev) {
  if (z_t.shape() != eps_pred.shape()) throw ConfigError("posterior: shape mismatch");
  Posterior p;
  const double inv = 1.0 / std::sqrt(a_t);
  const double k = (1.0 - a_t) / std::sqrt(1.0 - a_bar_t);
  p.mu = Tensor(z_t.shape());
  for (std::size_t i = 0; i < z_t.size(); ++i) p.mu[i] = inv * (z_t[i] - k * eps_pred[i]);
  p.sigma2 = (1.0 - a_bar_prev) / (1.0 - a_bar_t) * (1.0 - a_t);
  return p;
}

}  // namespace

Posterior posterior_params(const Tensor& z_t, const Tensor& eps_pred, int t,
                           const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.T) throw ParameterError("posterior: timestep " + std::to_string(t) + " out of range");
  return posterior_from(z_t, eps_pred, schedule.a_at(t), schedule.a_bar_at(t),
                        schedule.a_bar_at(t - 1));
}

Posterior posterior_between(const Tensor& z_t, const Tensor& eps_pred, int t, int t_prev,
                            const NoiseSchedule& schedule) {
  if (t_prev == t - 1) return posterior_params(z_t, eps_pred, t, schedule);
  if (t < 1 || t > schedule.T || t_prev < 0 || t_prev >= t) {
    throw ParameterError("posterior: bad step pair " + std::to_string(t) + " -> " + std::to_string(t_prev));
  }
  const double ab = schedule.a_bar_at(t), ab_prev = schedule.a_bar_at(t_prev);
  return posterior_from(z_t, eps_pred, ab / ab_prev, ab, ab_prev);
}

std::vector<int> sampling_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) {
    throw ParameterError("sampler steps " + std::to_string(steps) + " not in [1," + std::to_string(T) + "]");
  }
  std::vector<int> out;
  for (int i = steps; i >= 1; --i) {
    out.push_back(static_cast<int>(std::lround(static_cast<double>(i) * T / steps)));
  }
  return out;
}

void UNetConfig::validate() const {
  if (latent_dim < 1) throw ConfigError("latent_dim must be positive");
  if (base_width < 1 || base_width % groups != 0) {
    throw ConfigError("base_width " + std::to_string(base_width) + " must be a positive multiple of groups " +
                      std::to_string(groups));
  }
  if ((2 * base_width) % heads != 0) throw ConfigError("heads must divide the middle width");
}

namespace {

ResBlock make_res(int in, int out, int time_dim, int groups, nn::Rng& rng) {
  ResBlock r;
  r.norm1 = nn::GroupNorm(groups, in);
  r.conv1 = nn::Conv2d(in, out, 3, 1, 1, rng);
  r.emb_proj = nn::Linear(time_dim, out, rng);
  r.norm2 = nn::GroupNorm(groups, out);
  r.conv2 = nn::Conv2d(out, out, 3, 1, 1, rng);
  if (in != out) r.skip = nn::Conv2d(in, out, 1, 1, 0, rng);
  return r;
}

AttentionBlock make_attention(int channels, int groups, nn::Rng& rng) {
  return {nn::GroupNorm(groups, channels), nn::Linear(channels, 3 * channels, rng),
          nn::Linear(channels, channels, rng)};
}

EncoderWeights make_encoder(const UNetConfig& c, nn::Rng& rng) {
  const int w = c.base_width, td = c.time_dim();
  EncoderWeights e;
  e.conv_in = nn::Conv2d(c.latent_dim, w, 3, 1, 1, rng);
  e.down0 = make_res(w, w, td, c.groups, rng);
  e.downsample = nn::Conv2d(w, w, 3, 2, 1, rng);
  e.down1 = make_res(w, 2 * w, td, c.groups, rng);
  e.mid1 = make_res(2 * w, 2 * w, td, c.groups, rng);
  e.mid_attn = make_attention(2 * w, c.groups, rng);
  e.mid2 = make_res(2 * w, 2 * w, td, c.groups, rng);
  return e;
}

Var apply_res(const ResBlock& r, const Var& x, const Var& emb_act) {
  Var h = r.conv1(nn::silu(r.norm1(x)));
  h = nn::add_channel(h, nn::reshape(r.emb_proj(emb_act), {r.conv1.weight.dim(0)}));
  h = r.conv2(nn::silu(r.norm2(h)));
  return nn::add(h, r.skip.weight ? r.skip(x) : x);
}

Var apply_attention(const AttentionBlock& a, const Var& x, int heads) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2), n = h * w;
  std::vector<std::int32_t> to_tokens(static_cast<std::size_t>(n) * c), to_map(to_tokens.size());
  for (int p = 0; p < n; ++p)
    for (int ch = 0; ch < c; ++ch) {
      to_tokens[static_cast<std::size_t>(p) * c + ch] = ch * n + p;
      to_map[static_cast<std::size_t>(ch) * n + p] = p * c + ch;
    }
  const Var tokens = nn::gather(a.norm(x), std::move(to_tokens), {n, c});
  const Var attended = nn::window_attention(a.qkv(tokens), Var(), {.window_tokens = n, .heads = heads});
  const Var back = nn::gather(a.proj(attended), std::move(to_map), {c, h, w});
  return nn::add(x, back);
}

struct EncoderFeatures {
  Var s_in, s0, s1, mid;
};

EncoderFeatures run_encoder(const EncoderWeights& e, const Var& z, const Var* extra,
                            const Var& emb_act, int heads) {
  EncoderFeatures f;
  f.s_in = e.conv_in(z);
  if (extra) f.s_in = nn::add(f.s_in, *extra);
  f.s0 = apply_res(e.down0, f.s_in, emb_act);
  f.s1 = apply_res(e.down1, e.downsample(f.s0), emb_act);
  Var m = apply_res(e.mid1, f.s1, emb_act);
  m = apply_attention(e.mid_attn, m, heads);
  f.mid = apply_res(e.mid2, m, emb_act);
  return f;
}

Tensor sinusoid(int t, int dim) {
  Tensor out({1, dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out[i] = std::sin(t * freq);
    out[half + i] = std::cos(t * freq);
  }
  return out;
}

}  // namespace

void ResBlock::collect(nn::ParamSet& set, const std::string& prefix) const {
  norm1.collect(set, prefix + "norm1.");
  conv1.collect(set, prefix + "conv1.");
  emb_proj.collect(set, prefix + "emb_proj.");
  norm2.collect(set, prefix + "norm2.");
  conv2.collect(set, prefix + "conv2.");
  if (skip.weight) skip.collect(set, prefix + "skip.");
}

void AttentionBlock::collect(nn::ParamSet& set, const std::string& prefix) const {
  norm.collect(set, prefix + "norm.");
  qkv.collect(set, prefix + "qkv.");
  proj.collect(set, prefix + "proj.");
}

void EncoderWeights::collect(nn::ParamSet& set, const std::string& prefix) const {
  conv_in.collect(set, prefix + "conv_in.");
  down0.collect(set, prefix + "down0.");
  downsample.collect(set, prefix + "downsample.");
  down1.collect(set, prefix + "down1.");
  mid1.collect(set, prefix + "mid1.");
  mid_attn.collect(set, prefix + "mid_attn.");
  mid2.collect(set, prefix + "mid2.");
}

void TrunkWeights::collect(nn::ParamSet& set, const std::string& prefix) const {
  time1.collect(set, prefix + "time1.");
  time2.collect(set, prefix + "time2.");
  set.add(prefix + "null_embedding", null_embedding);
  encoder.collect(set, prefix + "encoder.");
  up1.collect(set, prefix + "up1.");
  upsample_conv.collect(set, prefix + "upsample_conv.");
  up0.collect(set, prefix + "up0.");
  up_in.collect(set, prefix + "up_in.");
  norm_out.collect(set, prefix + "norm_out.");
  conv_out.collect(set, prefix + "conv_out.");
}

void ControlWeights::collect(nn::ParamSet& set, const std::string& prefix) const {
  cond_in.collect(set, prefix + "cond_in.");
  cond_out.collect(set, prefix + "cond_out.");
  encoder.collect(set, prefix + "encoder.");
  fuse_in.collect(set, prefix + "fuse_in.");
  fuse0.collect(set, prefix + "fuse0.");
  fuse1.collect(set, prefix + "fuse1.");
  fuse_mid.collect(set, prefix + "fuse_mid.");
}

nn::ParamSet DenoiserWeights::trunk_params() const {
  nn::ParamSet set;
  trunk.collect(set, "trunk.");
  return set;
}

nn::ParamSet DenoiserWeights::control_params() const {
  nn::ParamSet set;
  control.collect(set, "control.");
  return set;
}

nn::ParamSet DenoiserWeights::params() const {
  nn::ParamSet set = trunk_params();
  set.merge("", control_params());
  return set;
}

void DenoiserWeights::clone_encoder_into_control() const {
  nn::ParamSet src, dst;
  trunk.encoder.collect(src, "");
  control.encoder.collect(dst, "");
  dst.load_values(src);
}

void DenoiserWeights::freeze_trunk() const {
  nn::ParamSet trunk = trunk_params();
  trunk.set_requires_grad(false);
  trunk.zero_grad();
}

DenoiserWeights init_denoiser(const UNetConfig& c, std::uint64_t seed) {
  c.validate();
  nn::Rng rng(seed);
  const int w = c.base_width, td = c.time_dim();
  DenoiserWeights d;
  TrunkWeights& t = d.trunk;
  t.time1 = nn::Linear(w, td, rng);
  t.time2 = nn::Linear(td, td, rng);
  t.null_embedding = nn::make_param(rng.uniform_tensor({1, td}, -0.1, 0.1));
  t.encoder = make_encoder(c, rng);
  t.up1 = make_res(4 * w, 2 * w, td, c.groups, rng);
  t.upsample_conv = nn::Conv2d(2 * w, 2 * w, 3, 1, 1, rng);
  t.up0 = make_res(3 * w, w, td, c.groups, rng);
  t.up_in = make_res(2 * w, w, td, c.groups, rng);
  t.norm_out = nn::GroupNorm(c.groups, w);
  t.conv_out = nn::Conv2d(w, c.latent_dim, 3, 1, 1, rng);

  ControlWeights& k = d.control;
  k.cond_in = nn::Conv2d(c.latent_dim, w, 3, 1, 1, rng);
  k.cond_out = nn::Conv2d(w, w, 3, 1, 1, rng);
  k.encoder = make_encoder(c, rng);
  k.fuse_in = nn::Conv2d::zeros(w, w, 1, 1, 0);
  k.fuse0 = nn::Conv2d::zeros(w, w, 1, 1, 0);
  k.fuse1 = nn::Conv2d::zeros(2 * w, 2 * w, 1, 1, 0);
  k.fuse_mid = nn::Conv2d::zeros(2 * w, 2 * w, 1, 1, 0);
  d.clone_encoder_into_control();
  return d;
}

Var predict_noise(const Var& z_t, int t, const Tensor* cond, const DenoiserWeights& weights,
                  const UNetConfig& config) {
  const nn::Shape& s = z_t.shape();
  if (s.size() != 3 || s[0] != config.latent_dim || s[1] % 2 != 0 || s[2] % 2 != 0) {
    throw ConfigError("latent " + nn::to_string(s) + " does not fit the denoiser (D=" +
                      std::to_string(config.latent_dim) + ", even sides)");
  }
  if (cond && cond->shape() != s) {
    throw ConfigError("condition " + nn::to_string(cond->shape()) + " differs from latent " +
                      nn::to_string(s));
  }
  const TrunkWeights& tw = weights.trunk;
  const Var emb = nn::add(tw.time2(nn::silu(tw.time1(Var(sinusoid(t, config.base_width))))),
                          tw.null_embedding);
  const Var emb_act = nn::silu(emb);

  EncoderFeatures f = run_encoder(tw.encoder, z_t, nullptr, emb_act, config.heads);
  if (cond) {
    const ControlWeights& cw = weights.control;
    const Var hint = cw.cond_out(nn::silu(cw.cond_in(Var(*cond))));
    const EncoderFeatures g = run_encoder(cw.encoder, z_t, &hint, emb_act, config.heads);
    f.s_in = nn::add(f.s_in, cw.fuse_in(g.s_in));
    f.s0 = nn::add(f.s0, cw.fuse0(g.s0));
    f.s1 = nn::add(f.s1, cw.fuse1(g.s1));
    f.mid = nn::add(f.mid, cw.fuse_mid(g.mid));
  }

  Var h = apply_res(tw.up1, nn::concat_channels(f.mid, f.s1), emb_act);
  h = tw.upsample_conv(nn::upsample_nearest(h, 2));
  h = apply_res(tw.up0, nn::concat_channels(h, f.s0), emb_act);
  h = apply_res(tw.up_in, nn::concat_channels(h, f.s_in), emb_act);
  return tw.conv_out(nn::silu(tw.norm_out(h)));
}

Var denoising_loss(std::span<const LatentSample> batch, int t, std::span<const Tensor> eps,
                   const DenoiserWeights& weights, const NoiseSchedule& schedule,
                   const UNetConfig& config) {
  if (batch.empty() || batch.size() != eps.size()) throw DataError("denoising batch/noise size mismatch");
  Var total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor z_t = forward_diffuse(batch[i].z0, t, eps[i], schedule);
    const Tensor* cond = batch[i].cond.empty() ? nullptr : &batch[i].cond;
    const Var l = nn::mse_loss(predict_noise(Var(z_t), t, cond, weights, config), Var(eps[i]));
    total = total ? nn::add(total, l) : l;
  }
  return nn::scale(total, 1.0 / static_cast<double>(batch.size()));
}

StepResult train_step_at(std::span<const LatentSample> batch, int t, std::span<const Tensor> eps,
                         const DenoiserWeights& weights, const NoiseSchedule& schedule,
                         const UNetConfig& config, nn::Adam& optimizer) {
  if (batch.empty() || batch.size() != eps.size()) throw DataError("denoising batch/noise size mismatch");
  optimizer.zero_grad();
  StepResult result;
  result.t = t;
  Var total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor z_t = forward_diffuse(batch[i].z0, t, eps[i], schedule);
    const Tensor* cond = batch[i].cond.empty() ? nullptr : &batch[i].cond;
    const Var pred = predict_noise(Var(z_t), t, cond, weights, config);
    result.eps_pred.push_back(pred.value());
    const Var l = nn::mse_loss(pred, Var(eps[i]));
    total = total ? nn::add(total, l) : l;
  }
  total = nn::scale(total, 1.0 / static_cast<double>(batch.size()));
  result.loss = total.value()[0];
  if (total.requires_grad()) nn::backward(total);
  optimizer.step();
  return result;
}

StepResult train_step(std::span<const LatentSample> batch, const DenoiserWeights& weights,
                      const NoiseSchedule& schedule, const UNetConfig& config, nn::Adam& optimizer,
                      nn::Rng& rng) {
  const int t = rng.uniform_int(1, schedule.T);
  std::vector<Tensor> eps;
  for (const auto& s : batch) eps.push_back(rng.normal_tensor(s.z0.shape()));
  return train_step_at(batch, t, eps, weights, schedule, config, optimizer);
}

Tensor ddpm_sample(const nn::Shape& shape, const Tensor* cond, const DenoiserWeights& weights,
                   const NoiseSchedule& schedule, const UNetConfig& config, nn::Rng& rng,
                   int steps, double clip) {
  const std::vector<int> ts = sampling_timesteps(schedule.T, steps);
  nn::NoGradGuard guard;
  Tensor z = rng.normal_tensor(shape);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Tensor eps = predict_noise(Var(z), t, cond, weights, config).value();
    if (clip > 0.0) {
      const double sa = std::sqrt(schedule.a_bar_at(t)), sb = std::sqrt(1.0 - schedule.a_bar_at(t));
      for (std::size_t j = 0; j < z.size(); ++j) {
        const double z0 = std::clamp((z[j] - sb * eps[j]) / sa, -clip, clip);
        eps[j] = (z[j] - sa * z0) / sb;
      }
    }
    Posterior p = posterior_between(z, eps, t, t_prev, schedule);
    if (p.sigma2 > 0.0) {
      const double sd = std::sqrt(p.sigma2);
      const Tensor xi = rng.normal_tensor(shape);
      for (std::size_t j = 0; j < z.size(); ++j) p.mu[j] += sd * xi[j];
    }
    z = std::move(p.mu);
  }
  return z;
}

void pretrain_trunk(std::span<const Tensor> latents, const DenoiserWeights& weights,
                    const NoiseSchedule& schedule, const UNetConfig& config,
                    const PretrainOptions& options, nn::Rng& rng, const StepLogger& log) {
  if (latents.empty()) throw DataError("no latents for trunk pretraining");
  nn::ParamSet trunk = weights.trunk_params();
  trunk.set_requires_grad(true);
  weights.control_params().set_requires_grad(false);
  nn::Adam adam(trunk, {.lr = options.lr});
  const int n = static_cast<int>(latents.size());
  const int bs = std::min(options.batch_size, n);
  int cursor = 0;
  for (int step = 0; step < options.steps; ++step) {
    std::vector<LatentSample> batch;
    for (int b = 0; b < bs; ++b) {
      batch.push_back({latents[cursor], Tensor()});
      cursor = (cursor + 1) % n;
    }
    const StepResult r = train_step(batch, weights, schedule, config, adam, rng);
    if (log) log(step, r.loss);
  }
  weights.freeze_trunk();
  weights.control_params().set_requires_grad(true);
  weights.clone_encoder_into_control();
}

}  // namespace idfcr::diffusion
