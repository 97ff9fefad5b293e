#include <doctest.h>

#include <cmath>

#include "idfcr/error.hpp"
#include "idfcr/inr.hpp"

using namespace idfcr;
using namespace idfcr::inr;
using diffusion::LatentSample;
using nn::Tensor;
using nn::Var;

namespace {

diffusion::UNetConfig tiny_unet() {
  diffusion::UNetConfig c;
  c.latent_dim = 2;
  c.base_width = 8;
  c.groups = 2;
  c.heads = 2;
  return c;
}

std::vector<LatentSample> random_samples(int n, nn::Rng& rng, bool conditioned = true) {
  std::vector<LatentSample> out;
  for (int i = 0; i < n; ++i) {
    out.push_back({rng.normal_tensor({2, 4, 4}), conditioned ? rng.normal_tensor({2, 4, 4}) : Tensor()});
  }
  return out;
}

bool params_equal(const nn::ParamSet& a, const nn::ParamSet& b) {
  for (const auto& [name, var] : a.entries()) {
    if (!nn::bit_equal(var.value(), b.get(name).value())) return false;
  }
  return true;
}

// Prepare a denoiser as it is during control training: trunk frozen.
diffusion::DenoiserWeights control_phase(std::uint64_t seed) {
  const diffusion::DenoiserWeights w = diffusion::init_denoiser(tiny_unet(), seed);
  w.freeze_trunk();
  return w;
}

}  // namespace

TEST_CASE("config") {
  INRConfig c;
  CHECK(c.K == 3);
  CHECK(c.detach_predictions);
  c.K = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = INRConfig{};
  c.detach_predictions = false;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("K = 1 reduces to a plain training step") {
  const auto unet = tiny_unet();
  const auto schedule = diffusion::scaled_schedule(32);
  nn::Rng data(1);
  const auto batch = random_samples(2, data);

  const auto a = control_phase(2);
  const auto b = control_phase(2);
  nn::Adam adam_a(a.control_params(), {.lr = 1e-3});
  nn::Adam adam_b(b.control_params(), {.lr = 1e-3});
  nn::Rng rng_a(3), rng_b(3);

  // fusion is zero at init; take a few steps so the comparison is not trivial
  for (int i = 0; i < 3; ++i) {
    const diffusion::StepResult plain = diffusion::train_step(batch, a, schedule, unet, adam_a, rng_a);
    const BatchResult refined = inr_step(batch, b, schedule, unet, {.K = 1}, adam_b, rng_b);
    REQUIRE(refined.losses.size() == 1);
    CHECK(plain.t == refined.t);
    CHECK(plain.loss == refined.losses[0]);
    CHECK(params_equal(a.params(), b.params()));
  }
  CHECK(adam_a.steps() == adam_b.steps());
}

TEST_CASE("K = 3 re-pairs detached predictions") {
  const auto unet = tiny_unet();
  const auto schedule = diffusion::scaled_schedule(32);
  nn::Rng data(4);
  const auto batch = random_samples(2, data);
  const auto w = control_phase(5);
  nn::Adam adam(w.control_params(), {.lr = 1e-3});
  nn::Rng rng(6);
  nn::Rng replay = rng;

  const BatchResult r = inr_train_batch(batch, 11, w, schedule, unet, {.K = 3}, adam, rng);
  CHECK(adam.steps() == 3);
  CHECK(r.t == 11);
  REQUIRE(r.losses.size() == 3);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    CHECK(nn::bit_equal(r.targets[0][i], replay.normal_tensor(batch[i].z0.shape())));
  }
  for (int k = 1; k < 3; ++k) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      CHECK(nn::bit_equal(r.targets[k][i], r.predictions[k - 1][i]));
    }
  }
}

TEST_CASE("zero learning rate still re-pairs") {
  const auto unet = tiny_unet();
  const auto schedule = diffusion::scaled_schedule(32);
  nn::Rng data(7);
  const auto batch = random_samples(1, data);
  const auto w = control_phase(8);
  const auto before = w.params().snapshot();
  nn::Adam adam(w.control_params(), {.lr = 0.0});
  nn::Rng rng(9);

  const BatchResult r = inr_train_batch(batch, 5, w, schedule, unet, {.K = 3}, adam, rng);
  for (double l : r.losses) CHECK(std::isfinite(l));
  for (const auto& [name, value] : before) CHECK(nn::bit_equal(w.params().get(name).value(), value));

  // eps_1 is the prediction of the unchanged model at (z_t(eps_0), t)
  nn::NoGradGuard guard;
  const Tensor z_t = diffusion::forward_diffuse(batch[0].z0, 5, r.targets[0][0], schedule);
  const Tensor pred = diffusion::predict_noise(Var(z_t), 5, &batch[0].cond, w, unet).value();
  CHECK(nn::bit_equal(r.targets[1][0], pred));
  CHECK_FALSE(nn::bit_equal(r.targets[1][0], r.targets[0][0]));
}

TEST_CASE("epoch over image pairs") {
  pixel_cr::PixelCRConfig pc;
  pc.channels = 8;
  pc.heads = 2;
  pc.window_size = 4;
  pc.image_size = 16;
  pc.num_blocks = 2;
  latent_codec::CodecConfig cc;
  cc.latent_dim = 2;
  cc.width = 8;
  cc.codebook_size = 16;
  const auto pixel = pixel_cr::init_weights(pc, 10);
  const auto codec = latent_codec::init_weights(cc, 11);
  const LatentPipeline pipeline{&pixel, pc, &codec, cc, 2.0};

  std::vector<datasets::ImagePair> pairs;
  for (int i = 0; i < 8; ++i) {
    datasets::CloudParams cp;
    cp.seed = 100 + i;
    pairs.push_back(datasets::synthesize_pair(datasets::make_terrain(3, 16, 16, i), cp));
  }
  const auto pixel_before = pixel.params().snapshot();
  const auto codec_before = codec.params().snapshot();

  const auto unet = tiny_unet();
  const auto schedule = diffusion::scaled_schedule(32);
  const auto w = control_phase(12);
  nn::Adam adam(w.control_params(), {.lr = 1e-3});
  nn::Rng rng(13);
  std::vector<std::array<int, 3>> records;
  const EpochStats stats = inr_epoch(pairs, pipeline, 0, 1, w, schedule, unet, {.K = 3}, adam, rng,
                                     [&](int e, int b, int k, double loss) {
                                       CHECK(std::isfinite(loss));
                                       records.push_back({e, b, k});
                                     });
  CHECK(stats.optimizer_steps == 24);
  CHECK(stats.batches == 8);
  REQUIRE(records.size() == 24);
  CHECK(records[5] == std::array<int, 3>{0, 1, 2});

  for (const auto& [name, value] : pixel_before) CHECK(nn::bit_equal(pixel.params().get(name).value(), value));
  for (const auto& [name, value] : codec_before) CHECK(nn::bit_equal(codec.params().get(name).value(), value));

  const LatentSample s = to_latents(pairs[0], pipeline);
  CHECK(s.z0.shape() == nn::Shape{2, 4, 4});
  // latents sit on scaled codebook entries
  const auto q = latent_codec::encode_quantize(pairs[0].clear, codec, cc);
  for (std::size_t i = 0; i < s.z0.size(); ++i) CHECK(s.z0[i] == 2.0 * q.z_d[i]);
}

TEST_CASE("refinement overfits a small latent set") {
  const auto unet = tiny_unet();
  const auto schedule = diffusion::scaled_schedule(32);
  nn::Rng data(14);
  const auto samples = random_samples(4, data);
  const auto w = control_phase(15);
  // give the control branch a trainable path from the start
  nn::Rng init(16);
  for (const auto* f : {&w.control.fuse_in, &w.control.fuse0, &w.control.fuse1, &w.control.fuse_mid}) {
    f->weight.node()->value = init.uniform_tensor(f->weight.shape(), -0.05, 0.05);
  }
  w.trunk_params().set_requires_grad(true);
  nn::Adam adam(w.params(), {.lr = 2e-3});
  nn::Rng rng(17);
  std::vector<double> first;
  for (int epoch = 0; epoch < 60; ++epoch) {
    first.push_back(inr_epoch(std::span<const LatentSample>(samples), epoch, 1, w, schedule, unet,
                              {.K = 3}, adam, rng)
                        .mean_first_loss);
  }
  INFO("first epoch " << first.front() << ", last epoch " << first.back());
  CHECK(first.back() < first.front());
}
