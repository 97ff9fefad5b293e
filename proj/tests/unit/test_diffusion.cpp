#include <doctest.h>

#include <cmath>

#include "idfcr/diffusion.hpp"
#include "idfcr/error.hpp"
#include "support/gradcheck.hpp"
#include "support/posterior_oracle.hpp"

using namespace idfcr;
using namespace idfcr::diffusion;
using nn::Tensor;
using nn::Var;

namespace {

UNetConfig tiny_unet() {
  UNetConfig c;
  c.latent_dim = 2;
  c.base_width = 8;
  c.groups = 2;
  c.heads = 2;
  return c;
}

void randomize(const nn::Conv2d& conv, nn::Rng& rng) {
  const_cast<Var&>(conv.weight).mutable_value() = rng.uniform_tensor(conv.weight.shape(), -0.3, 0.3);
  const_cast<Var&>(conv.bias).mutable_value() = rng.uniform_tensor(conv.bias.shape(), -0.3, 0.3);
}

double mean_sq_diff(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

bool same_values(const nn::ParamSet& a, const std::map<std::string, Tensor>& before) {
  for (const auto& [name, var] : a.entries()) {
    if (!nn::bit_equal(var.value(), before.at(name))) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("schedule") {
  SUBCASE("single step") {
    const NoiseSchedule s = make_schedule(1, 0.01, 0.01);
    CHECK(s.a[0] == doctest::Approx(0.99).epsilon(1e-15));
    CHECK(s.a_bar[0] == doctest::Approx(0.99).epsilon(1e-15));
  }
  SUBCASE("constant 0.5") {
    const NoiseSchedule s = make_schedule(3, 0.5, 0.5);
    CHECK(s.a_bar[0] == 0.5);
    CHECK(s.a_bar[1] == 0.25);
    CHECK(s.a_bar[2] == 0.125);
  }
  SUBCASE("literal defaults against a log-space product") {
    const NoiseSchedule s = make_schedule(64, 1e-4, 0.02);
    double log_sum = 0.0;
    for (int i = 0; i < 64; ++i) log_sum += std::log1p(-(1e-4 + (0.02 - 1e-4) * i / 63.0));
    CHECK(s.a_bar.back() == doctest::Approx(std::exp(log_sum)).epsilon(1e-12));
    CHECK(s.a_bar.back() == doctest::Approx(0.5233181302722669).epsilon(1e-12));
    for (int t = 1; t < 64; ++t) CHECK(s.a_bar[t] < s.a_bar[t - 1]);
  }
  SUBCASE("scaled defaults end near pure noise") {
    const NoiseSchedule s = scaled_schedule(64);
    CHECK(s.beta.front() == doctest::Approx(1e-4 * 1000 / 64));
    CHECK(s.beta.back() == doctest::Approx(0.02 * 1000 / 64));
    CHECK(s.a_bar.back() < 0.05);
    for (int t = 2; t <= 64; ++t) {
      CHECK(std::abs(s.a_bar_at(t) / s.a_bar_at(t - 1) - s.a_at(t)) < 1e-10);
      CHECK(s.a_bar_at(t) < s.a_bar_at(t - 1));
    }
  }
  SUBCASE("invalid ranges") {
    CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), ConfigError);
    CHECK_THROWS_AS(make_schedule(4, 0.0, 0.2), ConfigError);
    CHECK_THROWS_AS(make_schedule(4, 0.3, 0.2), ConfigError);
    CHECK_THROWS_AS(make_schedule(4, 0.1, 1.0), ConfigError);
  }
}

TEST_CASE("forward diffusion") {
  const NoiseSchedule s = scaled_schedule(64);
  nn::Rng rng(1);
  const Tensor z0 = rng.normal_tensor({4, 3, 3});
  const Tensor eps = rng.normal_tensor({4, 3, 3});

  SUBCASE("no-noise limit") {
    NoiseSchedule clean = make_schedule(2, 0.1, 0.1);
    clean.a_bar[0] = 1.0;
    CHECK(nn::bit_equal(forward_diffuse(z0, 1, eps, clean), z0));
  }
  SUBCASE("zero noise shrinks") {
    const Tensor z = forward_diffuse(z0, 10, Tensor(z0.shape()), s);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == std::sqrt(s.a_bar_at(10)) * z0[i]);
  }
  SUBCASE("inversion") {
    for (int t : {1, 7, 32, 64}) {
      const Tensor z = forward_diffuse(z0, t, eps, s);
      const double ab = s.a_bar_at(t);
      for (std::size_t i = 0; i < z.size(); ++i) {
        CHECK(std::abs((z[i] - std::sqrt(1 - ab) * eps[i]) / std::sqrt(ab) - z0[i]) < 1e-5);
      }
    }
  }
  SUBCASE("out of range") {
    CHECK_THROWS_AS(forward_diffuse(z0, 0, eps, s), ParameterError);
    CHECK_THROWS_AS(forward_diffuse(z0, 65, eps, s), ParameterError);
  }
  SUBCASE("marginal statistics") {
    const int t = 20;
    const Tensor base({1, 100, 100}, 1.5);
    const Tensor z = forward_diffuse(base, t, rng.normal_tensor(base.shape()), s);
    const double m = nn::mean(z);
    double var = 0.0;
    for (double v : z.values()) var += (v - m) * (v - m);
    var /= static_cast<double>(z.size() - 1);
    const double ab = s.a_bar_at(t);
    CHECK(std::abs(m - std::sqrt(ab) * 1.5) < 0.05 * std::sqrt(ab) * 1.5);
    CHECK(std::abs(var - (1 - ab)) < 0.05 * (1 - ab));
  }
}

TEST_CASE("posterior") {
  const NoiseSchedule s = scaled_schedule(64);
  nn::Rng rng(2);
  SUBCASE("last step is deterministic") {
    const Posterior p = posterior_params(Tensor({1}, 0.3), Tensor({1}, 0.1), 1, s);
    CHECK(p.sigma2 == 0.0);
  }
  SUBCASE("zero predicted noise") {
    const Tensor z = rng.normal_tensor({2, 2, 2});
    const Posterior p = posterior_params(z, Tensor(z.shape()), 9, s);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(p.mu[i] == doctest::Approx(z[i] / std::sqrt(s.a_at(9))).epsilon(1e-14));
  }
  SUBCASE("t = 0 rejected") {
    CHECK_THROWS_AS(posterior_params(Tensor({1}), Tensor({1}), 0, s), ParameterError);
  }
  SUBCASE("discretized Bayes oracle") {
    for (int trial = 0; trial < 6; ++trial) {
      const int t = rng.uniform_int(2, 64);
      const double z0 = rng.normal();
      const double z_t = std::sqrt(s.a_bar_at(t)) * z0 + std::sqrt(1 - s.a_bar_at(t)) * rng.normal();
      const double eps = (z_t - std::sqrt(s.a_bar_at(t)) * z0) / std::sqrt(1 - s.a_bar_at(t));
      const Posterior p = posterior_params(Tensor({1}, z_t), Tensor({1}, eps), t, s);
      const test::GridPosterior g = test::grid_posterior(z0, z_t, s.a_bar_at(t - 1), s.a_at(t), 20000);
      INFO("t=" << t << " z0=" << z0 << " z_t=" << z_t);
      CHECK(std::abs(p.mu[0] - g.mean) < 1e-3);
      CHECK(std::abs(p.sigma2 - g.variance) < 1e-3);
    }
  }
  SUBCASE("strided steps reduce to single steps on the full grid") {
    const Tensor z = rng.normal_tensor({3});
    const Tensor e = rng.normal_tensor({3});
    const Posterior a = posterior_between(z, e, 5, 4, s);
    const Posterior b = posterior_params(z, e, 5, s);
    CHECK(nn::bit_equal(a.mu, b.mu));
    CHECK(a.sigma2 == b.sigma2);
    CHECK(posterior_between(z, e, 5, 0, s).sigma2 == 0.0);
  }
}

TEST_CASE("sampling grid") {
  const std::vector<int> ts = sampling_timesteps(64, 50);
  CHECK(ts.size() == 50);
  CHECK(ts.front() == 64);
  CHECK(ts.back() == 1);
  for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
  std::vector<int> full = sampling_timesteps(8, 8);
  CHECK(full == std::vector<int>{8, 7, 6, 5, 4, 3, 2, 1});
  CHECK_THROWS_AS(sampling_timesteps(64, 65), ParameterError);
  CHECK_THROWS_AS(sampling_timesteps(64, 0), ParameterError);
}

TEST_CASE("denoiser") {
  const UNetConfig config = tiny_unet();
  const NoiseSchedule s = scaled_schedule(32);
  nn::Rng rng(3);
  const DenoiserWeights w = init_denoiser(config, 4);
  const Tensor z = rng.normal_tensor({2, 4, 4});
  const Tensor cond = rng.normal_tensor({2, 4, 4});

  SUBCASE("output shape") {
    CHECK(predict_noise(Var(z), 3, nullptr, w, config).shape() == z.shape());
    CHECK(predict_noise(Var(z), 3, &cond, w, config).shape() == z.shape());
  }
  SUBCASE("default width") {
    const UNetConfig def;
    const DenoiserWeights big = init_denoiser(def, 1);
    const Tensor lat = rng.normal_tensor({8, 16, 16});
    CHECK(predict_noise(Var(lat), 10, &lat, big, def).shape() == lat.shape());
  }
  SUBCASE("zero fusion is neutral") {
    for (int t : {1, 5, 32}) {
      const Tensor a = predict_noise(Var(z), t, nullptr, w, config).value();
      const Tensor b = predict_noise(Var(z), t, &cond, w, config).value();
      CHECK(nn::bit_equal(a, b));
    }
  }
  SUBCASE("control encoder mirrors trunk encoder") {
    nn::ParamSet trunk, control;
    w.trunk.encoder.collect(trunk, "");
    w.control.encoder.collect(control, "");
    REQUIRE(trunk.size() == control.size());
    for (const auto& [name, var] : trunk.entries()) {
      CHECK(nn::bit_equal(var.value(), control.get(name).value()));
    }
    for (const auto* f : {&w.control.fuse_in, &w.control.fuse0, &w.control.fuse1, &w.control.fuse_mid}) {
      for (double v : f->weight.value().values()) CHECK(v == 0.0);
      for (double v : f->bias.value().values()) CHECK(v == 0.0);
    }
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(predict_noise(Var(Tensor({3, 4, 4})), 1, nullptr, w, config), ConfigError);
    const Tensor bad({2, 2, 2});
    CHECK_THROWS_AS(predict_noise(Var(z), 1, &bad, w, config), ConfigError);
  }
  SUBCASE("trunk gradients") {
    const std::vector<LatentSample> batch{{z, Tensor()}};
    const std::vector<Tensor> eps{rng.normal_tensor(z.shape())};
    const auto samples = test::check_gradients(
        [&] { return denoising_loss(batch, 7, eps, w, s, config); },
        {{"trunk.time1.weight", w.trunk.time1.weight},
         {"trunk.null_embedding", w.trunk.null_embedding},
         {"trunk.encoder.down1.conv1.weight", w.trunk.encoder.down1.conv1.weight},
         {"trunk.encoder.mid_attn.qkv.weight", w.trunk.encoder.mid_attn.qkv.weight},
         {"trunk.up0.skip.weight", w.trunk.up0.skip.weight},
         {"trunk.conv_out.weight", w.trunk.conv_out.weight}},
        2, rng);
    for (const auto& x : samples) {
      INFO(x.name << "[" << x.index << "] " << x.analytic << " vs " << x.numeric);
      CHECK(x.rel_error < 1e-3);
    }
  }
}

TEST_CASE("control branch gradients") {
  const UNetConfig config = tiny_unet();
  const NoiseSchedule s = scaled_schedule(32);
  nn::Rng rng(5);
  const DenoiserWeights w = init_denoiser(config, 6);
  // fusion starts at zero, which would leave every upstream control weight
  // with a zero gradient
  for (const auto* f : {&w.control.fuse_in, &w.control.fuse0, &w.control.fuse1, &w.control.fuse_mid}) {
    randomize(*f, rng);
  }
  w.freeze_trunk();
  const std::vector<LatentSample> batch{{rng.normal_tensor({2, 4, 4}), rng.normal_tensor({2, 4, 4})}};
  const std::vector<Tensor> eps{rng.normal_tensor({2, 4, 4})};
  const auto samples = test::check_gradients(
      [&] { return denoising_loss(batch, 9, eps, w, s, config); },
      {{"control.cond_in.weight", w.control.cond_in.weight},
       {"control.cond_out.weight", w.control.cond_out.weight},
       {"control.encoder.conv_in.weight", w.control.encoder.conv_in.weight},
       {"control.encoder.down0.conv2.weight", w.control.encoder.down0.conv2.weight},
       {"control.encoder.mid_attn.proj.weight", w.control.encoder.mid_attn.proj.weight},
       {"control.fuse0.weight", w.control.fuse0.weight},
       {"control.fuse_mid.bias", w.control.fuse_mid.bias}},
      2, rng);
  CHECK(samples.size() >= 10);
  for (const auto& x : samples) {
    INFO(x.name << "[" << x.index << "] " << x.analytic << " vs " << x.numeric);
    CHECK(x.rel_error < 1e-3);
  }
  for (const auto& [name, var] : w.trunk_params().entries()) CHECK_FALSE(var.has_grad());
}

TEST_CASE("training step") {
  const UNetConfig config = tiny_unet();
  const NoiseSchedule s = scaled_schedule(32);
  nn::Rng rng(7);
  const DenoiserWeights w = init_denoiser(config, 8);
  const std::vector<LatentSample> batch{{rng.normal_tensor({2, 4, 4}), Tensor()},
                                        {rng.normal_tensor({2, 4, 4}), Tensor()}};

  SUBCASE("loss is the mean squared noise error") {
    nn::Adam adam(w.trunk_params(), {.lr = 0.0});
    nn::Rng draw(9);
    nn::Rng replay = draw;
    const StepResult r = train_step(batch, w, s, config, adam, draw);
    const int t = replay.uniform_int(1, s.T);
    CHECK(r.t == t);
    double expected = 0.0;
    for (int i = 0; i < 2; ++i) {
      const Tensor eps = replay.normal_tensor({2, 4, 4});
      expected += mean_sq_diff(eps, r.eps_pred[i]) / 2.0;
    }
    CHECK(r.loss == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("zero predictor gives mean eps squared") {
    w.trunk.conv_out.weight.node()->value.fill(0.0);
    w.trunk.conv_out.bias.node()->value.fill(0.0);
    nn::Adam adam(w.trunk_params(), {.lr = 0.0});
    const std::vector<Tensor> eps{rng.normal_tensor({2, 4, 4}), rng.normal_tensor({2, 4, 4})};
    const StepResult r = train_step_at(batch, 4, eps, w, s, config, adam);
    const Tensor zeros({2, 4, 4});
    CHECK(r.loss == doctest::Approx((mean_sq_diff(eps[0], zeros) + mean_sq_diff(eps[1], zeros)) / 2));
  }
  SUBCASE("control phase leaves the trunk untouched") {
    w.freeze_trunk();
    const auto before = w.trunk_params().snapshot();
    nn::Adam adam(w.control_params(), {.lr = 1e-3});
    const std::vector<LatentSample> cb{{batch[0].z0, rng.normal_tensor({2, 4, 4})}};
    for (int i = 0; i < 5; ++i) train_step(cb, w, s, config, adam, rng);
    CHECK(same_values(w.trunk_params(), before));
    CHECK(adam.steps() == 5);
  }
}

TEST_CASE("sampler") {
  const UNetConfig config = tiny_unet();
  const NoiseSchedule s = scaled_schedule(32);
  const DenoiserWeights w = init_denoiser(config, 10);
  const Tensor cond = nn::Rng(11).normal_tensor({2, 4, 4});

  SUBCASE("seeded runs are identical") {
    nn::Rng a(12), b(12);
    const Tensor x = ddpm_sample({2, 4, 4}, &cond, w, s, config, a, 8);
    const Tensor y = ddpm_sample({2, 4, 4}, &cond, w, s, config, b, 8);
    CHECK(nn::bit_equal(x, y));
    CHECK(nn::all_finite(x));
  }
  SUBCASE("clipping the implied clean latent") {
    nn::Rng a(12), b(12), c(12);
    const Tensor plain = ddpm_sample({2, 4, 4}, &cond, w, s, config, a, 8);
    const Tensor loose = ddpm_sample({2, 4, 4}, &cond, w, s, config, b, 8, 1e9);
    CHECK(nn::max_abs_diff(plain, loose) < 1e-9);
    // the last step lands on t = 0, where the mean is the clamped estimate
    const Tensor tight = ddpm_sample({2, 4, 4}, &cond, w, s, config, c, 8, 0.25);
    for (double v : tight.values()) CHECK(std::abs(v) <= 0.25 + 1e-12);
  }
  SUBCASE("too many steps") {
    nn::Rng r(1);
    CHECK_THROWS_AS(ddpm_sample({2, 4, 4}, &cond, w, s, config, r, 33), ParameterError);
  }
  SUBCASE("exact noise oracle inverts in one step") {
    // with eps known, mu at the final retained step is the clean latent
    nn::Rng r(13);
    const Tensor z0 = r.normal_tensor({2, 4, 4});
    const Tensor eps = r.normal_tensor({2, 4, 4});
    for (int t : {1, 4, 32}) {
      const Tensor z_t = forward_diffuse(z0, t, eps, s);
      const Posterior p = posterior_between(z_t, eps, t, 0, s);
      CHECK(p.sigma2 == 0.0);
      CHECK(nn::max_abs_diff(p.mu, z0) < 1e-5);
    }
  }
}

TEST_CASE("trunk pretraining") {
  const UNetConfig config = tiny_unet();
  const NoiseSchedule s = scaled_schedule(32);
  nn::Rng rng(14);
  const DenoiserWeights w = init_denoiser(config, 15);
  std::vector<Tensor> latents;
  for (int i = 0; i < 4; ++i) latents.push_back(rng.normal_tensor({2, 4, 4}));

  // fixed evaluation draws so the comparison is not dominated by t sampling
  auto probe_loss = [&] {
    nn::NoGradGuard guard;
    nn::Rng probe(99);
    double total = 0.0;
    for (int t = 1; t <= s.T; ++t) {
      for (const Tensor& z0 : latents) {
        const Tensor eps = probe.normal_tensor(z0.shape());
        const Tensor pred = predict_noise(Var(forward_diffuse(z0, t, eps, s)), t, nullptr, w, config).value();
        total += mean_sq_diff(pred, eps);
      }
    }
    return total / (s.T * latents.size());
  };
  const double before = probe_loss();
  std::vector<std::int64_t> logged;
  pretrain_trunk(latents, w, s, config, {.steps = 1500, .batch_size = 2, .lr = 2e-3}, rng,
                 [&](std::int64_t step, double) { logged.push_back(step); });
  const double after = probe_loss();
  INFO("probe loss " << before << " -> " << after);
  CHECK(after < 0.5 * before);
  CHECK(logged.size() == 1500);

  SUBCASE("clone and freeze") {
    nn::ParamSet trunk, control;
    w.trunk.encoder.collect(trunk, "");
    w.control.encoder.collect(control, "");
    for (const auto& [name, var] : trunk.entries()) {
      CHECK(nn::bit_equal(var.value(), control.get(name).value()));
    }
    for (const auto& [name, var] : w.trunk_params().entries()) CHECK_FALSE(var.requires_grad());

    const std::vector<LatentSample> batch{{latents[0], latents[1]}};
    const std::vector<Tensor> eps{rng.normal_tensor({2, 4, 4})};
    nn::backward(denoising_loss(batch, 3, eps, w, s, config));
    for (const auto& [name, var] : w.trunk_params().entries()) {
      CHECK(nn::max_abs_diff(var.grad(), Tensor(var.shape())) == 0.0);
    }
  }
}
