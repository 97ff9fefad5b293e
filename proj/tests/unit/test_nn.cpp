#include <doctest.h>

#include <cmath>

#include "idfcr/error.hpp"
#include "idfcr/nn/layers.hpp"
#include "idfcr/nn/ops.hpp"
#include "idfcr/nn/optim.hpp"
#include "support/gradcheck.hpp"

using namespace idfcr;
using namespace idfcr::nn;

namespace {

Var random_param(Rng& rng, const Shape& shape, double scale = 1.0) {
  return make_param(rng.normal_tensor(shape) * scale);
}

// Projects an op output onto a fixed random direction so every entry matters.
std::function<Var()> projected(std::function<Var()> op, Rng& rng) {
  Tensor probe;
  return [op = std::move(op), probe, seed = rng.next()]() mutable {
    Var out = op();
    if (probe.empty()) {
      Rng local(seed);
      probe = local.normal_tensor(out.shape());
    }
    return sum(mul(out, Var(probe)));
  };
}

void expect_gradients(const std::function<Var()>& loss,
                      const std::vector<std::pair<std::string, Var>>& params, Rng& rng) {
  const auto samples = test::check_gradients(loss, params, 12, rng);
  for (const auto& s : samples) {
    INFO(s.name << "[" << s.index << "] analytic=" << s.analytic << " numeric=" << s.numeric);
    CHECK(s.rel_error < 1e-5);
  }
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  Rng rng(1);
  Var a = random_param(rng, {2, 3, 4});
  Var b = random_param(rng, {2, 3, 4});
  Var m = random_param(rng, {1, 3, 4});
  Var v = random_param(rng, {2});
  expect_gradients(projected([&] { return mul(add(a, b), sub(a, scale(b, 0.3))); }, rng),
                   {{"a", a}, {"b", b}}, rng);
  expect_gradients(projected([&] { return add_channel(mul_spatial(a, m), v); }, rng),
                   {{"a", a}, {"m", m}, {"v", v}}, rng);
  expect_gradients(projected([&] { return gelu(a); }, rng), {{"a", a}}, rng);
  expect_gradients(projected([&] { return silu(a); }, rng), {{"a", a}}, rng);
  expect_gradients(projected([&] { return sigmoid(a); }, rng), {{"a", a}}, rng);
  expect_gradients([&] { return mse_loss(a, b); }, {{"a", a}, {"b", b}}, rng);
  expect_gradients([&] { return l1_loss(a, b); }, {{"a", a}, {"b", b}}, rng);
}

TEST_CASE("structural ops match finite differences") {
  Rng rng(2);
  Var a = random_param(rng, {2, 3, 4});
  Var b = random_param(rng, {3, 3, 4});
  expect_gradients(projected([&] { return concat_channels(a, b); }, rng), {{"a", a}, {"b", b}},
                   rng);
  expect_gradients(projected([&] { return upsample_nearest(a, 2); }, rng), {{"a", a}}, rng);
  std::vector<std::int32_t> index{5, 5, 0, 23, 11};
  expect_gradients(projected([&] { return gather(a, index, {5}); }, rng), {{"a", a}}, rng);
}

TEST_CASE("convolutions match finite differences") {
  Rng rng(3);
  Var x = random_param(rng, {3, 7, 6});
  Var w = random_param(rng, {4, 3, 3, 3}, 0.3);
  Var bias = random_param(rng, {4});
  for (int stride : {1, 2}) {
    expect_gradients(projected([&] { return conv2d(x, w, bias, stride, 1); }, rng),
                     {{"x", x}, {"w", w}, {"b", bias}}, rng);
  }
  Var wt = random_param(rng, {3, 2, 4, 4}, 0.3);
  Var bt = random_param(rng, {2});
  expect_gradients(projected([&] { return conv_transpose2d(x, wt, bt, 2, 1); }, rng),
                   {{"x", x}, {"w", wt}, {"b", bt}}, rng);
}

TEST_CASE("transposed convolution is the adjoint of convolution") {
  Rng rng(4);
  Tensor x = rng.normal_tensor({3, 8, 8});
  Tensor y = rng.normal_tensor({2, 4, 4});
  Tensor w = rng.normal_tensor({2, 3, 4, 4});
  // <conv(x), y> == <x, conv_T(y)> with the weight reinterpreted as [Cin=2, Cout=3].
  const Tensor cx = conv2d(Var(x), Var(w), Var(), 2, 1).value();
  const Tensor ty = conv_transpose2d(Var(y), Var(w), Var(), 2, 1).value();
  CHECK(ty.shape() == x.shape());
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("linear and normalization layers match finite differences") {
  Rng rng(5);
  Var x = random_param(rng, {5, 6});
  Var w = random_param(rng, {4, 6});
  Var bias = random_param(rng, {4});
  expect_gradients(projected([&] { return linear(x, w, bias); }, rng),
                   {{"x", x}, {"w", w}, {"b", bias}}, rng);
  Var g = random_param(rng, {6});
  Var be = random_param(rng, {6});
  expect_gradients(projected([&] { return layer_norm(x, g, be); }, rng),
                   {{"x", x}, {"g", g}, {"b", be}}, rng);
  Var img = random_param(rng, {6, 3, 3});
  expect_gradients(projected([&] { return group_norm(img, 3, g, be); }, rng),
                   {{"x", img}, {"g", g}, {"b", be}}, rng);
}

TEST_CASE("window attention matches finite differences and normalizes rows") {
  Rng rng(6);
  const int n = 4, heads = 2, channels = 6;
  Var qkv = random_param(rng, {3 * n, 3 * channels});
  Var bias = random_param(rng, {heads, n, n});
  std::vector<std::uint8_t> mask(3 * n * n, 0);
  mask[1] = 1;           // window 0, row 0 may not see token 1
  mask[n * n + 6] = 1;   // window 1, row 1 may not see token 2
  Tensor probs;
  AttentionSpec spec{n, heads, &mask, &probs};
  expect_gradients(projected([&] { return window_attention(qkv, bias, spec); }, rng),
                   {{"qkv", qkv}, {"bias", bias}}, rng);
  window_attention(qkv, bias, spec);
  CHECK(probs.shape() == Shape{3, heads, n, n});
  for (int row = 0; row < 3 * heads * n; ++row) {
    double total = 0.0;
    for (int j = 0; j < n; ++j) total += probs[row * n + j];
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  CHECK(probs[1] == 0.0);
}

TEST_CASE("straight-through forwards the quantized value and passes gradient through") {
  Var zc = make_param(Tensor({3}, std::vector<double>{0.1, 0.2, 0.3}));
  Var zd(Tensor({3}, std::vector<double>{0.0, 1.0, 0.0}));
  Var out = straight_through(zc, zd);
  CHECK(bit_equal(out.value(), zd.value()));
  backward(sum(scale(out, 2.0)));
  CHECK(zc.grad() == Tensor({3}, 2.0));
}

TEST_CASE("no-grad mode builds no graph") {
  Var p = make_param(Tensor({2}, 1.0));
  NoGradGuard guard;
  Var y = scale(p, 3.0);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape errors are config errors") {
  Var a(Tensor({2, 3}));
  Var b(Tensor({3, 2}));
  CHECK_THROWS_AS(add(a, b), ConfigError);
  CHECK_THROWS_AS(conv2d(Var(Tensor({2, 4, 4})), Var(Tensor({1, 3, 3, 3})), Var(), 1, 1),
                  ConfigError);
}

TEST_CASE("adam skips frozen parameters and moves trainable ones") {
  ParamSet params;
  Var live = make_param(Tensor({2}, 1.0));
  Var frozen = make_param(Tensor({2}, 1.0));
  params.add("live", live);
  params.add("frozen", frozen);
  frozen.set_requires_grad(false);
  Adam adam(params, {.lr = 0.1});
  backward(sum(add(live, frozen)));
  adam.step();
  CHECK(live.value()[0] == doctest::Approx(0.9));
  CHECK(frozen.value()[0] == 1.0);
}
