#include "idfcr/nn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <utility>

#include "idfcr/error.hpp"

namespace idfcr::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

MatMap as_matrix(Tensor& t, int rows, int cols) { return MatMap(t.data(), rows, cols); }
ConstMatMap as_matrix(const Tensor& t, int rows, int cols) {
  return ConstMatMap(t.data(), rows, cols);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                      to_string(b.shape()));
  }
}

void require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ConfigError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                      to_string(x.shape()));
  }
}

bool needs(const Node& node, std::size_t i) { return node.inputs[i]->requires_grad; }
Tensor& grad_of(Node& node, std::size_t i) { return node.inputs[i]->grad_buffer(); }

template <typename Fwd, typename Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  const Tensor& in = x.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_result(std::move(out), {x}, [deriv](Node& self) {
    const Tensor& in = self.inputs[0]->value;
    Tensor& g = grad_of(self, 0);
    for (std::size_t i = 0; i < in.size(); ++i) g[i] += self.grad[i] * deriv(in[i], self.value[i]);
  });
}

int conv_out_size(int in, int k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

// cols[(c*k + ky)*k + kx, oy*wo + ox] = x[c, oy*s - p + ky, ox*s - p + kx]
void im2col(const double* x, int channels, int h, int w, int k, int stride, int padding, int ho,
            int wo, double* cols) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + (static_cast<std::size_t>(c * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - padding + ky;
          double* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - padding + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, int channels, int h, int w, int k, int stride, int padding,
            int ho, int wo, double* x) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + (static_cast<std::size_t>(c * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * wo;
          double* dst = x + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - padding + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    if (needs(self, 0)) grad_of(self, 0) += self.grad;
    if (needs(self, 1)) grad_of(self, 1) += self.grad;
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    if (needs(self, 0)) grad_of(self, 0) += self.grad;
    if (needs(self, 1)) grad_of(self, 1) -= self.grad;
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (needs(self, 0)) {
      Tensor& g = grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (needs(self, 1)) {
      Tensor& g = grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Var mul_spatial(const Var& x, const Var& m) {
  require_rank(x, 3, "mul_spatial");
  require_rank(m, 3, "mul_spatial");
  if (m.dim(0) != 1 || m.dim(1) != x.dim(1) || m.dim(2) != x.dim(2)) {
    throw ConfigError("mul_spatial: map " + to_string(m.shape()) + " does not match " +
                      to_string(x.shape()));
  }
  const int channels = x.dim(0);
  const std::size_t plane = m.size();
  Tensor out(x.shape());
  for (int c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] = x.value()[c * plane + p] * m.value()[p];
  }
  return make_result(std::move(out), {x, m}, [channels, plane](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& mv = self.inputs[1]->value;
    if (needs(self, 0)) {
      Tensor& g = grad_of(self, 0);
      for (int c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) g[c * plane + p] += self.grad[c * plane + p] * mv[p];
    }
    if (needs(self, 1)) {
      Tensor& g = grad_of(self, 1);
      for (int c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) g[p] += self.grad[c * plane + p] * xv[c * plane + p];
    }
  });
}

Var add_channel(const Var& x, const Var& v) {
  require_rank(x, 3, "add_channel");
  if (v.size() != static_cast<std::size_t>(x.dim(0))) {
    throw ConfigError("add_channel: vector of " + std::to_string(v.size()) +
                      " entries for " + to_string(x.shape()));
  }
  const int channels = x.dim(0);
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out = x.value();
  for (int c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < plane; ++p) out[c * plane + p] += v.value()[c];
  return make_result(std::move(out), {x, v}, [channels, plane](Node& self) {
    if (needs(self, 0)) grad_of(self, 0) += self.grad;
    if (needs(self, 1)) {
      Tensor& g = grad_of(self, 1);
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) acc += self.grad[c * plane + p];
        g[c] += acc;
      }
    }
  });
}

Var sigmoid(const Var& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var gelu(const Var& x) {
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Var silu(const Var& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Var sum(const Var& x) {
  return make_result(Tensor({1}, nn::sum(x.value())), {x}, [](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (double& v : g.values()) v += self.grad[0];
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.size());
  return make_result(Tensor({1}, nn::sum(x.value()) / n), {x}, [n](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (double& v : g.values()) v += self.grad[0] / n;
  });
}

Var l1_loss(const Var& a, const Var& b) {
  require_same_shape(a, b, "l1_loss");
  const double n = static_cast<double>(a.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a.value()[i] - b.value()[i]);
  return make_result(Tensor({1}, acc / n), {a, b}, [n](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    const double g0 = self.grad[0] / n;
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double d = av[i] - bv[i];
      const double s = d > 0.0 ? g0 : (d < 0.0 ? -g0 : 0.0);
      if (needs(self, 0)) grad_of(self, 0)[i] += s;
      if (needs(self, 1)) grad_of(self, 1)[i] -= s;
    }
  });
}

Var mse_loss(const Var& a, const Var& b) {
  require_same_shape(a, b, "mse_loss");
  const double n = static_cast<double>(a.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  return make_result(Tensor({1}, acc / n), {a, b}, [n](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    const double g0 = 2.0 * self.grad[0] / n;
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double d = g0 * (av[i] - bv[i]);
      if (needs(self, 0)) grad_of(self, 0)[i] += d;
      if (needs(self, 1)) grad_of(self, 1)[i] -= d;
    }
  });
}

Var detach(const Var& x) { return Var(x.value()); }

Var straight_through(const Var& continuous, const Var& quantized) {
  require_same_shape(continuous, quantized, "straight_through");
  return make_result(quantized.value(), {continuous},
                     [](Node& self) { grad_of(self, 0) += self.grad; });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshape(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var gather(const Var& x, std::vector<std::int32_t> index, Shape out_shape) {
  if (numel(out_shape) != index.size()) {
    throw ConfigError("gather: index of " + std::to_string(index.size()) +
                      " entries for shape " + to_string(out_shape));
  }
  const auto limit = static_cast<std::int32_t>(x.size());
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= limit) throw ConfigError("gather: index out of range");
    out[i] = x.value()[index[i]];
  }
  return make_result(std::move(out), {x}, [index = std::move(index)](Node& self) {
    Tensor& g = grad_of(self, 0);
    for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw ConfigError("concat_channels: spatial mismatch " + to_string(a.shape()) + " vs " +
                      to_string(b.shape()));
  }
  Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.value().data(), a.value().data() + a.size(), out.data());
  std::copy(b.value().data(), b.value().data() + b.size(), out.data() + a.size());
  const std::size_t split = a.size();
  return make_result(std::move(out), {a, b}, [split](Node& self) {
    if (needs(self, 0)) {
      Tensor& g = grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (needs(self, 1)) {
      Tensor& g = grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[split + i];
    }
  });
}

Var upsample_nearest(const Var& x, int factor) {
  require_rank(x, 3, "upsample_nearest");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = h * factor, wo = w * factor;
  Tensor out({c, ho, wo});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx) out.at(ch, y, xx) = x.value().at(ch, y / factor, xx / factor);
  return make_result(std::move(out), {x}, [factor](Node& self) {
    Tensor& g = grad_of(self, 0);
    const int c = g.dim(0), ho = self.grad.dim(1), wo = self.grad.dim(2);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx) g.at(ch, y / factor, xx / factor) += self.grad.at(ch, y, xx);
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k) {
    throw ConfigError("conv2d: weight " + to_string(weight.shape()) + " incompatible with input " +
                      to_string(x.shape()));
  }
  if (bias && bias.size() != static_cast<std::size_t>(cout)) {
    throw ConfigError("conv2d: bias size mismatch");
  }
  const int ho = conv_out_size(h, k, stride, padding);
  const int wo = conv_out_size(w, k, stride, padding);
  if (ho <= 0 || wo <= 0) throw ConfigError("conv2d: input " + to_string(x.shape()) + " too small");
  const int patch = cin * k * k;
  const int plane = ho * wo;

  Tensor cols({patch, plane});
  im2col(x.value().data(), cin, h, w, k, stride, padding, ho, wo, cols.data());
  Tensor out({cout, ho, wo});
  auto out_m = as_matrix(out, cout, plane);
  out_m.noalias() = as_matrix(weight.value(), cout, patch) * as_matrix(cols, patch, plane);
  if (bias) {
    for (int c = 0; c < cout; ++c) out_m.row(c).array() += bias.value()[c];
  }

  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  return make_result(
      std::move(out), inputs,
      [cols = std::move(cols), cin, h, w, k, stride, padding, ho, wo, cout, patch,
       plane](Node& self) {
        auto g_out = as_matrix(std::as_const(self.grad), cout, plane);
        if (needs(self, 1)) {
          as_matrix(grad_of(self, 1), cout, patch).noalias() +=
              g_out * as_matrix(cols, patch, plane).transpose();
        }
        if (self.inputs.size() > 2 && needs(self, 2)) {
          Tensor& gb = grad_of(self, 2);
          for (int c = 0; c < cout; ++c) gb[c] += g_out.row(c).sum();
        }
        if (needs(self, 0)) {
          Tensor g_cols({patch, plane});
          as_matrix(g_cols, patch, plane).noalias() =
              as_matrix(self.inputs[1]->value, cout, patch).transpose() * g_out;
          col2im(g_cols.data(), cin, h, w, k, stride, padding, ho, wo, grad_of(self, 0).data());
        }
      });
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride,
                     int padding) {
  require_rank(x, 3, "conv_transpose2d");
  require_rank(weight, 4, "conv_transpose2d");
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = weight.dim(1), k = weight.dim(2);
  if (weight.dim(0) != cin || weight.dim(3) != k) {
    throw ConfigError("conv_transpose2d: weight " + to_string(weight.shape()) +
                      " incompatible with input " + to_string(x.shape()));
  }
  if (bias && bias.size() != static_cast<std::size_t>(cout)) {
    throw ConfigError("conv_transpose2d: bias size mismatch");
  }
  const int ho = (h - 1) * stride - 2 * padding + k;
  const int wo = (w - 1) * stride - 2 * padding + k;
  if (ho <= 0 || wo <= 0) throw ConfigError("conv_transpose2d: empty output");
  const int patch = cout * k * k;
  const int plane = h * w;

  Tensor cols({patch, plane});
  as_matrix(cols, patch, plane).noalias() =
      as_matrix(weight.value(), cin, patch).transpose() * as_matrix(x.value(), cin, plane);
  Tensor out({cout, ho, wo});
  col2im(cols.data(), cout, ho, wo, k, stride, padding, h, w, out.data());
  if (bias) {
    auto out_m = as_matrix(out, cout, ho * wo);
    for (int c = 0; c < cout; ++c) out_m.row(c).array() += bias.value()[c];
  }

  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  return make_result(
      std::move(out), inputs,
      [cin, h, w, k, stride, padding, ho, wo, cout, patch, plane](Node& self) {
        Tensor g_cols({patch, plane});
        im2col(self.grad.data(), cout, ho, wo, k, stride, padding, h, w, g_cols.data());
        auto gc = as_matrix(std::as_const(g_cols), patch, plane);
        if (needs(self, 0)) {
          as_matrix(grad_of(self, 0), cin, plane).noalias() +=
              as_matrix(self.inputs[1]->value, cin, patch) * gc;
        }
        if (needs(self, 1)) {
          as_matrix(grad_of(self, 1), cin, patch).noalias() +=
              as_matrix(self.inputs[0]->value, cin, plane) * gc.transpose();
        }
        if (self.inputs.size() > 2 && needs(self, 2)) {
          Tensor& gb = grad_of(self, 2);
          auto g_out = as_matrix(std::as_const(self.grad), cout, ho * wo);
          for (int c = 0; c < cout; ++c) gb[c] += g_out.row(c).sum();
        }
      });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int n = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ConfigError("linear: weight " + to_string(weight.shape()) + " incompatible with input " +
                      to_string(x.shape()));
  }
  if (bias && bias.size() != static_cast<std::size_t>(cout)) {
    throw ConfigError("linear: bias size mismatch");
  }
  Tensor out({n, cout});
  auto out_m = as_matrix(out, n, cout);
  out_m.noalias() = as_matrix(x.value(), n, cin) * as_matrix(weight.value(), cout, cin).transpose();
  if (bias) out_m.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data(), cout);

  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(bias);
  return make_result(std::move(out), inputs, [n, cin, cout](Node& self) {
    auto g_out = as_matrix(std::as_const(self.grad), n, cout);
    if (needs(self, 0)) {
      as_matrix(grad_of(self, 0), n, cin).noalias() +=
          g_out * as_matrix(self.inputs[1]->value, cout, cin);
    }
    if (needs(self, 1)) {
      as_matrix(grad_of(self, 1), cout, cin).noalias() +=
          g_out.transpose() * as_matrix(self.inputs[0]->value, n, cin);
    }
    if (self.inputs.size() > 2 && needs(self, 2)) {
      Eigen::Map<Eigen::RowVectorXd>(grad_of(self, 2).data(), cout) += g_out.colwise().sum();
    }
  });
}

namespace {

struct NormStats {
  std::vector<double> inv_std;
  Tensor normalized;
};

}  // namespace

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const int n = x.dim(0), c = x.dim(1);
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c)) {
    throw ConfigError("layer_norm: affine size mismatch");
  }
  NormStats stats{std::vector<double>(n), Tensor({n, c})};
  Tensor out({n, c});
  for (int r = 0; r < n; ++r) {
    const double* row = x.value().data() + static_cast<std::size_t>(r) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    stats.inv_std[r] = inv;
    for (int j = 0; j < c; ++j) {
      const double xh = (row[j] - mu) * inv;
      stats.normalized[static_cast<std::size_t>(r) * c + j] = xh;
      out[static_cast<std::size_t>(r) * c + j] = gamma.value()[j] * xh + beta.value()[j];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [stats = std::move(stats), n, c](Node& self) {
                       const Tensor& gam = self.inputs[1]->value;
                       for (int r = 0; r < n; ++r) {
                         const std::size_t base = static_cast<std::size_t>(r) * c;
                         double m1 = 0.0, m2 = 0.0;
                         for (int j = 0; j < c; ++j) {
                           const double gx = self.grad[base + j] * gam[j];
                           m1 += gx;
                           m2 += gx * stats.normalized[base + j];
                         }
                         m1 /= c;
                         m2 /= c;
                         if (needs(self, 0)) {
                           Tensor& g = grad_of(self, 0);
                           for (int j = 0; j < c; ++j) {
                             const double gx = self.grad[base + j] * gam[j];
                             g[base + j] += stats.inv_std[r] *
                                            (gx - m1 - stats.normalized[base + j] * m2);
                           }
                         }
                       }
                       if (needs(self, 1)) {
                         Tensor& g = grad_of(self, 1);
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           g[i % c] += self.grad[i] * stats.normalized[i];
                       }
                       if (needs(self, 2)) {
                         Tensor& g = grad_of(self, 2);
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i];
                       }
                     });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 3, "group_norm");
  const int c = x.dim(0);
  if (groups <= 0 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c)) {
    throw ConfigError("group_norm: affine size mismatch");
  }
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  const std::size_t group_size = plane * (c / groups);
  NormStats stats{std::vector<double>(groups), Tensor(x.shape())};
  Tensor out(x.shape());
  for (int gi = 0; gi < groups; ++gi) {
    const std::size_t base = gi * group_size;
    double mu = 0.0;
    for (std::size_t i = 0; i < group_size; ++i) mu += x.value()[base + i];
    mu /= static_cast<double>(group_size);
    double var = 0.0;
    for (std::size_t i = 0; i < group_size; ++i) {
      const double d = x.value()[base + i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(group_size);
    const double inv = 1.0 / std::sqrt(var + eps);
    stats.inv_std[gi] = inv;
    for (std::size_t i = 0; i < group_size; ++i) {
      const std::size_t idx = base + i;
      const int ch = static_cast<int>(idx / plane);
      const double xh = (x.value()[idx] - mu) * inv;
      stats.normalized[idx] = xh;
      out[idx] = gamma.value()[ch] * xh + beta.value()[ch];
    }
  }
  return make_result(
      std::move(out), {x, gamma, beta},
      [stats = std::move(stats), groups, group_size, plane](Node& self) {
        const Tensor& gam = self.inputs[1]->value;
        const double count = static_cast<double>(group_size);
        if (needs(self, 0)) {
          Tensor& g = grad_of(self, 0);
          for (int gi = 0; gi < groups; ++gi) {
            const std::size_t base = gi * group_size;
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < group_size; ++i) {
              const std::size_t idx = base + i;
              const double gx = self.grad[idx] * gam[idx / plane];
              m1 += gx;
              m2 += gx * stats.normalized[idx];
            }
            m1 /= count;
            m2 /= count;
            for (std::size_t i = 0; i < group_size; ++i) {
              const std::size_t idx = base + i;
              const double gx = self.grad[idx] * gam[idx / plane];
              g[idx] += stats.inv_std[gi] * (gx - m1 - stats.normalized[idx] * m2);
            }
          }
        }
        if (needs(self, 1)) {
          Tensor& g = grad_of(self, 1);
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i / plane] += self.grad[i] * stats.normalized[i];
        }
        if (needs(self, 2)) {
          Tensor& g = grad_of(self, 2);
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i / plane] += self.grad[i];
        }
      });
}

Var window_attention(const Var& qkv, const Var& bias, const AttentionSpec& spec) {
  require_rank(qkv, 2, "window_attention");
  const int tokens = qkv.dim(0);
  const int n = spec.window_tokens;
  const int heads = spec.heads;
  if (n <= 0 || tokens % n != 0) {
    throw ConfigError("window_attention: " + std::to_string(tokens) +
                      " tokens not divisible into windows of " + std::to_string(n));
  }
  if (qkv.dim(1) % (3 * heads) != 0) {
    throw ConfigError("window_attention: qkv width not divisible by 3*heads");
  }
  const int channels = qkv.dim(1) / 3;
  const int head_dim = channels / heads;
  const int windows = tokens / n;
  if (bias && bias.shape() != Shape{heads, n, n}) {
    throw ConfigError("window_attention: bias shape " + to_string(bias.shape()));
  }
  if (spec.mask && spec.mask->size() != static_cast<std::size_t>(windows) * n * n) {
    throw ConfigError("window_attention: mask size mismatch");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const int stride = 3 * channels;
  const std::size_t nn = static_cast<std::size_t>(n) * n;

  Tensor probs({windows, heads, n, n});
  Tensor out({tokens, channels});
  const double* base = qkv.value().data();
  RowMat scores(n, n);
  for (int win = 0; win < windows; ++win) {
    const double* wbase = base + static_cast<std::size_t>(win) * n * stride;
    const std::uint8_t* mask = spec.mask ? spec.mask->data() + win * nn : nullptr;
    for (int hd = 0; hd < heads; ++hd) {
      ConstStridedMap q(wbase + hd * head_dim, n, head_dim, Eigen::OuterStride<>(stride));
      ConstStridedMap k(wbase + channels + hd * head_dim, n, head_dim, Eigen::OuterStride<>(stride));
      ConstStridedMap v(wbase + 2 * channels + hd * head_dim, n, head_dim,
                        Eigen::OuterStride<>(stride));
      scores.noalias() = scale * (q * k.transpose());
      if (bias) scores += ConstMatMap(bias.value().data() + hd * nn, n, n);
      MatMap p(probs.data() + (static_cast<std::size_t>(win) * heads + hd) * nn, n, n);
      for (int i = 0; i < n; ++i) {
        double row_max = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
          if (mask && mask[i * n + j]) continue;
          row_max = std::max(row_max, scores(i, j));
        }
        double total = 0.0;
        for (int j = 0; j < n; ++j) {
          const double e = (mask && mask[i * n + j]) ? 0.0 : std::exp(scores(i, j) - row_max);
          p(i, j) = e;
          total += e;
        }
        p.row(i) /= total;
      }
      StridedMap o(out.data() + static_cast<std::size_t>(win) * n * channels + hd * head_dim, n,
                   head_dim, Eigen::OuterStride<>(channels));
      o.noalias() = p * v;
    }
  }
  if (spec.probs_out) *spec.probs_out = probs;

  std::vector<Var> inputs{qkv};
  if (bias) inputs.push_back(bias);
  return make_result(
      std::move(out), inputs,
      [probs = std::move(probs), n, heads, channels, head_dim, windows, scale, stride,
       nn](Node& self) {
        const double* base = self.inputs[0]->value.data();
        const bool want_qkv = needs(self, 0);
        const bool want_bias = self.inputs.size() > 1 && needs(self, 1);
        double* g_qkv = want_qkv ? grad_of(self, 0).data() : nullptr;
        double* g_bias = want_bias ? grad_of(self, 1).data() : nullptr;
        RowMat g_p(n, n), g_s(n, n);
        for (int win = 0; win < windows; ++win) {
          const std::size_t woff = static_cast<std::size_t>(win) * n * stride;
          for (int hd = 0; hd < heads; ++hd) {
            ConstStridedMap q(base + woff + hd * head_dim, n, head_dim, Eigen::OuterStride<>(stride));
            ConstStridedMap k(base + woff + channels + hd * head_dim, n, head_dim,
                              Eigen::OuterStride<>(stride));
            ConstStridedMap v(base + woff + 2 * channels + hd * head_dim, n, head_dim,
                              Eigen::OuterStride<>(stride));
            ConstStridedMap g_o(self.grad.data() + static_cast<std::size_t>(win) * n * channels +
                                    hd * head_dim,
                                n, head_dim, Eigen::OuterStride<>(channels));
            ConstMatMap p(probs.data() + (static_cast<std::size_t>(win) * heads + hd) * nn, n, n);
            g_p.noalias() = g_o * v.transpose();
            for (int i = 0; i < n; ++i) {
              const double dot = g_p.row(i).dot(p.row(i));
              g_s.row(i) = p.row(i).cwiseProduct((g_p.row(i).array() - dot).matrix());
            }
            if (g_bias) MatMap(g_bias + hd * nn, n, n) += g_s;
            if (g_qkv) {
              StridedMap gq(g_qkv + woff + hd * head_dim, n, head_dim, Eigen::OuterStride<>(stride));
              StridedMap gk(g_qkv + woff + channels + hd * head_dim, n, head_dim,
                            Eigen::OuterStride<>(stride));
              StridedMap gv(g_qkv + woff + 2 * channels + hd * head_dim, n, head_dim,
                            Eigen::OuterStride<>(stride));
              gq.noalias() += scale * (g_s * k);
              gk.noalias() += scale * (g_s.transpose() * q);
              gv.noalias() += p.transpose() * g_o;
            }
          }
        }
      });
}

}  // namespace idfcr::nn
