#include "idfcr/latent_codec.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <string>

#include "idfcr/error.hpp"

namespace idfcr::latent_codec {

using nn::Tensor;
using nn::Var;

void CodecConfig::validate() const {
  if (in_channels < 1) throw ConfigError("codec in_channels must be positive");
  if (latent_dim < 1) throw ConfigError("codec latent_dim must be positive");
  if (codebook_size < 2) throw ConfigError("codebook_size must be at least 2");
  if (downsample < 1 || !std::has_single_bit(static_cast<unsigned>(downsample))) {
    throw ConfigError("codec downsample must be a power of two, got " + std::to_string(downsample));
  }
  if (!(commitment > 0.0)) throw ConfigError("codec commitment weight must be positive");
  if (width < 1) throw ConfigError("codec width must be positive");
}

int CodecConfig::levels() const { return std::countr_zero(static_cast<unsigned>(downsample)); }

void Codebook::validate() const {
  const Tensor& e = entries.value();
  if (e.rank() != 2 || e.dim(0) < 2 || e.dim(1) < 1) {
    throw ConfigError("codebook must be [B,D] with B >= 2, got " + nn::to_string(e.shape()));
  }
  if (!nn::all_finite(e)) throw ConfigError("codebook has non-finite entries");
  const int b = e.dim(0), d = e.dim(1);
  std::set<std::vector<double>> seen;
  for (int j = 0; j < b; ++j) {
    std::vector<double> row(e.data() + static_cast<std::size_t>(j) * d,
                            e.data() + static_cast<std::size_t>(j + 1) * d);
    if (!seen.insert(std::move(row)).second) {
      throw ConfigError("codebook entry " + std::to_string(j) + " duplicates an earlier entry");
    }
  }
}

nn::ParamSet CodecWeights::params() const {
  nn::ParamSet set;
  encoder.stem.collect(set, "encoder.stem.");
  for (std::size_t i = 0; i < encoder.down.size(); ++i) {
    encoder.down[i].collect(set, "encoder.down." + std::to_string(i) + ".");
  }
  encoder.head.collect(set, "encoder.head.");
  decoder.stem.collect(set, "decoder.stem.");
  for (std::size_t i = 0; i < decoder.up.size(); ++i) {
    decoder.up[i].collect(set, "decoder.up." + std::to_string(i) + ".");
  }
  decoder.head.collect(set, "decoder.head.");
  set.add("codebook.entries", codebook.entries);
  return set;
}

CodecWeights init_weights(const CodecConfig& config, std::uint64_t seed) {
  config.validate();
  nn::Rng rng(seed);
  const int w = config.width;
  CodecWeights weights;
  weights.encoder.stem = nn::Conv2d(config.in_channels, w, 3, 1, 1, rng);
  for (int i = 0; i < config.levels(); ++i) weights.encoder.down.emplace_back(w, w, 4, 2, 1, rng);
  weights.encoder.head = nn::Conv2d(w, config.latent_dim, 1, 1, 0, rng);
  weights.decoder.stem = nn::Conv2d(config.latent_dim, w, 3, 1, 1, rng);
  for (int i = 0; i < config.levels(); ++i) weights.decoder.up.emplace_back(w, w, 4, 2, 1, rng);
  weights.decoder.head = nn::Conv2d(w, config.in_channels, 3, 1, 1, rng);

  const double bound = 1.0 / config.codebook_size;
  weights.codebook.entries =
      nn::make_param(rng.uniform_tensor({config.codebook_size, config.latent_dim}, -bound, bound));
  weights.codebook.validate();
  return weights;
}

Var encode(const Var& image, const CodecWeights& weights, const CodecConfig& config) {
  const nn::Shape& s = image.shape();
  if (s.size() != 3 || s[0] != config.in_channels) {
    throw ConfigError("encode expects [" + std::to_string(config.in_channels) + ",H,W], got " +
                      nn::to_string(s));
  }
  if (s[1] % config.downsample != 0 || s[2] % config.downsample != 0) {
    throw ConfigError("image " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                      " not divisible by downsample factor " + std::to_string(config.downsample));
  }
  Var h = nn::gelu(weights.encoder.stem(image));
  for (const auto& conv : weights.encoder.down) h = nn::gelu(conv(h));
  return weights.encoder.head(h);
}

Quantized quantize(const Tensor& z_c, const Codebook& codebook) {
  const Tensor& e = codebook.entries.value();
  if (e.rank() != 2 || e.dim(0) < 1) throw ConfigError("empty codebook");
  const int d = e.dim(1);
  if (z_c.rank() != 3 || z_c.dim(0) != d) {
    throw ConfigError("latent " + nn::to_string(z_c.shape()) + " does not match codebook dim " +
                      std::to_string(d));
  }
  const int b = e.dim(0);
  const int sites = z_c.dim(1) * z_c.dim(2);
  Quantized q;
  q.z_d = Tensor(z_c.shape());
  q.indices.resize(sites);
  std::vector<double> v(d);
  for (int p = 0; p < sites; ++p) {
    for (int k = 0; k < d; ++k) v[k] = z_c[static_cast<std::size_t>(k) * sites + p];
    int best = 0;
    double best_dist = 0.0;
    for (int j = 0; j < b; ++j) {
      const double* row = e.data() + static_cast<std::size_t>(j) * d;
      double dist = 0.0;
      for (int k = 0; k < d; ++k) {
        const double diff = v[k] - row[k];
        dist += diff * diff;
      }
      if (j == 0 || dist < best_dist) {
        best = j;
        best_dist = dist;
      }
    }
    q.indices[p] = best;
    for (int k = 0; k < d; ++k) {
      q.z_d[static_cast<std::size_t>(k) * sites + p] = e[static_cast<std::size_t>(best) * d + k];
    }
  }
  return q;
}

Var lookup(const Codebook& codebook, const std::vector<std::int32_t>& indices, int h, int w) {
  const int d = codebook.dim();
  const int sites = h * w;
  if (static_cast<int>(indices.size()) != sites) throw ConfigError("index grid size mismatch");
  std::vector<std::int32_t> index(static_cast<std::size_t>(d) * sites);
  for (int k = 0; k < d; ++k)
    for (int p = 0; p < sites; ++p) index[static_cast<std::size_t>(k) * sites + p] = indices[p] * d + k;
  return nn::gather(codebook.entries, std::move(index), {d, h, w});
}

Var decode(const Var& z, const CodecWeights& weights, const CodecConfig& config) {
  const nn::Shape& s = z.shape();
  if (s.size() != 3 || s[0] != config.latent_dim) {
    throw ConfigError("decode expects [" + std::to_string(config.latent_dim) + ",h,w], got " +
                      nn::to_string(s));
  }
  Var h = nn::gelu(weights.decoder.stem(z));
  for (const auto& up : weights.decoder.up) h = nn::gelu(up(h));
  return weights.decoder.head(h);
}

Quantized encode_quantize(const Tensor& image, const CodecWeights& weights,
                          const CodecConfig& config) {
  nn::NoGradGuard guard;
  return quantize(encode(Var(image), weights, config).value(), weights.codebook);
}

Tensor decode_image(const Tensor& z, const CodecWeights& weights, const CodecConfig& config) {
  nn::NoGradGuard guard;
  Tensor out = decode(Var(z), weights, config).value();
  for (double& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

VQLosses vq_losses(const Tensor& image, const CodecWeights& weights, const CodecConfig& config) {
  VQLosses out;
  out.z_c = encode(Var(image), weights, config);
  const Quantized q = quantize(out.z_c.value(), weights.codebook);
  const Var z_d = lookup(weights.codebook, q.indices, out.z_c.dim(1), out.z_c.dim(2));
  out.z_st = nn::straight_through(out.z_c, z_d);
  out.recon = nn::mse_loss(decode(out.z_st, weights, config), Var(image));
  out.codebook_loss = nn::mse_loss(nn::detach(out.z_c), z_d);
  out.commitment = nn::mse_loss(out.z_c, nn::detach(z_d));
  out.total = nn::add(nn::add(out.recon, out.codebook_loss),
                      nn::scale(out.commitment, config.commitment));
  return out;
}

VQStepResult vq_train_step(std::span<const Tensor> batch, const CodecWeights& weights,
                           const CodecConfig& config, nn::Adam& optimizer) {
  if (batch.empty()) throw DataError("empty codec batch");
  optimizer.zero_grad();
  VQStepResult result;
  Var total;
  for (const Tensor& image : batch) {
    VQLosses l = vq_losses(image, weights, config);
    result.recon += l.recon.value()[0];
    result.codebook_loss += l.codebook_loss.value()[0];
    result.commitment += l.commitment.value()[0];
    total = total ? nn::add(total, l.total) : l.total;
  }
  const double n = static_cast<double>(batch.size());
  nn::backward(nn::scale(total, 1.0 / n));
  optimizer.step();
  result.recon /= n;
  result.codebook_loss /= n;
  result.commitment /= n;
  return result;
}

int restart_dead_codes(std::span<const Tensor> images, const CodecWeights& weights,
                       const CodecConfig& config, nn::Rng& rng) {
  if (images.empty()) throw DataError("empty codec batch");
  const int d = weights.codebook.dim(), b = weights.codebook.size();
  std::vector<char> used(b, 0);
  std::vector<std::vector<double>> sites;
  {
    nn::NoGradGuard guard;
    for (const Tensor& image : images) {
      const Tensor z_c = encode(Var(image), weights, config).value();
      const int n = z_c.dim(1) * z_c.dim(2);
      for (int i : quantize(z_c, weights.codebook).indices) used[i] = 1;
      for (int p = 0; p < n; ++p) {
        std::vector<double> v(d);
        for (int c = 0; c < d; ++c) v[c] = z_c[static_cast<std::size_t>(c) * n + p];
        sites.push_back(std::move(v));
      }
    }
  }
  Tensor& e = weights.codebook.entries.node()->value;
  int moved = 0;
  for (int j = 0; j < b; ++j) {
    if (used[j]) continue;
    const auto& v = sites[rng.uniform_int(0, static_cast<int>(sites.size()) - 1)];
    for (int c = 0; c < d; ++c) e[static_cast<std::size_t>(j) * d + c] = v[c] + 1e-3 * rng.normal();
    ++moved;
  }
  return moved;
}

namespace {

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

}  // namespace

void export_codebook(const std::filesystem::path& path, const Codebook& codebook) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write codebook to " + path.string());
  for (double v : codebook.entries.value().values()) {
    const std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<float> read_codebook_export(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read codebook from " + path.string());
  std::vector<float> values;
  std::uint32_t bits = 0;
  while (in.read(reinterpret_cast<char*>(&bits), sizeof bits)) {
    values.push_back(std::bit_cast<float>(to_little(bits)));
  }
  if (in.gcount() != 0) throw DataError("truncated codebook file " + path.string());
  return values;
}

}  // namespace idfcr::latent_codec
