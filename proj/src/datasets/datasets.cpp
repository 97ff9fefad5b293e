#include "idfcr/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "idfcr/error.hpp"
#include "idfcr/image_io.hpp"
#include "idfcr/nn/rng.hpp"

namespace idfcr::datasets {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeedMix = 0x9E3779B97F4A7C15ULL;
constexpr double kCloudEdgeRamp = 0.08;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  return seed * kSeedMix + salt * 0xBF58476D1CE4E5B9ULL + 1;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

bool in_unit_range(const nn::Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](double v) { return v >= 0.0 && v <= 1.0; });
}

}  // namespace

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "test") return Split::test;
  throw ParameterError("unknown split '" + text + "' (expected train or test)");
}

nn::Tensor value_noise(int height, int width, int octaves, std::uint64_t seed, int base_cells) {
  if (height <= 0 || width <= 0 || octaves <= 0 || base_cells <= 0) {
    throw ParameterError("value_noise: dimensions, octaves and cells must be positive");
  }
  nn::Tensor out({height, width});
  double total_amplitude = 0.0;
  double amplitude = 1.0;
  for (int o = 0; o < octaves; ++o) {
    const int cells = base_cells << o;
    nn::Rng rng(derive_seed(seed, static_cast<std::uint64_t>(o)));
    const nn::Tensor lattice = rng.uniform_tensor({cells + 1, cells + 1}, 0.0, 1.0);
    for (int y = 0; y < height; ++y) {
      const double fy = (y + 0.5) / height * cells;
      const int y0 = std::min(static_cast<int>(fy), cells - 1);
      const double ty = smoothstep(fy - y0);
      for (int x = 0; x < width; ++x) {
        const double fx = (x + 0.5) / width * cells;
        const int x0 = std::min(static_cast<int>(fx), cells - 1);
        const double tx = smoothstep(fx - x0);
        const auto at = [&](int yy, int xx) { return lattice[yy * (cells + 1) + xx]; };
        const double top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
        const double bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
        out[static_cast<std::size_t>(y) * width + x] += amplitude * (top * (1.0 - ty) + bottom * ty);
      }
    }
    total_amplitude += amplitude;
    amplitude *= 0.5;
  }
  out *= 1.0 / total_amplitude;
  return out;
}

nn::Tensor make_terrain(int channels, int height, int width, std::uint64_t seed) {
  if (channels <= 0) throw ParameterError("make_terrain: channels must be positive");
  const nn::Tensor base = value_noise(height, width, 5, derive_seed(seed, 101));
  const nn::Tensor detail = value_noise(height, width, 3, derive_seed(seed, 202), 8);
  nn::Rng rng(derive_seed(seed, 303));
  const double gx = rng.uniform(-1.0, 1.0);
  const double gy = rng.uniform(-1.0, 1.0);
  nn::Tensor out({channels, height, width});
  for (int c = 0; c < channels; ++c) {
    const double offset = rng.uniform(0.12, 0.32);
    const double base_gain = rng.uniform(0.3, 0.5);
    const double detail_gain = rng.uniform(0.05, 0.15);
    const double ramp_gain = rng.uniform(0.05, 0.12);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * width + x;
        const double ramp = 0.5 + 0.5 * (gx * (x + 0.5) / width + gy * (y + 0.5) / height) / 2.0;
        const double v =
            offset + base_gain * base[p] + detail_gain * detail[p] + ramp_gain * ramp;
        out.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

void validate(const CloudParams& params) {
  if (!(params.opacity >= 0.0 && params.opacity <= 1.0)) {
    throw ParameterError("cloud opacity must lie in [0,1], got " + std::to_string(params.opacity));
  }
  if (!(params.coverage >= 0.0 && params.coverage <= 1.0)) {
    throw ParameterError("cloud coverage must lie in [0,1], got " +
                         std::to_string(params.coverage));
  }
  if (params.octaves <= 0) {
    throw ParameterError("cloud octaves must be positive, got " + std::to_string(params.octaves));
  }
}

void validate(const ImagePair& pair) {
  if (pair.cloudy.rank() != 3 || pair.cloudy.shape() != pair.clear.shape()) {
    throw DataError("pair '" + pair.id + "': cloudy " + nn::to_string(pair.cloudy.shape()) +
                    " and clear " + nn::to_string(pair.clear.shape()) + " must be equal [C,H,W]");
  }
  if (!in_unit_range(pair.cloudy) || !in_unit_range(pair.clear)) {
    throw DataError("pair '" + pair.id + "': pixel values outside [0,1]");
  }
}

CloudField make_cloud_field(int channels, int height, int width, const CloudParams& params) {
  validate(params);
  const nn::Tensor density = value_noise(height, width, params.octaves, params.seed);
  const nn::Tensor texture = value_noise(height, width, 3, derive_seed(params.seed, 7), 8);

  // Pixels whose density exceeds the (1 - coverage) quantile are cloudy.
  const std::size_t count = density.size();
  const auto clear_count = static_cast<std::size_t>(
      std::llround((1.0 - params.coverage) * static_cast<double>(count)));
  double threshold;
  if (clear_count == 0) {
    threshold = -std::numeric_limits<double>::infinity();
  } else if (clear_count >= count) {
    threshold = std::numeric_limits<double>::infinity();
  } else {
    std::vector<double> sorted(density.values().begin(), density.values().end());
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(clear_count - 1),
                     sorted.end());
    threshold = sorted[clear_count - 1];
  }

  CloudField field{nn::Tensor({1, height, width}), nn::Tensor({channels, height, width})};
  for (std::size_t p = 0; p < count; ++p) {
    double cover;
    if (std::isinf(threshold)) {
      cover = threshold < 0 ? 1.0 : 0.0;
    } else {
      cover = std::clamp((density[p] - threshold) / kCloudEdgeRamp, 0.0, 1.0);
    }
    field.alpha[p] = params.opacity * cover;
    for (int c = 0; c < channels; ++c) {
      field.layer[c * count + p] = std::clamp(0.78 + 0.2 * texture[p], 0.0, 1.0);
    }
  }
  return field;
}

ImagePair synthesize_pair(const nn::Tensor& clear, const CloudParams& params, std::string id) {
  validate(params);
  if (clear.rank() != 3 || clear.empty()) {
    throw ParameterError("clear image must be [C,H,W], got " + nn::to_string(clear.shape()));
  }
  if (!in_unit_range(clear)) throw ParameterError("clear image values must lie in [0,1]");
  const int channels = clear.dim(0), h = clear.dim(1), w = clear.dim(2);
  const CloudField field = make_cloud_field(channels, h, w, params);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  ImagePair pair{nn::Tensor(clear.shape()), clear, std::move(id)};
  for (int c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double a = field.alpha[p];
      const std::size_t i = c * plane + p;
      pair.cloudy[i] = std::clamp((1.0 - a) * clear[i] + a * field.layer[i], 0.0, 1.0);
    }
  }
  return pair;
}

CloudMask compute_mask(const ImagePair& pair, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ParameterError("mask threshold must lie in (0,1), got " + std::to_string(threshold));
  }
  if (pair.cloudy.rank() != 3 || pair.cloudy.shape() != pair.clear.shape()) {
    throw DataError("compute_mask: cloudy " + nn::to_string(pair.cloudy.shape()) + " vs clear " +
                    nn::to_string(pair.clear.shape()));
  }
  const int channels = pair.cloudy.dim(0), h = pair.cloudy.dim(1), w = pair.cloudy.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  CloudMask out{nn::Tensor({1, h, w}), threshold};
  for (std::size_t p = 0; p < plane; ++p) {
    double diff = 0.0;
    for (int c = 0; c < channels; ++c) {
      diff += std::abs(pair.cloudy[c * plane + p] - pair.clear[c * plane + p]);
    }
    out.mask[p] = diff / channels > threshold ? 1.0 : 0.0;
  }
  return out;
}

std::vector<ImagePair> load_pair_dir(const fs::path& dir) {
  const fs::path cloud_dir = dir / "cloud";
  const fs::path label_dir = dir / "label";
  for (const auto& d : {cloud_dir, label_dir}) {
    if (!fs::is_directory(d)) throw ListingError("missing directory '" + d.string() + "'");
  }
  auto list_png = [](const fs::path& d) {
    std::map<std::string, fs::path> files;
    for (const auto& entry : fs::directory_iterator(d)) {
      if (entry.is_regular_file() && entry.path().extension() == ".png") {
        files.emplace(entry.path().filename().string(), entry.path());
      }
    }
    return files;
  };
  const auto clouds = list_png(cloud_dir);
  const auto labels = list_png(label_dir);
  for (const auto& [name, _] : clouds) {
    if (!labels.count(name)) throw ListingError("'" + name + "' has no match in label/");
  }
  for (const auto& [name, _] : labels) {
    if (!clouds.count(name)) throw ListingError("'" + name + "' has no match in cloud/");
  }

  std::vector<ImagePair> pairs;
  pairs.reserve(clouds.size());
  for (const auto& [name, cloud_path] : clouds) {
    ImagePair pair{image_io::read_png(cloud_path), image_io::read_png(labels.at(name)),
                   fs::path(name).stem().string()};
    validate(pair);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

std::vector<ImagePair> load_pairs(const fs::path& root, Split split) {
  return load_pair_dir(root / to_string(split));
}

void write_pair(const fs::path& dir, const ImagePair& pair) {
  validate(pair);
  fs::create_directories(dir / "cloud");
  fs::create_directories(dir / "label");
  image_io::write_png(dir / "cloud" / (pair.id + ".png"), pair.cloudy);
  image_io::write_png(dir / "label" / (pair.id + ".png"), pair.clear);
}

}  // namespace idfcr::datasets
