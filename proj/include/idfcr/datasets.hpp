#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "idfcr/nn/tensor.hpp"

namespace idfcr::datasets {

// Registered cloudy/clear images, both [C,H,W] in [0,1].
struct ImagePair {
  nn::Tensor cloudy;
  nn::Tensor clear;
  std::string id;
};

// Binary [1,H,W] map of where the cloudy image departs from its label.
struct CloudMask {
  nn::Tensor mask;
  double threshold_used = 0.1;
};

struct CloudParams {
  double opacity = 0.6;
  double coverage = 0.5;
  int octaves = 4;
  std::uint64_t seed = 0;
};

// Per-pixel blend weight alpha [1,H,W] and cloud radiance layer [C,H,W].
struct CloudField {
  nn::Tensor alpha;
  nn::Tensor layer;
};

enum class Split { train, test };
std::string to_string(Split split);
Split parse_split(const std::string& text);

constexpr double kDefaultMaskThreshold = 0.1;

// Multi-octave bilinear value noise, [h,w] in [0,1].
nn::Tensor value_noise(int height, int width, int octaves, std::uint64_t seed, int base_cells = 4);

// Procedural terrain-like clear image (smoothed noise plus gradient fields).
nn::Tensor make_terrain(int channels, int height, int width, std::uint64_t seed);

CloudField make_cloud_field(int channels, int height, int width, const CloudParams& params);

void validate(const CloudParams& params);
void validate(const ImagePair& pair);

// cloudy = (1 - alpha) * clear + alpha * layer, clipped to [0,1].
ImagePair synthesize_pair(const nn::Tensor& clear, const CloudParams& params, std::string id = {});

CloudMask compute_mask(const ImagePair& pair, double threshold = kDefaultMaskThreshold);

// Reads <dir>/cloud/*.png and <dir>/label/*.png, paired by filename, sorted.
std::vector<ImagePair> load_pair_dir(const std::filesystem::path& dir);
// load_pair_dir(root / "train") or root / "test".
std::vector<ImagePair> load_pairs(const std::filesystem::path& root, Split split);

// Writes <dir>/cloud/<id>.png and <dir>/label/<id>.png.
void write_pair(const std::filesystem::path& dir, const ImagePair& pair);

}  // namespace idfcr::datasets
