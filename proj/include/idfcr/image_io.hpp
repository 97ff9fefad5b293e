#pragma once

#include <filesystem>

#include "idfcr/nn/tensor.hpp"

namespace idfcr::image_io {

// Decodes an 8-bit PNG into [C,H,W] scaled by 1/255; C is 1 for gray
// sources and 3 otherwise (alpha is dropped).
nn::Tensor read_png(const std::filesystem::path& path);

// Encodes a [1,H,W] or [3,H,W] tensor; values are clamped to [0,1] and
// rounded to the nearest 8-bit level.
void write_png(const std::filesystem::path& path, const nn::Tensor& image);

}  // namespace idfcr::image_io
