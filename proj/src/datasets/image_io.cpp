#include "idfcr/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "idfcr/error.hpp"

namespace idfcr::image_io {

nn::Tensor read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError("cannot decode image '" + path.string() + "': " + image.message);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int channels = color ? 3 : 1;
  const int h = static_cast<int>(image.height);
  const int w = static_cast<int>(image.width);
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    throw DataError("cannot decode image '" + path.string() + "': " + image.message);
  }
  nn::Tensor out({channels, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        out.at(c, y, x) = buffer[(static_cast<std::size_t>(y) * w + x) * channels + c] / 255.0;
  return out;
}

void write_png(const std::filesystem::path& path, const nn::Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw DataError("cannot encode tensor of shape " + nn::to_string(image.shape()) + " as PNG");
  }
  const int channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<png_byte> buffer(static_cast<std::size_t>(channels) * h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        buffer[(static_cast<std::size_t>(y) * w + x) * channels + c] =
            static_cast<png_byte>(std::lround(v * 255.0));
      }
  png_image out;
  std::memset(&out, 0, sizeof(out));
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(w);
  out.height = static_cast<png_uint_32>(h);
  out.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&out, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IoError("cannot write image '" + path.string() + "': " + out.message);
  }
}

}  // namespace idfcr::image_io
