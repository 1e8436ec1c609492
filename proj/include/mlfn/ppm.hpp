#pragma once

// Binary PPM (P6, maxval 255) for CHW float images in [0, 1].

#include <cstddef>
#include <filesystem>
#include <vector>

namespace mlfn::ppm {

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> chw;  // 3 * height * width, values k/255
};

/// Rounds each value to the nearest k/255 after clamping to [0, 1].
unsigned char quantize(float v);

void write(const std::filesystem::path& path, const float* chw, std::size_t height,
           std::size_t width);
Image read(const std::filesystem::path& path);

}  // namespace mlfn::ppm
