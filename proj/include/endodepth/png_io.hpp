#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "endodepth/image.hpp"

namespace endodepth {

/// 8-bit RGB PNG -> planar [0,1] image.
Image read_png_rgb8(const std::string& path);
void write_png_rgb8(const std::string& path, const Image& image);

/// 16-bit grayscale PNG, raw values.
void read_png_gray16(const std::string& path, std::vector<std::uint16_t>& raw,
                     std::size_t& height, std::size_t& width);
void write_png_gray16(const std::string& path, const std::vector<std::uint16_t>& raw,
                      std::size_t height, std::size_t width);

/// 8-bit grayscale PNG from a [0,1] map (255 = 1.0).
void write_png_gray8(const std::string& path, const Map& map);

}  // namespace endodepth
