#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "endodepth/tensor.hpp"

namespace endodepth {

/// Planar (C,H,W) image, values in [0,1].
struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * height + y) * width + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  std::size_t numel() const { return data.size(); }

  Tensor to_tensor() const { return Tensor::from_data({channels, height, width}, data); }

  static Image from_tensor(const Tensor& t) {
    if (t.shape().size() != 3) throw std::invalid_argument("Image::from_tensor: needs (C,H,W)");
    Image im(t.dim(0), t.dim(1), t.dim(2));
    im.data.assign(t.data(), t.data() + t.numel());
    return im;
  }
};

/// Single-channel (H,W) map: depth, disparity, luminance, error, confidence.
struct Map {
  std::size_t height = 0, width = 0;
  std::vector<double> data;

  Map() = default;
  Map(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), data(h * w, fill) {}

  double& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::size_t numel() const { return data.size(); }

  Tensor to_tensor() const { return Tensor::from_data({height, width}, data); }

  static Map from_tensor(const Tensor& t) {
    if (t.shape().size() != 2) throw std::invalid_argument("Map::from_tensor: needs (H,W)");
    Map m(t.dim(0), t.dim(1));
    m.data.assign(t.data(), t.data() + t.numel());
    return m;
  }
};

}  // namespace endodepth
