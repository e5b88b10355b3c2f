#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "endodepth/tensor.hpp"

namespace endodepth {

/// Points closer than this along the optical axis are treated as invalid
/// instead of producing unbounded projections.
constexpr double kZEps = 1e-4;

/// Pinhole camera parameters. Pixel centers sit at integer coordinates;
/// (u,v) = (0,0) is the center of the top-left pixel.
struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  std::size_t width = 0, height = 0;

  void validate() const;
};

/// Rigid transform: X' = R*X + t.
struct PoseSE3 {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  std::array<double, 3> translation{0, 0, 0};

  static PoseSE3 identity() { return PoseSE3{}; }
  static PoseSE3 from_axis_angle(const std::array<double, 3>& w,
                                 const std::array<double, 3>& t);
  PoseSE3 inverse() const;
  /// this ∘ other: applies `other` first.
  PoseSE3 compose(const PoseSE3& other) const;
  std::array<double, 3> apply(const std::array<double, 3>& p) const;
  void validate(double tol = 1e-6) const;
};

/// Homogeneous pixel coordinates, one (u,v,1) triple per pixel, stored as
/// a (3, H*W) tensor in row-major pixel order.
struct PixelGrid {
  Tensor coords;  // (3, N), constant
  std::size_t width = 0, height = 0;
};

/// Continuous sample coordinates with per-pixel validity.
struct SampleCoords {
  Tensor u, v;                      // (H,W) each
  std::vector<std::uint8_t> valid;  // 1 where usable
  std::size_t width = 0, height = 0;  // bounds of the frame being sampled
};

PixelGrid make_pixel_grid(const CameraIntrinsics& k);

/// Per-pixel 3-D points d * K^-1 * p as a (3, H*W) tensor.
Tensor backproject(const Tensor& depth, const CameraIntrinsics& k, const PixelGrid& grid);

/// R*X + t over a (3,N) point matrix.
Tensor transform_points(const Tensor& points, const Tensor& rotation, const Tensor& translation);
Tensor transform_points(const Tensor& points, const PoseSE3& pose);

SampleCoords project(const Tensor& points, const CameraIntrinsics& k,
                     std::size_t height, std::size_t width);

/// Bilinear sample of image (C,H,W) at coords; see bilinear_gather for the
/// border policy. Returns (C,h,w) and fills valid_out.
Tensor bilinear_sample(const Tensor& image, const SampleCoords& coords,
                       std::vector<std::uint8_t>& valid_out);

/// Full view synthesis: warp `source` into the frame that `depth` describes.
Tensor synthesize_view(const Tensor& source, const Tensor& depth, const Tensor& rotation,
                       const Tensor& translation, const CameraIntrinsics& k,
                       std::vector<std::uint8_t>& valid_out);
Tensor synthesize_view(const Tensor& source, const Tensor& depth, const PoseSE3& pose,
                       const CameraIntrinsics& k, std::vector<std::uint8_t>& valid_out);

/// Differentiable rotation matrix from an axis-angle 3-vector (Rodrigues,
/// series-stabilized near zero).
Tensor rotation_from_axis_angle(const Tensor& axis_angle);

Tensor pose_to_rotation_tensor(const PoseSE3& pose);
Tensor pose_to_translation_tensor(const PoseSE3& pose);

}  // namespace endodepth
