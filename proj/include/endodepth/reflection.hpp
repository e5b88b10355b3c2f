#pragma once

#include "endodepth/image.hpp"

namespace endodepth {

/// How the luminance threshold separating specular pixels is chosen.
struct TauStrategy {
  enum class Kind { Percentile, Fixed };
  Kind kind = Kind::Percentile;
  double percentile = 95.0;  // of normalized luminance
  double fixed_value = 0.8;

  static TauStrategy percentile_of(double q) { return {Kind::Percentile, q, 0.0}; }
  static TauStrategy fixed(double v) { return {Kind::Fixed, 95.0, v}; }
};

/// Rec.601 luma; coefficients sum to exactly 1 in double precision.
Map luminance(const Image& image);

/// Min-max normalization to [0,1]; constant maps collapse to all zeros.
Map normalize_intensity(const Map& intensity);

double estimate_tau(const Map& normalized, const TauStrategy& strategy);

/// Logistic gate M = 1 / (1 + exp(-k (tau - Ln))): ~1 below the threshold,
/// ~0 above it, exactly 0.5 at it.
Map reflection_mask(const Map& normalized, double tau, double k);

Map apply_mask(const Map& err, const Map& confidence);

/// Tensor path for use inside the loss graph; the mask is a constant
/// (it gates the loss, gradients never flow into it).
Tensor apply_mask(const Tensor& err, const Map& confidence);

}  // namespace endodepth
