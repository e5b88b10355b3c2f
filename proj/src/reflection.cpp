#include "endodepth/reflection.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace endodepth {

Map luminance(const Image& image) {
  if (image.channels != 3)
    throw std::invalid_argument("luminance: expected 3 channels, got " +
                                std::to_string(image.channels));
  Map out(image.height, image.width);
  const std::size_t n = image.height * image.width;
  const double* r = image.data.data();
  const double* g = r + n;
  const double* b = g + n;
  for (std::size_t i = 0; i < n; ++i) {
    // Associates as r + (g + b) so that (1,1,1) -> exactly 1.0.
    out.data[i] = 0.299 * r[i] + (0.587 * g[i] + 0.114 * b[i]);
  }
  return out;
}

Map normalize_intensity(const Map& intensity) {
  Map out(intensity.height, intensity.width);
  if (intensity.data.empty()) return out;
  const auto [mn_it, mx_it] = std::minmax_element(intensity.data.begin(), intensity.data.end());
  const double mn = *mn_it, mx = *mx_it;
  if (mx - mn < 1e-8) return out;  // constant image: all zeros
  const double inv = 1.0 / (mx - mn);
  for (std::size_t i = 0; i < intensity.data.size(); ++i)
    out.data[i] = (intensity.data[i] - mn) * inv;
  return out;
}

double estimate_tau(const Map& normalized, const TauStrategy& strategy) {
  if (normalized.data.empty()) throw std::invalid_argument("estimate_tau: empty map");
  if (strategy.kind == TauStrategy::Kind::Fixed) {
    if (strategy.fixed_value < 0.0 || strategy.fixed_value > 1.0)
      throw std::invalid_argument("estimate_tau: fixed value must be in [0,1]");
    return strategy.fixed_value;
  }
  const double q = strategy.percentile;
  if (q < 0.0 || q > 100.0)
    throw std::invalid_argument("estimate_tau: percentile must be in [0,100]");
  std::vector<double> sorted = normalized.data;
  std::sort(sorted.begin(), sorted.end());
  const double rank = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const std::size_t i0 = static_cast<std::size_t>(rank);
  const std::size_t i1 = std::min(i0 + 1, sorted.size() - 1);
  const double frac = rank - static_cast<double>(i0);
  const double tau = sorted[i0] * (1.0 - frac) + sorted[i1] * frac;
  return std::clamp(tau, 0.0, 1.0);
}

Map reflection_mask(const Map& normalized, double tau, double k) {
  if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("reflection_mask: tau must be in [0,1]");
  if (!(k > 0.0)) throw std::invalid_argument("reflection_mask: k must be positive");
  Map out(normalized.height, normalized.width);
  for (std::size_t i = 0; i < normalized.data.size(); ++i) {
    const double a = k * (tau - normalized.data[i]);
    out.data[i] = a >= 0 ? 1.0 / (1.0 + std::exp(-a)) : std::exp(a) / (1.0 + std::exp(a));
  }
  return out;
}

Map apply_mask(const Map& err, const Map& confidence) {
  if (err.height != confidence.height || err.width != confidence.width)
    throw std::invalid_argument("apply_mask: dimension mismatch");
  Map out(err.height, err.width);
  for (std::size_t i = 0; i < err.data.size(); ++i)
    out.data[i] = err.data[i] * confidence.data[i];
  return out;
}

Tensor apply_mask(const Tensor& err, const Map& confidence) {
  if (err.shape().size() != 2 || err.dim(0) != confidence.height ||
      err.dim(1) != confidence.width)
    throw std::invalid_argument("apply_mask: dimension mismatch");
  return mul(err, confidence.to_tensor());
}

}  // namespace endodepth
