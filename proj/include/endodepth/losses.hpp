#pragma once

#include <cstdint>
#include <vector>

#include "endodepth/image.hpp"
#include "endodepth/tensor.hpp"

namespace endodepth {

struct SsimConfig {
  bool enabled = false;
  double alpha = 0.85;  // weight of the SSIM term in the blend
};

struct LossBreakdown {
  double total = 0, photometric = 0, smoothness = 0, lambda = 0;
  std::vector<double> per_scale_photometric, per_scale_smoothness;
};

/// Per-pixel photometric error (H,W): channel-mean |target - warped|, or the
/// alpha*(1-SSIM)/2 + (1-alpha)*L1 blend when ssim.enabled. Pixels with
/// validity 0 get error 0.
Tensor photometric_error(const Tensor& target, const Tensor& warped,
                         const std::vector<std::uint8_t>& validity,
                         const SsimConfig& ssim = {});

/// Per-pixel minimum of two error maps.
Tensor min_reprojection(const Tensor& err_prev, const Tensor& err_next);

/// Binary mask: 1 where the warped error beats both unwarped (identity)
/// source errors. `tie_noise` is optionally added to the identity side
/// before the comparison (empty = none).
std::vector<std::uint8_t> auto_mask(const Tensor& target, const Tensor& source_prev,
                                    const Tensor& source_next, const Tensor& warped_min_err,
                                    const std::vector<double>& tie_noise = {});

/// Weighted mean: sum(err*mu*M*validity) / max(sum(mu*M*validity), eps).
/// All weights are constants; gradients flow only through err.
Tensor masked_photometric_loss(const Tensor& err, const std::vector<std::uint8_t>& mu,
                               const Map& confidence, const std::vector<std::uint8_t>& validity,
                               bool* degenerate = nullptr);

/// Edge-aware first-order smoothness on mean-normalized disparity.
/// Throws if mean disparity is below eps (degenerate).
Tensor smoothness_loss(const Tensor& disparity, const Image& image, double eps = 1e-8);

/// Mean over scales of (photometric + lambda * smoothness), differentiable.
Tensor total_loss(const std::vector<Tensor>& per_scale_photometric,
                  const std::vector<Tensor>& per_scale_smoothness, double lambda,
                  LossBreakdown* breakdown = nullptr);
LossBreakdown total_loss(const std::vector<double>& per_scale_photometric,
                         const std::vector<double>& per_scale_smoothness, double lambda);

}  // namespace endodepth
