#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "endodepth/image.hpp"
#include "endodepth/network.hpp"

namespace endodepth {

struct AccuracyReport {
  double abs_rel = 0, sq_rel = 0, rmse = 0, rmse_log = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;
  std::size_t n_pixels = 0;
};

struct AccuracyOptions {
  bool median_scaling = true;
  double cap = 150.0;   // mm
  double d_min = 0.1;   // mm, lower clamp
};

/// Streaming aggregation over frames; median scaling is per frame.
class AccuracyAccumulator {
 public:
  explicit AccuracyAccumulator(AccuracyOptions opts = {}) : opts_(opts) {}
  void add(const Map& pred, const Map& gt, const std::vector<std::uint8_t>& valid);
  AccuracyReport report() const;

 private:
  AccuracyOptions opts_;
  double abs_rel_ = 0, sq_rel_ = 0, sq_ = 0, sq_log_ = 0;
  std::size_t d1_ = 0, d2_ = 0, d3_ = 0, n_ = 0;
};

AccuracyReport compute_accuracy(const Map& pred, const Map& gt,
                                const std::vector<std::uint8_t>& valid,
                                const AccuracyOptions& opts = {});

std::size_t count_params(const ParamStore& params);

/// Static per-layer cost description used for FLOPs accounting.
struct LayerCost {
  std::string name;
  std::size_t macs = 0;        // multiply-accumulates
  std::size_t elementwise = 0; // one op per element (bias adds, activations, residuals)
  std::size_t params = 0;
};

struct ModelProfile {
  std::vector<LayerCost> layers;
  std::size_t total_params() const;
  /// MACs + elementwise; with double_count_macs each MAC counts as 2.
  std::size_t total_flops(bool double_count_macs = false) const;
};

ModelProfile profile_depth_net(EncoderMode mode, std::size_t width, std::size_t height);
ModelProfile profile_pose_net(std::size_t width, std::size_t height);

struct FpsStats {
  double fps = 0;      // mean over repetitions
  double fps_std = 0;  // std over repetitions
  std::size_t warmup = 0, iters = 0, repetitions = 0;
};

/// Times `forward` wall-clock: `warmup` unmeasured calls, then `reps`
/// repetitions of `iters` timed calls each.
FpsStats measure_fps(const std::function<void()>& forward, std::size_t warmup,
                     std::size_t iters, std::size_t repetitions = 3);

struct ComplexityReport {
  std::size_t param_count = 0;
  std::size_t flops = 0;
  double fps = 0;
  double fps_std = 0;
  std::size_t input_width = 0, input_height = 0;
  std::size_t warmup = 0, iters = 0, repetitions = 0;
  std::string flop_convention = "macs";  // or "2x-macs"
};

}  // namespace endodepth
