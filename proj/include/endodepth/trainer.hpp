#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "endodepth/data.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/metrics.hpp"
#include "endodepth/network.hpp"
#include "endodepth/reflection.hpp"

namespace endodepth {

struct MaskSettings {
  bool enabled = true;
  TauStrategy tau = TauStrategy::percentile_of(95.0);
  double k = 50.0;
};

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t epochs = 30;
  double lr0 = 5e-4;
  double weight_decay = 1e-2;
  double lambda = 1e-3;  // smoothness weight
  EncoderMode encoder_mode = EncoderMode::Efficiency;
  double d_min = 0.1;    // mm
  double d_max = 150.0;  // mm
  std::uint64_t seed = 1;
  MaskSettings mask;
  SsimConfig ssim;
  bool augmentation_enabled = true;
  AugmentationConfig augmentation;
  double grad_clip_norm = 10.0;
  // Signed per-pixel noise added to the identity errors before the
  // auto-mask comparison; breaks the exact tie at the zero-motion start.
  double automask_tie_noise = 1e-5;
  bool median_scaling = true;
  bool deterministic = true;
  std::size_t fps_warmup = 2, fps_iters = 10, fps_repetitions = 3;

  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct TrainLogRecord {
  std::size_t step = 0, epoch = 0;
  double lr = 0, total = 0, photometric = 0, smoothness = 0;
  double suppressed_fraction = 0;  // pixels with confidence M < 0.5
  double wall_clock_s = 0;
  bool degenerate = false;

  nlohmann::json to_json() const;
};

/// lr0 * 0.5 * (1 + cos(pi * step / total)).
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

struct EvalOutput {
  AccuracyReport accuracy;           // median-scaled
  AccuracyReport accuracy_unscaled;  // raw predictions
  ComplexityReport complexity;
};

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  /// One optimizer update over a batch. `step` is the global step index
  /// used for the schedule and for deriving per-step random streams.
  TrainLogRecord train_step(const std::vector<const FrameTriplet*>& batch, std::size_t epoch,
                            std::size_t step, std::size_t total_steps);

  /// Full loop: shuffles per epoch, checkpoints per epoch and at the end
  /// (out_dir may be empty to skip files), streams NDJSON records to `log`.
  void train(const std::vector<FrameTriplet>& dataset, const std::string& out_dir,
             std::ostream* log = nullptr);

  EvalOutput evaluate(const std::vector<FrameTriplet>& dataset) const;

  /// Predicted metric depth for one frame (full-resolution scale).
  Map predict_depth(const Image& frame) const;

  Checkpoint make_checkpoint(std::uint64_t step) const;
  void restore(const Checkpoint& ckpt);

  const TrainConfig& config() const { return cfg_; }
  DepthNet& depth_net() { return *depth_; }
  PoseNet& pose_net() { return *pose_; }
  const DepthNet& depth_net() const { return *depth_; }
  const PoseNet& pose_net() const { return *pose_; }
  std::uint64_t steps_done() const { return opt_step_; }

 private:
  struct SampleLoss {
    Tensor loss;
    LossBreakdown breakdown;
    double suppressed = 0;
    bool degenerate = false;
  };
  SampleLoss sample_loss(const FrameTriplet& triplet, std::size_t epoch, std::size_t step,
                         std::size_t sample_index);

  TrainConfig cfg_;
  std::unique_ptr<DepthNet> depth_;
  std::unique_ptr<PoseNet> pose_;
  std::vector<std::vector<double>> adam_m_, adam_v_;
  std::uint64_t opt_step_ = 0;
  double train_start_time_ = 0;

  void apply_adamw(double lr);
  std::vector<std::pair<std::string, Tensor>> all_params() const;
};

}  // namespace endodepth
