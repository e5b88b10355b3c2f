#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "endodepth/tensor.hpp"

namespace endodepth {

enum class EncoderMode { Efficiency, Performance };

std::string to_string(EncoderMode mode);
EncoderMode encoder_mode_from_string(const std::string& s);

struct EncoderConfig {
  EncoderMode mode = EncoderMode::Efficiency;
  std::array<std::size_t, 4> stage_channels{32, 32, 64, 128};
  std::vector<std::size_t> stage2_rates{1, 2, 3};
  std::vector<std::size_t> stage3_rates{1, 2, 3};
  std::vector<std::size_t> stage4_rates{1, 2, 3, 2, 4, 6};
  std::array<std::size_t, 4> decoder_channels{128, 64, 32, 16};

  static EncoderConfig make(EncoderMode mode);
};

/// Ordered registry of named trainable arrays.
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const;
  std::size_t total_count() const;
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  void zero_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

/// 3x3 dilated convolution, stride 1, padding chosen to preserve spatial size.
Tensor dilated_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t rate,
                    std::size_t groups = 1);

/// Cross-covariance attention with residual: tokens are pixels, attention is
/// a CxC map over channels. Q,K rows are L2-normalized over tokens and the
/// logits are scaled by a learnable temperature; GELU on the branch.
Tensor xca_block(const Tensor& x, const Tensor& wq, const Tensor& bq, const Tensor& wk,
                 const Tensor& bk, const Tensor& wv, const Tensor& bv,
                 const Tensor& temperature);

/// sigma in (0,1) -> depth in (d_min, d_max), strictly decreasing.
Tensor disparity_to_depth(const Tensor& disparity, double d_min, double d_max);

struct FeaturePyramid {
  Tensor f1, f2, f3, f4;  // 1/2, 1/4, 1/8, 1/16 resolution
};

class DepthNet {
 public:
  DepthNet(EncoderMode mode, std::uint64_t seed);

  FeaturePyramid encode(const Tensor& image) const;
  /// Disparity maps at scales 1, 1/2, 1/4, 1/8 (index 0 = full resolution).
  std::array<Tensor, 4> forward(const Tensor& image) const;

  const EncoderConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  Tensor decoder_level(const Tensor& below, const Tensor& skip, const std::string& name) const;
  EncoderConfig cfg_;
  ParamStore params_;
};

class PoseNet {
 public:
  explicit PoseNet(std::uint64_t seed);

  struct PoseOut {
    Tensor rotation;     // (3,3)
    Tensor translation;  // (3)
    Tensor raw;          // (6) pre-scaling head output
  };
  PoseOut forward(const Tensor& target, const Tensor& source) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  static constexpr std::array<std::size_t, 4> kChannels{16, 32, 64, 128};
  static constexpr double kOutputScale = 0.01;

 private:
  ParamStore params_;
};

// --- checkpoint container -------------------------------------------------
// Binary layout (all integers little-endian, values IEEE-754 f64 LE):
//   magic "ENDODP01" | u32 version | u8 mode | u64 step | u32 array count
//   per array: u32 name_len, name bytes, u32 ndim, u64 dims[], f64 values[]
struct Checkpoint {
  EncoderMode mode = EncoderMode::Efficiency;
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>> arrays;

  void set(const std::string& name, const Shape& shape, std::vector<double> values);
  const std::pair<Shape, std::vector<double>>* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Copies every store entry into / out of a checkpoint (by exact name).
void store_to_checkpoint(const ParamStore& store, const std::string& prefix, Checkpoint& ckpt);
void checkpoint_to_store(const Checkpoint& ckpt, const std::string& prefix, ParamStore& store);

}  // namespace endodepth
