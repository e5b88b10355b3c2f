#include "endodepth/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace endodepth {

namespace {

double median_of(std::vector<double> v) {
  if (v.empty()) return 0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  std::nth_element(v.begin(), v.begin() + mid - 1, v.end());
  return 0.5 * (v[mid - 1] + hi);
}

}  // namespace

void AccuracyAccumulator::add(const Map& pred, const Map& gt,
                              const std::vector<std::uint8_t>& valid) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw std::invalid_argument("compute_accuracy: dimension mismatch");
  const std::size_t n = gt.numel();
  if (!valid.empty() && valid.size() != n)
    throw std::invalid_argument("compute_accuracy: validity size mismatch");

  std::vector<double> pv, gv;
  pv.reserve(n);
  gv.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid.empty() && !valid[i]) continue;
    pv.push_back(pred.data[i]);
    gv.push_back(gt.data[i]);
  }
  if (pv.empty()) throw std::invalid_argument("compute_accuracy: zero valid pixels");

  double scale = 1.0;
  if (opts_.median_scaling) {
    const double mp = median_of(pv);
    if (mp > 0) scale = median_of(gv) / mp;
  }
  constexpr double kTheta1 = 1.25;
  const double theta2 = kTheta1 * kTheta1, theta3 = theta2 * kTheta1;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double d = std::clamp(gv[i], opts_.d_min, opts_.cap);
    const double p = std::clamp(pv[i] * scale, opts_.d_min, opts_.cap);
    const double diff = d - p;
    abs_rel_ += std::fabs(diff) / d;
    sq_rel_ += diff * diff / d;
    sq_ += diff * diff;
    const double lg = std::log(d) - std::log(p);
    sq_log_ += lg * lg;
    const double ratio = std::max(d / p, p / d);
    d1_ += ratio < kTheta1;
    d2_ += ratio < theta2;
    d3_ += ratio < theta3;
  }
  n_ += pv.size();
}

AccuracyReport AccuracyAccumulator::report() const {
  if (n_ == 0) throw std::invalid_argument("compute_accuracy: zero valid pixels");
  AccuracyReport r;
  const double inv = 1.0 / static_cast<double>(n_);
  r.abs_rel = abs_rel_ * inv;
  r.sq_rel = sq_rel_ * inv;
  r.rmse = std::sqrt(sq_ * inv);
  r.rmse_log = std::sqrt(sq_log_ * inv);
  r.delta1 = static_cast<double>(d1_) * inv;
  r.delta2 = static_cast<double>(d2_) * inv;
  r.delta3 = static_cast<double>(d3_) * inv;
  r.n_pixels = n_;
  return r;
}

AccuracyReport compute_accuracy(const Map& pred, const Map& gt,
                                const std::vector<std::uint8_t>& valid,
                                const AccuracyOptions& opts) {
  AccuracyAccumulator acc(opts);
  acc.add(pred, gt, valid);
  return acc.report();
}

std::size_t count_params(const ParamStore& params) { return params.total_count(); }

// ---------------------------------------------------------------------------
// static cost model; mirrors the forward passes in network.cpp

std::size_t ModelProfile::total_params() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.params;
  return n;
}

std::size_t ModelProfile::total_flops(bool double_count_macs) const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.macs * (double_count_macs ? 2 : 1) + l.elementwise;
  return n;
}

namespace {

struct CostBuilder {
  ModelProfile profile;

  void conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
            std::size_t ho, std::size_t wo, std::size_t groups = 1, bool act = true) {
    LayerCost l;
    l.name = name;
    l.macs = k * k * (cin / groups) * cout * ho * wo;
    l.params = k * k * (cin / groups) * cout + cout;
    l.elementwise = cout * ho * wo * (act ? 2 : 1);  // bias add (+ activation)
    profile.layers.push_back(l);
  }

  // depthwise-separable residual block at constant channel count
  void block(const std::string& name, std::size_t c, std::size_t h, std::size_t w) {
    conv(name + ".dw", c, c, 3, h, w, c, true);
    conv(name + ".pw", c, c, 1, h, w, 1, false);
    LayerCost res{name + ".residual", 0, c * h * w, 0};
    profile.layers.push_back(res);
  }

  void xca(const std::string& name, std::size_t c, std::size_t n) {
    LayerCost l;
    l.name = name;
    // q/k/v projections, two CxC token contractions, normalization, softmax,
    // gelu and the residual add
    l.macs = 3 * c * c * n + 2 * c * c * n;
    l.params = 3 * (c * c + c) + 1;
    l.elementwise = 3 * c * n + 2 * c * n + 2 * c * c + 2 * c * n;
    profile.layers.push_back(l);
  }
};

}  // namespace

ModelProfile profile_depth_net(EncoderMode mode, std::size_t width, std::size_t height) {
  if (width % 16 != 0 || height % 16 != 0)
    throw std::invalid_argument("profile_depth_net: input size must be divisible by 16");
  EncoderConfig cfg = EncoderConfig::make(mode);
  const auto& ch = cfg.stage_channels;
  const auto& dc = cfg.decoder_channels;
  const std::size_t h2 = height / 2, w2 = width / 2, h4 = height / 4, w4 = width / 4,
                    h8 = height / 8, w8 = width / 8, h16 = height / 16, w16 = width / 16;
  CostBuilder b;
  b.conv("enc.cov1", 3, ch[0], 3, h2, w2);
  b.conv("enc.cov2", ch[0], ch[1], 3, h4, w4);
  for (std::size_t i = 0; i < cfg.stage2_rates.size(); ++i)
    b.block("enc.s2.block" + std::to_string(i), ch[1], h4, w4);
  b.xca("enc.s2.xca", ch[1], h4 * w4);
  b.conv("enc.cov3", ch[1], ch[2], 3, h8, w8);
  for (std::size_t i = 0; i < cfg.stage3_rates.size(); ++i)
    b.block("enc.s3.block" + std::to_string(i), ch[2], h8, w8);
  b.xca("enc.s3.xca", ch[2], h8 * w8);
  b.conv("enc.cov4", ch[2], ch[3], 3, h16, w16);
  for (std::size_t i = 0; i < cfg.stage4_rates.size(); ++i)
    b.block("enc.s4.block" + std::to_string(i), ch[3], h16, w16);
  b.xca("enc.s4.xca", ch[3], h16 * w16);

  b.conv("dec.l3.c1", ch[3] + ch[2], dc[0], 3, h8, w8);
  b.conv("dec.l3.c2", dc[0], dc[0], 3, h8, w8);
  b.conv("dec.l2.c1", dc[0] + ch[1], dc[1], 3, h4, w4);
  b.conv("dec.l2.c2", dc[1], dc[1], 3, h4, w4);
  b.conv("dec.l1.c1", dc[1] + ch[0], dc[2], 3, h2, w2);
  b.conv("dec.l1.c2", dc[2], dc[2], 3, h2, w2);
  b.conv("dec.l0.c1", dc[2], dc[3], 3, height, width);
  b.conv("dec.l0.c2", dc[3], dc[3], 3, height, width);
  b.conv("dec.head3", dc[0], 1, 3, h8, w8);
  b.conv("dec.head2", dc[1], 1, 3, h4, w4);
  b.conv("dec.head1", dc[2], 1, 3, h2, w2);
  b.conv("dec.head0", dc[3], 1, 3, height, width);
  return b.profile;
}

ModelProfile profile_pose_net(std::size_t width, std::size_t height) {
  const auto& ch = PoseNet::kChannels;
  CostBuilder b;
  b.conv("pose.conv1", 6, ch[0], 3, height / 2, width / 2);
  b.conv("pose.conv2", ch[0], ch[1], 3, height / 4, width / 4);
  b.conv("pose.conv3", ch[1], ch[2], 3, height / 8, width / 8);
  b.conv("pose.conv4", ch[2], ch[3], 3, height / 16, width / 16);
  LayerCost pool{"pose.pool", 0, ch[3] * (height / 16) * (width / 16), 0};
  b.profile.layers.push_back(pool);
  LayerCost head{"pose.head", ch[3] * 6, 6, ch[3] * 6 + 6};
  b.profile.layers.push_back(head);
  return b.profile;
}

FpsStats measure_fps(const std::function<void()>& forward, std::size_t warmup,
                     std::size_t iters, std::size_t repetitions) {
  if (warmup < 1) throw std::invalid_argument("measure_fps: warmup must be >= 1");
  if (iters < 10) throw std::invalid_argument("measure_fps: iters must be >= 10");
  if (repetitions < 1) throw std::invalid_argument("measure_fps: repetitions must be >= 1");
  for (std::size_t i = 0; i < warmup; ++i) forward();
  std::vector<double> fps(repetitions);
  for (std::size_t r = 0; r < repetitions; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < iters; ++i) forward();
    const auto t1 = std::chrono::steady_clock::now();
    const double elapsed = std::chrono::duration<double>(t1 - t0).count();
    fps[r] = static_cast<double>(iters) / elapsed;
  }
  FpsStats s;
  s.warmup = warmup;
  s.iters = iters;
  s.repetitions = repetitions;
  for (double v : fps) s.fps += v;
  s.fps /= static_cast<double>(repetitions);
  double var = 0;
  for (double v : fps) var += (v - s.fps) * (v - s.fps);
  s.fps_std = std::sqrt(var / static_cast<double>(repetitions));
  return s;
}

}  // namespace endodepth
