#include "endodepth/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <stdexcept>

#include "endodepth/geometry.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace endodepth {

namespace {

constexpr double kInvalidErr = 1e6;  // sentinel added to errors of invalid pixels

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("lr0", c.lr0);
  get("weight_decay", c.weight_decay);
  get("lambda", c.lambda);
  if (j.contains("encoder_mode"))
    c.encoder_mode = encoder_mode_from_string(j.at("encoder_mode").get<std::string>());
  get("d_min", c.d_min);
  get("d_max", c.d_max);
  get("seed", c.seed);
  get("grad_clip_norm", c.grad_clip_norm);
  get("automask_tie_noise", c.automask_tie_noise);
  get("median_scaling", c.median_scaling);
  get("deterministic", c.deterministic);
  if (j.contains("mask")) {
    const auto& m = j.at("mask");
    if (m.contains("enabled")) c.mask.enabled = m.at("enabled").get<bool>();
    if (m.contains("k")) c.mask.k = m.at("k").get<double>();
    if (m.contains("tau_strategy")) {
      const std::string s = m.at("tau_strategy").get<std::string>();
      if (s == "percentile")
        c.mask.tau.kind = TauStrategy::Kind::Percentile;
      else if (s == "fixed")
        c.mask.tau.kind = TauStrategy::Kind::Fixed;
      else
        throw std::invalid_argument("mask.tau_strategy must be percentile|fixed, got " + s);
    }
    if (m.contains("tau_percentile")) c.mask.tau.percentile = m.at("tau_percentile").get<double>();
    if (m.contains("tau_fixed")) c.mask.tau.fixed_value = m.at("tau_fixed").get<double>();
  }
  if (j.contains("ssim")) {
    const auto& s = j.at("ssim");
    if (s.contains("enabled")) c.ssim.enabled = s.at("enabled").get<bool>();
    if (s.contains("alpha")) c.ssim.alpha = s.at("alpha").get<double>();
  }
  if (j.contains("augmentation")) {
    const auto& a = j.at("augmentation");
    if (a.contains("enabled")) c.augmentation_enabled = a.at("enabled").get<bool>();
    if (a.contains("flip_prob")) c.augmentation.flip_prob = a.at("flip_prob").get<double>();
    if (a.contains("color_prob")) c.augmentation.color_prob = a.at("color_prob").get<double>();
    if (a.contains("brightness")) c.augmentation.brightness = a.at("brightness").get<double>();
    if (a.contains("contrast")) c.augmentation.contrast = a.at("contrast").get<double>();
    if (a.contains("saturation")) c.augmentation.saturation = a.at("saturation").get<double>();
    if (a.contains("hue")) c.augmentation.hue = a.at("hue").get<double>();
  }
  if (j.contains("fps")) {
    const auto& f = j.at("fps");
    if (f.contains("warmup")) c.fps_warmup = f.at("warmup").get<std::size_t>();
    if (f.contains("iters")) c.fps_iters = f.at("iters").get<std::size_t>();
    if (f.contains("repetitions")) c.fps_repetitions = f.at("repetitions").get<std::size_t>();
  }
  if (!(c.lr0 > 0)) throw std::invalid_argument("config: lr0 must be positive");
  if (c.batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (!(c.d_min < c.d_max)) throw std::invalid_argument("config: d_min must be below d_max");
  return c;
}

json TrainConfig::to_json() const {
  return json{
      {"batch_size", batch_size},
      {"epochs", epochs},
      {"lr0", lr0},
      {"weight_decay", weight_decay},
      {"lambda", lambda},
      {"encoder_mode", to_string(encoder_mode)},
      {"d_min", d_min},
      {"d_max", d_max},
      {"seed", seed},
      {"grad_clip_norm", grad_clip_norm},
      {"automask_tie_noise", automask_tie_noise},
      {"median_scaling", median_scaling},
      {"deterministic", deterministic},
      {"mask",
       {{"enabled", mask.enabled},
        {"tau_strategy", mask.tau.kind == TauStrategy::Kind::Percentile ? "percentile" : "fixed"},
        {"tau_percentile", mask.tau.percentile},
        {"tau_fixed", mask.tau.fixed_value},
        {"k", mask.k}}},
      {"ssim", {{"enabled", ssim.enabled}, {"alpha", ssim.alpha}}},
      {"augmentation",
       {{"enabled", augmentation_enabled},
        {"flip_prob", augmentation.flip_prob},
        {"color_prob", augmentation.color_prob},
        {"brightness", augmentation.brightness},
        {"contrast", augmentation.contrast},
        {"saturation", augmentation.saturation},
        {"hue", augmentation.hue}}},
      {"fps", {{"warmup", fps_warmup}, {"iters", fps_iters}, {"repetitions", fps_repetitions}}}};
}

json TrainLogRecord::to_json() const {
  return json{{"step", step},
              {"epoch", epoch},
              {"lr", lr},
              {"total", total},
              {"photometric", photometric},
              {"smoothness", smoothness},
              {"suppressed_fraction", suppressed_fraction},
              {"wall_clock_s", wall_clock_s},
              {"degenerate", degenerate}};
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
  if (step > total_steps) throw std::invalid_argument("cosine_lr: step out of range");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979324 * frac));
}

Trainer::Trainer(const TrainConfig& cfg)
    : cfg_(cfg),
      depth_(std::make_unique<DepthNet>(cfg.encoder_mode, cfg.seed)),
      pose_(std::make_unique<PoseNet>(cfg.seed)) {
  const auto params = all_params();
  adam_m_.resize(params.size());
  adam_v_.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_m_[i].assign(params[i].second.numel(), 0.0);
    adam_v_[i].assign(params[i].second.numel(), 0.0);
  }
  train_start_time_ = now_seconds();
}

std::vector<std::pair<std::string, Tensor>> Trainer::all_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : depth_->params().items()) out.emplace_back("depth." + name, t);
  for (const auto& [name, t] : pose_->params().items()) out.emplace_back("pose." + name, t);
  return out;
}

Trainer::SampleLoss Trainer::sample_loss(const FrameTriplet& triplet, std::size_t epoch,
                                         std::size_t step, std::size_t sample_index) {
  FrameTriplet input, target;
  if (cfg_.augmentation_enabled) {
    Rng aug_rng(Rng::derive(cfg_.seed, 0xA36 + epoch, step, sample_index));
    std::tie(input, target) = augment(triplet, cfg_.augmentation, aug_rng);
  } else {
    input = triplet;
    target = triplet;
  }
  const CameraIntrinsics& k = target.intrinsics;
  const std::size_t h = k.height, w = k.width;

  Tensor in_cur = input.cur.to_tensor();
  Tensor in_prev = input.prev.to_tensor();
  Tensor in_next = input.next.to_tensor();
  Tensor tgt_cur = target.cur.to_tensor();
  Tensor tgt_prev = target.prev.to_tensor();
  Tensor tgt_next = target.next.to_tensor();

  auto disps = depth_->forward(in_cur);
  auto pose_prev = pose_->forward(in_cur, in_prev);
  auto pose_next = pose_->forward(in_cur, in_next);

  // Confidence mask on the (un-jittered) target frame; constant w.r.t. the graph.
  Map confidence(h, w, 1.0);
  double suppressed = 0;
  if (cfg_.mask.enabled) {
    const Map ln = normalize_intensity(luminance(target.cur));
    const double tau = estimate_tau(ln, cfg_.mask.tau);
    confidence = reflection_mask(ln, tau, cfg_.mask.k);
    for (double v : confidence.data) suppressed += v < 0.5;
    suppressed /= static_cast<double>(confidence.data.size());
  }

  // Signed tie-break noise for the auto-mask comparison.
  std::vector<double> tie_noise;
  if (cfg_.automask_tie_noise > 0) {
    Rng tie_rng(Rng::derive(cfg_.seed, 0x71E + epoch, step, sample_index));
    tie_noise.resize(h * w);
    for (double& v : tie_noise) v = tie_rng.normal() * cfg_.automask_tie_noise;
  }

  std::vector<Tensor> photo_terms, smooth_terms;
  bool degenerate = false;
  for (std::size_t s = 0; s < disps.size(); ++s) {
    Tensor disp_full =
        s == 0 ? disps[s]
               : upsample_bilinear(disps[s].reshape({1, disps[s].dim(0), disps[s].dim(1)}), h, w)
                     .reshape({h, w});
    Tensor depth = disparity_to_depth(disp_full, cfg_.d_min, cfg_.d_max);

    Tensor errs[2];
    std::vector<std::uint8_t> valids[2];
    const Tensor* sources[2] = {&tgt_prev, &tgt_next};
    const PoseNet::PoseOut* poses[2] = {&pose_prev, &pose_next};
    for (int i = 0; i < 2; ++i) {
      std::vector<std::uint8_t> valid;
      Tensor warped = synthesize_view(*sources[i], depth, poses[i]->rotation,
                                      poses[i]->translation, k, valid);
      Tensor err = photometric_error(tgt_cur, warped, valid, cfg_.ssim);
      std::vector<double> guard(h * w, 0.0);
      for (std::size_t p = 0; p < valid.size(); ++p)
        if (!valid[p]) guard[p] = kInvalidErr;
      errs[i] = add(err, Tensor::from_data({h, w}, std::move(guard)));
      valids[i] = std::move(valid);
    }
    Tensor err_min = min_reprojection(errs[0], errs[1]);
    std::vector<std::uint8_t> any_valid(h * w);
    for (std::size_t p = 0; p < any_valid.size(); ++p)
      any_valid[p] = valids[0][p] || valids[1][p];

    const auto mu = auto_mask(tgt_cur, tgt_prev, tgt_next, err_min.detach(), tie_noise);
    bool deg = false;
    photo_terms.push_back(masked_photometric_loss(err_min, mu, confidence, any_valid, &deg));
    degenerate = degenerate || deg;
    smooth_terms.push_back(smoothness_loss(disp_full, target.cur));
  }

  SampleLoss out;
  out.loss = total_loss(photo_terms, smooth_terms, cfg_.lambda, &out.breakdown);
  out.suppressed = suppressed;
  out.degenerate = degenerate;
  return out;
}

TrainLogRecord Trainer::train_step(const std::vector<const FrameTriplet*>& batch,
                                   std::size_t epoch, std::size_t step,
                                   std::size_t total_steps) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  for (auto& [name, t] : all_params()) t.zero_grad();

  Tensor loss;
  TrainLogRecord rec;
  rec.step = step;
  rec.epoch = epoch;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    SampleLoss s = sample_loss(*batch[i], epoch, step, i);
    loss = i == 0 ? s.loss : add(loss, s.loss);
    rec.total += s.breakdown.total;
    rec.photometric += s.breakdown.photometric;
    rec.smoothness += s.breakdown.smoothness;
    rec.suppressed_fraction += s.suppressed;
    rec.degenerate = rec.degenerate || s.degenerate;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  loss = loss * inv;
  rec.total *= inv;
  rec.photometric *= inv;
  rec.smoothness *= inv;
  rec.suppressed_fraction *= inv;

  if (!std::isfinite(rec.total))
    throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(step) +
                             " epoch " + std::to_string(epoch) + " (total=" +
                             std::to_string(rec.total) + ")");

  loss.backward();
  rec.lr = cosine_lr(step, total_steps, cfg_.lr0);
  apply_adamw(rec.lr);
  rec.wall_clock_s = now_seconds() - train_start_time_;
  return rec;
}

void Trainer::apply_adamw(double lr) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  auto params = all_params();

  double norm_sq = 0;
  for (auto& [name, t] : params) {
    const double* g = t.grad_data();
    if (!g) continue;
    for (std::size_t i = 0; i < t.numel(); ++i) norm_sq += g[i] * g[i];
  }
  const double norm = std::sqrt(norm_sq);
  const double clip =
      cfg_.grad_clip_norm > 0 && norm > cfg_.grad_clip_norm ? cfg_.grad_clip_norm / norm : 1.0;

  ++opt_step_;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt_step_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt_step_));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& t = params[pi].second;
    const double* g = t.grad_data();
    double* v = t.data();
    auto& m = adam_m_[pi];
    auto& vv = adam_v_[pi];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double gi = (g ? g[i] : 0.0) * clip;
      m[i] = beta1 * m[i] + (1 - beta1) * gi;
      vv[i] = beta2 * vv[i] + (1 - beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = vv[i] / bc2;
      v[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + cfg_.weight_decay * v[i]);
    }
  }
}

Checkpoint Trainer::make_checkpoint(std::uint64_t step) const {
  Checkpoint ckpt;
  ckpt.mode = cfg_.encoder_mode;
  ckpt.step = step;
  store_to_checkpoint(depth_->params(), "depth.", ckpt);
  store_to_checkpoint(pose_->params(), "pose.", ckpt);
  auto params = all_params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ckpt.set("opt.m." + params[i].first, params[i].second.shape(), adam_m_[i]);
    ckpt.set("opt.v." + params[i].first, params[i].second.shape(), adam_v_[i]);
  }
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (ckpt.mode != cfg_.encoder_mode)
    throw std::runtime_error("checkpoint encoder mode does not match the configuration");
  checkpoint_to_store(ckpt, "depth.", depth_->params());
  checkpoint_to_store(ckpt, "pose.", pose_->params());
  auto params = all_params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* m = ckpt.find("opt.m." + params[i].first);
    const auto* v = ckpt.find("opt.v." + params[i].first);
    if (m) adam_m_[i] = m->second;
    if (v) adam_v_[i] = v->second;
  }
  opt_step_ = ckpt.step;
}

void Trainer::train(const std::vector<FrameTriplet>& dataset, const std::string& out_dir,
                    std::ostream* log) {
  if (dataset.empty()) throw std::invalid_argument("train: dataset yields no triplets");
  const std::size_t n = dataset.size();
  const std::size_t steps_per_epoch = (n + cfg_.batch_size - 1) / cfg_.batch_size;
  const std::size_t total_steps = std::max<std::size_t>(1, cfg_.epochs * steps_per_epoch);
  train_start_time_ = now_seconds();

  if (!out_dir.empty()) fs::create_directories(out_dir);
  const std::size_t start_epoch = steps_per_epoch ? opt_step_ / steps_per_epoch : 0;

  std::size_t global_step = opt_step_;
  for (std::size_t epoch = start_epoch; epoch < cfg_.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(Rng::derive(cfg_.seed, 0x54F7, epoch));
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);

    for (std::size_t b = 0; b < n; b += cfg_.batch_size) {
      std::vector<const FrameTriplet*> batch;
      for (std::size_t i = b; i < std::min(n, b + cfg_.batch_size); ++i)
        batch.push_back(&dataset[order[i]]);
      TrainLogRecord rec = train_step(batch, epoch, global_step, total_steps);
      if (log) *log << rec.to_json().dump() << "\n";
      ++global_step;
    }
    if (!out_dir.empty())
      save_checkpoint((fs::path(out_dir) / ("epoch_" + std::to_string(epoch) + ".ckpt")).string(),
                      make_checkpoint(global_step));
  }
  if (!out_dir.empty())
    save_checkpoint((fs::path(out_dir) / "final.ckpt").string(), make_checkpoint(global_step));
}

Map Trainer::predict_depth(const Image& frame) const {
  NoGradGuard ng;
  auto disps = depth_->forward(frame.to_tensor());
  Tensor depth = disparity_to_depth(disps[0], cfg_.d_min, cfg_.d_max);
  return Map::from_tensor(depth);
}

EvalOutput Trainer::evaluate(const std::vector<FrameTriplet>& dataset) const {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  AccuracyOptions scaled{true, cfg_.d_max, cfg_.d_min};
  AccuracyOptions unscaled{false, cfg_.d_max, cfg_.d_min};
  AccuracyAccumulator acc_scaled(scaled), acc_unscaled(unscaled);
  bool any_gt = false;
  for (const auto& trip : dataset) {
    if (!trip.gt_depth) continue;
    any_gt = true;
    const Map pred = predict_depth(trip.cur);
    acc_scaled.add(pred, *trip.gt_depth, trip.gt_depth_valid);
    acc_unscaled.add(pred, *trip.gt_depth, trip.gt_depth_valid);
  }
  if (!any_gt) throw std::invalid_argument("evaluate: dataset has no ground-truth depth");

  EvalOutput out;
  out.accuracy = acc_scaled.report();
  out.accuracy_unscaled = acc_unscaled.report();

  const CameraIntrinsics& k = dataset.front().intrinsics;
  ModelProfile prof = profile_depth_net(cfg_.encoder_mode, k.width, k.height);
  ModelProfile pose_prof = profile_pose_net(k.width, k.height);
  out.complexity.param_count = count_params(depth_->params()) + count_params(pose_->params());
  out.complexity.flops = prof.total_flops() + pose_prof.total_flops();
  out.complexity.input_width = k.width;
  out.complexity.input_height = k.height;
  Tensor in = dataset.front().cur.to_tensor();
  FpsStats fps = measure_fps(
      [&] {
        NoGradGuard ng;
        depth_->forward(in);
      },
      cfg_.fps_warmup, cfg_.fps_iters, cfg_.fps_repetitions);
  out.complexity.fps = fps.fps;
  out.complexity.fps_std = fps.fps_std;
  out.complexity.warmup = fps.warmup;
  out.complexity.iters = fps.iters;
  out.complexity.repetitions = fps.repetitions;
  return out;
}

}  // namespace endodepth
