// Command-line front end: train, eval, profile, synth, mask, warp.
// JSON results go to stdout, diagnostics to stderr. Exit codes:
// 0 success, 1 usage error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "endodepth/data.hpp"
#include "endodepth/geometry.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/metrics.hpp"
#include "endodepth/png_io.hpp"
#include "endodepth/reflection.hpp"
#include "endodepth/reports.hpp"
#include "endodepth/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace endodepth;

namespace {

bool parse_size(const std::string& s, std::size_t& w, std::size_t& h) {
  const auto x = s.find('x');
  if (x == std::string::npos) return false;
  try {
    w = std::stoull(s.substr(0, x));
    h = std::stoull(s.substr(x + 1));
  } catch (...) {
    return false;
  }
  return w > 0 && h > 0;
}

void require_divisible16(std::size_t w, std::size_t h, const std::string& flag) {
  if (w % 16 != 0 || h % 16 != 0)
    throw CLI::ValidationError(flag, "size " + std::to_string(w) + "x" + std::to_string(h) +
                                         " must be divisible by 16");
}

/// Applies `--set a.b.c=value` style overrides onto a JSON config tree.
void apply_override(json& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw CLI::ValidationError("--set", "expected key=value, got '" + kv + "'");
  const std::string key = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (...) {
    value = raw;  // plain string
  }
  json* node = &cfg;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (part.empty()) throw CLI::ValidationError("--set", "bad key '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

TrainConfig build_config(const std::string& config_path, const std::vector<std::string>& sets) {
  json cfg = json::object();
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is) throw std::runtime_error("cannot open config file: " + config_path);
    is >> cfg;
  }
  for (const auto& kv : sets) apply_override(cfg, kv);
  if (const char* env_seed = std::getenv("ENDODEPTH_SEED")) {
    cfg["seed"] = std::stoull(env_seed);
  }
  TrainConfig out = TrainConfig::from_json(cfg);
  // reject unknown top-level keys so typos do not silently disappear
  const json known = out.to_json();
  for (auto it = cfg.begin(); it != cfg.end(); ++it)
    if (!known.contains(it.key()))
      throw std::runtime_error("unknown config key '" + it.key() + "'");
  return out;
}

Map error_heatmap(const Image& a, const Image& b) {
  Map err(a.height, a.width);
  for (std::size_t y = 0; y < a.height; ++y)
    for (std::size_t x = 0; x < a.width; ++x) {
      double e = 0;
      for (std::size_t c = 0; c < a.channels; ++c)
        e += std::fabs(a.at(c, y, x) - b.at(c, y, x));
      err.at(y, x) = e / static_cast<double>(a.channels);
    }
  return err;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised monocular depth estimation for endoscopic-style imagery"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir = ".", checkpoint_path, image_path, out_path;
  std::vector<std::string> sets;
  std::string mode_str = "efficiency", size_str = "320x256", geometry = "plane";
  std::size_t frames = 10, blobs = 0;
  std::size_t synth_w = 64, synth_h = 64;
  std::uint64_t synth_seed = 1;
  double tau_flag = -1.0, k_flag = 50.0;
  std::size_t fps_iters = 10, fps_warmup = 2, fps_reps = 3;
  std::size_t warp_index = 0;
  std::string warp_source = "next";
  bool strict_flops = false;
  int verbosity = 0;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file (TrainConfig fields)");
    cmd->add_option("--set", sets, "override config values, e.g. --set lr0=1e-3")
        ->take_all();
    cmd->add_flag("-v,--verbose", verbosity, "more diagnostics on stderr");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "self-supervised training");
  train_cmd->add_option("--data", data_dir, "dataset root")->required();
  train_cmd->add_option("--out", out_dir, "output directory for checkpoints and logs");
  train_cmd->add_option("--epochs", "--set epochs shortcut")
      ->each([&](const std::string& v) { sets.push_back("epochs=" + v); });
  add_common(train_cmd);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint against ground truth");
  eval_cmd->add_option("--data", data_dir, "dataset root with depth maps")->required();
  eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  add_common(eval_cmd);

  CLI::App* profile_cmd = app.add_subcommand("profile", "parameter/FLOPs/FPS report");
  profile_cmd->add_option("--mode", mode_str, "efficiency|performance");
  profile_cmd->add_option("--input", size_str, "input size WxH (divisible by 16)");
  profile_cmd->add_option("--fps-iters", fps_iters, "timed iterations per repetition");
  profile_cmd->add_option("--fps-warmup", fps_warmup, "unmeasured warmup passes");
  profile_cmd->add_option("--fps-reps", fps_reps, "repetitions");
  profile_cmd->add_flag("--flops-2x-macs", strict_flops, "count each MAC as 2 FLOPs");
  add_common(profile_cmd);

  CLI::App* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
  synth_cmd->add_option("--out", out_dir, "output dataset directory")->required();
  synth_cmd->add_option("--frames", frames, "number of frames");
  synth_cmd->add_option("--geometry", geometry, "plane|tilted|sphere");
  synth_cmd->add_option("--size", size_str, "frame size WxH")->default_val("64x64");
  synth_cmd->add_option("--blobs", blobs, "specular blob count");
  synth_cmd->add_option("--seed", synth_seed, "scene seed");
  add_common(synth_cmd);

  CLI::App* mask_cmd = app.add_subcommand("mask", "confidence-mask preview PNG");
  mask_cmd->add_option("--image", image_path, "input RGB PNG")->required();
  mask_cmd->add_option("--out", out_path, "output grayscale PNG")->required();
  mask_cmd->add_option("--tau", tau_flag, "fixed threshold in [0,1]; default percentile(95)");
  mask_cmd->add_option("--k", k_flag, "logistic steepness");
  add_common(mask_cmd);

  CLI::App* warp_cmd = app.add_subcommand("warp", "ground-truth warp check");
  warp_cmd->add_option("--data", data_dir, "dataset with depth + poses")->required();
  warp_cmd->add_option("--out", out_dir, "output directory")->required();
  warp_cmd->add_option("--index", warp_index, "triplet index");
  warp_cmd->add_option("--source", warp_source, "prev|next");
  add_common(warp_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) {
      TrainConfig cfg = build_config(config_path, sets);
      auto dataset = load_sequence(data_dir);
      if (!dataset.empty()) {
        const auto& k = dataset.front().intrinsics;
        require_divisible16:
        require_divisible f16(k.width, k.height, "--data");
      }
      std::cerr << "training on " << dataset.size() << " triplets, " << cfg.epochs
                << " epochs\n";
      Trainer trainer(cfg);
      fs::create_directories(out_dir);
      std::ofstream log((fs::path(out_dir) / "train_log.ndjson").string());
      std::ofstream cfg_out((fs::path(out_dir) / "config.json").string());
      cfg_out << cfg.to_json().dump(2) << "\n";
      trainer.train(dataset, out_dir, &log);
      std::cerr << "done; checkpoints in " << out_dir << "\n";
      return 0;
    }

    if (*eval_cmd) {
      TrainConfig cfg = build_config(config_path, sets);
      Checkpoint ckpt = load_checkpoint(checkpoint_path);
      cfg.encoder_mode = ckpt.mode;
      Trainer trainer(cfg);
      trainer.restore(ckpt);
      auto dataset = load_sequence(data_dir);
      EvalOutput out = trainer.evaluate(dataset);
      std::cout << to_json(out).dump(2) << "\n";
      return 0;
    }

    if (*profile_cmd) {
      std::size_t w, h;
      if (!parse_size(size_str, w, h))
        throw CLI::ValidationError("--input", "expected WxH, got '" + size_str + "'");
      require_divisible16(w, h, "--input");
      const EncoderMode mode = encoder_mode_from_string(mode_str);
      TrainConfig cfg = build_config(config_path, sets);
      cfg.encoder_mode = mode;
      DepthNet depth(mode, cfg.seed);
      PoseNet pose(cfg.seed);
      ComplexityReport rep;
      rep.param_count = count_params(depth.params()) + count_params(pose.params());
      rep.flops = profile_depth_net(mode, w, h).total_flops(strict_flops) +
                  profile_pose_net(w, h).total_flops(strict_flops);
      rep.flop_convention = strict_flops ? "2x-macs" : "macs";
      rep.input_width = w;
      rep.input_height = h;
      Tensor input = Tensor::zeros({3, h, w});
      FpsStats fps = measure_fps(
          [&] {
            NoGradGuard ng;
            depth.forward(input);
          },
          fps_warmup, fps_iters, fps_reps);
      rep.fps = fps.fps;
      rep.fps_std = fps.fps_std;
      rep.warmup = fps.warmup;
      rep.iters = fps.iters;
      rep.repetitions = fps.repetitions;
      std::cout << to_json(rep).dump(2) << "\n";
      return 0;
    }

    if (*synth_cmd) {
      SyntheticSceneConfig scfg;
      if (!parse_size(size_str, scfg.width, scfg.height))
        throw CLI::ValidationError("--size", "expected WxH, got '" + size_str + "'");
      require_divisible16(scfg.width, scfg.height, "--size");
      scfg.frames = frames;
      scfg.blob_count = blobs;
      scfg.seed = synth_seed;
      if (blobs > 0) scfg.texture_max = 0.6;  // keep the base scene below blob luminance
      if (geometry == "plane")
        scfg.geometry = SyntheticSceneConfig::Geometry::Plane;
      else if (geometry == "tilted")
        scfg.geometry = SyntheticSceneConfig::Geometry::TiltedPlane;
      else if (geometry == "sphere")
        scfg.geometry = SyntheticSceneConfig::Geometry::Sphere;
      else
        throw CLI::ValidationError("--geometry", "expected plane|tilted|sphere, got '" +
                                                     geometry + "'");
      SyntheticSequence seq = synth_generate(scfg);
      save_sequence((fs::path(out_dir) / "sequence_0").string(), seq);
      std::cerr << "wrote " << seq.images.size() << " frames to " << out_dir << "\n";
      return 0;
    }

    if (*mask_cmd) {
      Image img = read_png_rgb8(image_path);
      Map ln = normalize_intensity(luminance(img));
      TauStrategy strat = tau_flag >= 0 ? TauStrategy::fixed(tau_flag)
                                        : TauStrategy::percentile_of(95.0);
      const double tau = estimate_tau(ln, strat);
      Map m = reflection_mask(ln, tau, k_flag);
      write_png_gray8(out_path, m);
      std::cerr << "tau=" << tau << " k=" << k_flag << " -> " << out_path << "\n";
      return 0;
    }

    if (*warp_cmd) {
      auto dataset = load_sequence(data_dir);
      if (warp_index >= dataset.size())
        throw std::runtime_error("--index out of range (have " +
                                 std::to_string(dataset.size()) + " triplets)");
      const FrameTriplet& trip = dataset[warp_index];
      if (!trip.gt_depth || !trip.pose_to_prev || !trip.pose_to_next)
        throw std::runtime_error("warp needs a dataset with depth/ and poses.json");
      const bool use_next = warp_source == "next";
      if (!use_next && warp_source != "prev")
        throw CLI::ValidationError("--source", "expected prev|next");
      const Image& source = use_next ? trip.next : trip.prev;
      const PoseSE3& pose = use_next ? *trip.pose_to_next : *trip.pose_to_prev;
      std::vector<std::uint8_t> valid;
      NoGradGuard ng;
      Tensor warped = synthesize_view(source.to_tensor(), trip.gt_depth->to_tensor(), pose,
                                      trip.intrinsics, valid);
      Image recon = Image::from_tensor(warped);
      fs::create_directories(out_dir);
      write_png_rgb8((fs::path(out_dir) / "reconstruction.png").string(), recon);
      Map err = error_heatmap(trip.cur, recon);
      double scale = 0;
      for (double v : err.data) scale = std::max(scale, v);
      if (scale > 0)
        for (double& v : err.data) v /= scale;
      write_png_gray8((fs::path(out_dir) / "error_heatmap.png").string(), err);
      double mean_err = 0;
      std::size_t nvalid = 0;
      for (std::size_t i = 0; i < valid.size(); ++i)
        if (valid[i]) {
          mean_err += err.data[i] * scale;
          ++nvalid;
        }
      json summary{{"mean_abs_error", nvalid ? mean_err / nvalid : 0.0},
                   {"valid_fraction", valid.empty() ? 0.0
                                                    : static_cast<double>(nvalid) / valid.size()}};
      std::cout << summary.dump(2) << "\n";
      return 0;
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
