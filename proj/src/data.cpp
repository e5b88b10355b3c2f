#include "endodepth/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "endodepth/png_io.hpp"
#include "endodepth/reflection.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace endodepth {

namespace {

// --- color jitter helpers ---

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx <= 0 ? 0.0 : d / mx;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == r)
    h = std::fmod((g - b) / d + 6.0, 6.0);
  else if (mx == g)
    h = (b - r) / d + 2.0;
  else
    h = (r - g) / d + 4.0;
  h /= 6.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double h6 = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s);
  const double q = v * (1 - f * s);
  const double t = v * (1 - (1 - f) * s);
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

void clamp01(Image& im) {
  for (double& v : im.data) v = std::clamp(v, 0.0, 1.0);
}

void apply_brightness(Image& im, double factor) {
  for (double& v : im.data) v *= factor;
  clamp01(im);
}

void apply_contrast(Image& im, double factor) {
  Map lum = luminance(im);
  double m = 0;
  for (double v : lum.data) m += v;
  m /= static_cast<double>(lum.data.size());
  for (double& v : im.data) v = (v - m) * factor + m;
  clamp01(im);
}

void apply_saturation(Image& im, double factor) {
  Map lum = luminance(im);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < lum.data.size(); ++i) {
      double& v = im.data[c * lum.data.size() + i];
      v = lum.data[i] + (v - lum.data[i]) * factor;
    }
  clamp01(im);
}

void apply_hue(Image& im, double delta) {
  const std::size_t n = im.height * im.width;
  for (std::size_t i = 0; i < n; ++i) {
    double h, s, v;
    rgb_to_hsv(im.data[i], im.data[n + i], im.data[2 * n + i], h, s, v);
    h = std::fmod(h + delta + 1.0, 1.0);
    hsv_to_rgb(h, s, v, im.data[i], im.data[n + i], im.data[2 * n + i]);
  }
  clamp01(im);
}

void flip_image(Image& im) {
  for (std::size_t c = 0; c < im.channels; ++c)
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width / 2; ++x)
        std::swap(im.at(c, y, x), im.at(c, y, im.width - 1 - x));
}

void flip_map(Map& m) {
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width / 2; ++x)
      std::swap(m.at(y, x), m.at(y, m.width - 1 - x));
}

}  // namespace

std::pair<FrameTriplet, FrameTriplet> augment(const FrameTriplet& triplet,
                                              const AugmentationConfig& cfg, Rng& rng) {
  // Fixed draw order keeps streams reproducible regardless of which ops fire.
  const bool do_flip = rng.uniform() < cfg.flip_prob;
  const bool do_bright = rng.uniform() < cfg.color_prob;
  const double bright = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness);
  const bool do_contrast = rng.uniform() < cfg.color_prob;
  const double contrast = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast);
  const bool do_sat = rng.uniform() < cfg.color_prob;
  const double sat = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation);
  const bool do_hue = rng.uniform() < cfg.color_prob;
  const double hue = rng.uniform(-cfg.hue, cfg.hue);

  FrameTriplet target = triplet;
  if (do_flip) {
    for (Image* im : {&target.prev, &target.cur, &target.next}) flip_image(*im);
    if (target.gt_depth) flip_map(*target.gt_depth);
    if (!target.gt_depth_valid.empty()) {
      Map tmp;
      tmp.height = target.cur.height;
      tmp.width = target.cur.width;
      tmp.data.assign(target.gt_depth_valid.begin(), target.gt_depth_valid.end());
      flip_map(tmp);
      for (std::size_t i = 0; i < tmp.data.size(); ++i)
        target.gt_depth_valid[i] = tmp.data[i] != 0;
    }
    target.intrinsics.cx = static_cast<double>(target.intrinsics.width - 1) - target.intrinsics.cx;
    // mirrored poses are no longer rigid-consistent with the originals
    target.pose_to_prev.reset();
    target.pose_to_next.reset();
  }

  FrameTriplet input = target;
  for (Image* im : {&input.prev, &input.cur, &input.next}) {
    if (do_bright) apply_brightness(*im, bright);
    if (do_contrast) apply_contrast(*im, contrast);
    if (do_sat) apply_saturation(*im, sat);
    if (do_hue) apply_hue(*im, hue);
  }
  return {input, target};
}

// ---------------------------------------------------------------------------
// synthetic scene renderer

namespace {

struct TextureSpec {
  // three sinusoidal harmonics per channel, world-anchored
  std::array<std::array<double, 3>, 9> k;   // wave vectors (rad/mm)
  std::array<double, 9> phase;
  std::array<double, 9> amp;
  double mid, half;
};

TextureSpec make_texture(const SyntheticSceneConfig& cfg, const CameraIntrinsics& k) {
  Rng rng(Rng::derive(cfg.seed, 0x7E97));
  TextureSpec t;
  // keep image-space frequency under ~0.09 cycles/px at the base depth so
  // bilinear interpolation error stays well below the warp tolerance
  const double kmax = 2.0 * 3.14159265358979324 * 0.09 * k.fx / cfg.base_depth_mm;
  const std::array<double, 3> rel{1.0, 0.55, 0.3};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t j = 0; j < 3; ++j) {
      const std::size_t idx = c * 3 + j;
      const double mag = kmax * rng.uniform(0.25, 1.0);
      const double az = rng.uniform(0.0, 6.283185307179586);
      const double el = rng.uniform(-0.5, 0.5);
      t.k[idx] = {mag * std::cos(az) * std::cos(el), mag * std::sin(az) * std::cos(el),
                  mag * std::sin(el)};
      t.phase[idx] = rng.uniform(0.0, 6.283185307179586);
      t.amp[idx] = rel[j];
    }
    const double norm = rel[0] + rel[1] + rel[2];
    for (std::size_t j = 0; j < 3; ++j) t.amp[c * 3 + j] /= norm;
  }
  const double tex_min = 0.1;
  t.mid = 0.5 * (tex_min + cfg.texture_max);
  t.half = 0.5 * (cfg.texture_max - tex_min);
  return t;
}

double texture_channel(const TextureSpec& t, std::size_t c, const std::array<double, 3>& p) {
  double raw = 0;
  for (std::size_t j = 0; j < 3; ++j) {
    const std::size_t idx = c * 3 + j;
    raw += t.amp[idx] *
           std::sin(t.k[idx][0] * p[0] + t.k[idx][1] * p[1] + t.k[idx][2] * p[2] +
                    t.phase[idx]);
  }
  return t.mid + t.half * raw;
}

std::vector<PoseSE3> make_trajectory(const SyntheticSceneConfig& cfg) {
  std::vector<PoseSE3> poses;
  const double amp = 0.02 * cfg.base_depth_mm * cfg.motion_scale;
  const double rot = 0.004 * cfg.motion_scale;
  for (std::size_t i = 0; i < cfg.frames; ++i) {
    const double fi = static_cast<double>(i);
    std::array<double, 3> w{rot * std::sin(0.8 * fi + 0.5), rot * std::sin(0.6 * fi + 1.1),
                            0.5 * rot * std::sin(0.4 * fi)};
    std::array<double, 3> t{amp * std::sin(0.9 * fi), 0.6 * amp * std::sin(0.7 * fi + 1.3),
                            0.4 * amp * std::sin(0.5 * fi + 0.7)};
    if (i == 0) {
      poses.push_back(PoseSE3::identity());
    } else {
      poses.push_back(PoseSE3::from_axis_angle(w, t));
    }
  }
  return poses;
}

}  // namespace

SyntheticSequence synth_generate(const SyntheticSceneConfig& cfg) {
  if (cfg.frames < 3)
    throw std::invalid_argument("synth_generate: need at least 3 frames for triplets");
  SyntheticSequence seq;
  seq.intrinsics = cfg.intrinsics.value_or([&] {
    CameraIntrinsics k;
    k.width = cfg.width;
    k.height = cfg.height;
    k.fx = k.fy = 1.1 * static_cast<double>(std::min(cfg.width, cfg.height));
    k.cx = 0.5 * static_cast<double>(cfg.width - 1);
    k.cy = 0.5 * static_cast<double>(cfg.height - 1);
    return k;
  }());
  const CameraIntrinsics& k = seq.intrinsics;
  k.validate();
  seq.poses = cfg.trajectory.empty() ? make_trajectory(cfg) : cfg.trajectory;
  if (seq.poses.size() != cfg.frames)
    throw std::invalid_argument("synth_generate: trajectory length does not match frame count");

  const TextureSpec tex = make_texture(cfg, k);

  // world surfaces
  const double plane_z = cfg.base_depth_mm;
  std::array<double, 3> tilt_n{0.3, -0.2, 1.0};
  {
    const double nn = std::sqrt(tilt_n[0] * tilt_n[0] + tilt_n[1] * tilt_n[1] + tilt_n[2] * tilt_n[2]);
    for (double& v : tilt_n) v /= nn;
  }
  const double tilt_c = tilt_n[2] * plane_z;
  const std::array<double, 3> sphere_c{0, 0, cfg.base_depth_mm};
  const double sphere_r = cfg.sphere_radius_mm;
  const double back_z = cfg.base_depth_mm + 2.5 * sphere_r;

  // specular blobs drift a little per frame, so they violate the photometric
  // consistency the way real view-dependent highlights do
  Rng blob_rng(Rng::derive(cfg.seed, 0xB10B));
  std::vector<std::array<double, 2>> blob_pos(cfg.blob_count);
  for (auto& p : blob_pos) {
    p[0] = blob_rng.uniform(cfg.blob_radius_px, static_cast<double>(k.width - 1) - cfg.blob_radius_px);
    p[1] = blob_rng.uniform(cfg.blob_radius_px, static_cast<double>(k.height - 1) - cfg.blob_radius_px);
  }

  for (std::size_t f = 0; f < cfg.frames; ++f) {
    const PoseSE3& pose = seq.poses[f];
    const auto& rot = pose.rotation;
    const auto& org = pose.translation;

    // camera must stay on the viewing side of the surface
    if (cfg.geometry == SyntheticSceneConfig::Geometry::Plane && org[2] >= plane_z - 1.0)
      throw std::invalid_argument("synth_generate: degenerate trajectory (camera at the plane)");
    if (cfg.geometry == SyntheticSceneConfig::Geometry::TiltedPlane &&
        tilt_n[0] * org[0] + tilt_n[1] * org[1] + tilt_n[2] * org[2] >= tilt_c - 1.0)
      throw std::invalid_argument("synth_generate: degenerate trajectory (camera at the plane)");
    if (cfg.geometry == SyntheticSceneConfig::Geometry::Sphere) {
      const double dx = org[0] - sphere_c[0], dy = org[1] - sphere_c[1], dz = org[2] - sphere_c[2];
      if (std::sqrt(dx * dx + dy * dy + dz * dz) <= sphere_r + 1.0)
        throw std::invalid_argument("synth_generate: degenerate trajectory (camera inside sphere)");
      if (org[2] >= back_z - 1.0)
        throw std::invalid_argument("synth_generate: degenerate trajectory (camera at backdrop)");
    }

    Image img(3, k.height, k.width);
    Map depth(k.height, k.width);
    for (std::size_t y = 0; y < k.height; ++y) {
      for (std::size_t x = 0; x < k.width; ++x) {
        const std::array<double, 3> v{(static_cast<double>(x) - k.cx) / k.fx,
                                      (static_cast<double>(y) - k.cy) / k.fy, 1.0};
        std::array<double, 3> dw;
        for (int i = 0; i < 3; ++i)
          dw[i] = rot[i * 3 + 0] * v[0] + rot[i * 3 + 1] * v[1] + rot[i * 3 + 2] * v[2];

        double s = -1.0;
        switch (cfg.geometry) {
          case SyntheticSceneConfig::Geometry::Plane:
            s = (plane_z - org[2]) / dw[2];
            break;
          case SyntheticSceneConfig::Geometry::TiltedPlane: {
            const double denom = tilt_n[0] * dw[0] + tilt_n[1] * dw[1] + tilt_n[2] * dw[2];
            s = (tilt_c - (tilt_n[0] * org[0] + tilt_n[1] * org[1] + tilt_n[2] * org[2])) / denom;
            break;
          }
          case SyntheticSceneConfig::Geometry::Sphere: {
            const std::array<double, 3> oc{org[0] - sphere_c[0], org[1] - sphere_c[1],
                                           org[2] - sphere_c[2]};
            const double a = dw[0] * dw[0] + dw[1] * dw[1] + dw[2] * dw[2];
            const double b = 2.0 * (oc[0] * dw[0] + oc[1] * dw[1] + oc[2] * dw[2]);
            const double cc = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - sphere_r * sphere_r;
            const double disc = b * b - 4 * a * cc;
            if (disc >= 0) {
              const double root = (-b - std::sqrt(disc)) / (2 * a);
              if (root > 0) s = root;
            }
            if (s < 0) s = (back_z - org[2]) / dw[2];  // miss: backdrop plane
            break;
          }
        }
        if (!(s > 0) || !std::isfinite(s))
          throw std::invalid_argument("synth_generate: degenerate trajectory (ray misses scene)");

        depth.at(y, x) = s;  // camera-frame z: the ray direction has unit z in camera coords
        const std::array<double, 3> p{org[0] + s * dw[0], org[1] + s * dw[1], org[2] + s * dw[2]};
        for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = texture_channel(tex, c, p);
      }
    }

    for (std::size_t bi = 0; bi < cfg.blob_count; ++bi) {
      if (f > 0) {
        blob_pos[bi][0] += blob_rng.uniform(-1.5, 1.5);
        blob_pos[bi][1] += blob_rng.uniform(-1.5, 1.5);
      }
      const double sigma = cfg.blob_radius_px * 0.5;
      for (std::size_t y = 0; y < k.height; ++y)
        for (std::size_t x = 0; x < k.width; ++x) {
          const double du = static_cast<double>(x) - blob_pos[bi][0];
          const double dv = static_cast<double>(y) - blob_pos[bi][1];
          const double bump = cfg.blob_peak * std::exp(-(du * du + dv * dv) / (2 * sigma * sigma));
          if (bump < 1e-4) continue;
          for (std::size_t c = 0; c < 3; ++c)
            img.at(c, y, x) = std::min(1.0, img.at(c, y, x) + bump);
        }
    }

    seq.images.push_back(std::move(img));
    seq.depths.push_back(std::move(depth));
  }
  return seq;
}

std::vector<FrameTriplet> to_triplets(const SyntheticSequence& seq) {
  std::vector<FrameTriplet> out;
  for (std::size_t t = 1; t + 1 < seq.images.size(); ++t) {
    FrameTriplet trip;
    trip.prev = seq.images[t - 1];
    trip.cur = seq.images[t];
    trip.next = seq.images[t + 1];
    trip.intrinsics = seq.intrinsics;
    trip.gt_depth = seq.depths[t];
    trip.gt_depth_valid.assign(seq.depths[t].numel(), 1);
    trip.pose_to_prev = seq.poses[t - 1].inverse().compose(seq.poses[t]);
    trip.pose_to_next = seq.poses[t + 1].inverse().compose(seq.poses[t]);
    out.push_back(std::move(trip));
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset layout

namespace {

std::string frame_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06zu", i);
  return std::string(buf) + ".png";
}

json pose_to_json(const PoseSE3& p) {
  json m = json::array();
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) {
      if (r < 3 && c < 3)
        m.push_back(p.rotation[r * 3 + c]);
      else if (r < 3)
        m.push_back(p.translation[r]);
      else
        m.push_back(c == 3 ? 1.0 : 0.0);
    }
  }
  return m;
}

PoseSE3 pose_from_json(const json& m) {
  if (!m.is_array() || m.size() != 16)
    throw std::runtime_error("poses.json: each pose must be a 16-element row-major 4x4 matrix");
  PoseSE3 p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) p.rotation[r * 3 + c] = m[r * 4 + c].get<double>();
    p.translation[r] = m[r * 4 + 3].get<double>();
  }
  return p;
}

std::vector<FrameTriplet> load_one_sequence(const fs::path& dir) {
  const fs::path intr_path = dir / "intrinsics.json";
  if (!fs::exists(intr_path))
    throw std::runtime_error("missing intrinsics file: " + intr_path.string());
  json intr;
  {
    std::ifstream is(intr_path);
    is >> intr;
  }
  CameraIntrinsics k;
  k.fx = intr.at("fx").get<double>();
  k.fy = intr.at("fy").get<double>();
  k.cx = intr.at("cx").get<double>();
  k.cy = intr.at("cy").get<double>();
  k.width = intr.at("width").get<std::size_t>();
  k.height = intr.at("height").get<std::size_t>();
  k.validate();

  const fs::path frames_dir = dir / "frames";
  if (!fs::exists(frames_dir))
    throw std::runtime_error("missing frames directory: " + frames_dir.string());
  std::map<std::size_t, fs::path> frames;
  for (const auto& entry : fs::directory_iterator(frames_dir)) {
    if (entry.path().extension() != ".png") continue;
    frames[std::stoull(entry.path().stem().string())] = entry.path();
  }
  if (frames.empty()) throw std::runtime_error("no frames in " + frames_dir.string());
  const std::size_t first = frames.begin()->first;
  const std::size_t last = frames.rbegin()->first;
  for (std::size_t i = first; i <= last; ++i)
    if (!frames.count(i)) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%06zu", i);
      throw std::runtime_error("missing frame " + std::string(buf) + " in " +
                               frames_dir.string());
    }

  std::vector<PoseSE3> poses;
  const fs::path poses_path = dir / "poses.json";
  if (fs::exists(poses_path)) {
    json jp;
    std::ifstream is(poses_path);
    is >> jp;
    for (const auto& m : jp) poses.push_back(pose_from_json(m));
    if (poses.size() != frames.size())
      throw std::runtime_error("poses.json length does not match frame count in " + dir.string());
  }

  std::vector<Image> images;
  for (std::size_t i = first; i <= last; ++i) {
    Image im = read_png_rgb8(frames.at(i).string());
    if (im.width != k.width || im.height != k.height)
      throw std::runtime_error("frame size does not match intrinsics: " +
                               frames.at(i).string());
    images.push_back(std::move(im));
  }

  const fs::path depth_dir = dir / "depth";
  std::vector<FrameTriplet> out;
  for (std::size_t t = 1; t + 1 < images.size(); ++t) {
    FrameTriplet trip;
    trip.prev = images[t - 1];
    trip.cur = images[t];
    trip.next = images[t + 1];
    trip.intrinsics = k;
    const fs::path dpath = depth_dir / frame_name(first + t);
    if (fs::exists(dpath)) {
      std::vector<std::uint16_t> raw;
      std::size_t dh, dw;
      read_png_gray16(dpath.string(), raw, dh, dw);
      if (dh != k.height || dw != k.width)
        throw std::runtime_error("depth size does not match intrinsics: " + dpath.string());
      Map depth(dh, dw);
      trip.gt_depth_valid.assign(raw.size(), 0);
      for (std::size_t i = 0; i < raw.size(); ++i) {
        depth.data[i] = raw[i] / kDepthScale;  // raw 0 stays 0 and is flagged invalid
        trip.gt_depth_valid[i] = raw[i] != 0;
      }
      trip.gt_depth = std::move(depth);
    }
    if (!poses.empty()) {
      trip.pose_to_prev = poses[t - 1].inverse().compose(poses[t]);
      trip.pose_to_next = poses[t + 1].inverse().compose(poses[t]);
    }
    out.push_back(std::move(trip));
  }
  return out;
}

}  // namespace

void save_sequence(const std::string& dir, const SyntheticSequence& seq) {
  const fs::path root(dir);
  fs::create_directories(root / "frames");
  fs::create_directories(root / "depth");
  json intr{{"fx", seq.intrinsics.fx}, {"fy", seq.intrinsics.fy},
            {"cx", seq.intrinsics.cx}, {"cy", seq.intrinsics.cy},
            {"width", seq.intrinsics.width}, {"height", seq.intrinsics.height}};
  std::ofstream(root / "intrinsics.json") << intr.dump(2) << "\n";

  json jp = json::array();
  for (const auto& p : seq.poses) jp.push_back(pose_to_json(p));
  std::ofstream(root / "poses.json") << jp.dump() << "\n";

  for (std::size_t i = 0; i < seq.images.size(); ++i) {
    write_png_rgb8((root / "frames" / frame_name(i)).string(), seq.images[i]);
    std::vector<std::uint16_t> raw(seq.depths[i].numel());
    for (std::size_t j = 0; j < raw.size(); ++j) {
      const double v = std::round(seq.depths[i].data[j] * kDepthScale);
      raw[j] = static_cast<std::uint16_t>(std::clamp(v, 1.0, 65535.0));
    }
    write_png_gray16((root / "depth" / frame_name(i)).string(), raw, seq.depths[i].height,
                     seq.depths[i].width);
  }
}

std::vector<FrameTriplet> load_sequence(const std::string& path) {
  const fs::path root(path);
  if (!fs::exists(root)) throw std::runtime_error("dataset path does not exist: " + path);
  if (fs::exists(root / "frames")) return load_one_sequence(root);

  std::vector<fs::path> seq_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && entry.path().filename().string().rfind("sequence_", 0) == 0)
      seq_dirs.push_back(entry.path());
  }
  std::sort(seq_dirs.begin(), seq_dirs.end());
  if (seq_dirs.empty())
    throw std::runtime_error("no sequence_* directories (and no frames/) under " + path);
  std::vector<FrameTriplet> out;
  for (const auto& d : seq_dirs) {
    auto trips = load_one_sequence(d);
    out.insert(out.end(), std::make_move_iterator(trips.begin()),
               std::make_move_iterator(trips.end()));
  }
  return out;
}

}  // namespace endodepth
