#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "endodepth/geometry.hpp"
#include "endodepth/image.hpp"
#include "endodepth/rng.hpp"

namespace endodepth {

struct FrameTriplet {
  Image prev, cur, next;
  CameraIntrinsics intrinsics;
  std::optional<Map> gt_depth;                    // millimeters, for `cur`
  std::vector<std::uint8_t> gt_depth_valid;       // parallel to gt_depth
  std::optional<PoseSE3> pose_to_prev, pose_to_next;  // cur -> neighbor
};

struct AugmentationConfig {
  double flip_prob = 0.5;
  double color_prob = 0.5;  // each color op fires independently
  double brightness = 0.2, contrast = 0.2, saturation = 0.2;
  double hue = 0.05;
};

/// Returns (network-input triplet, loss-target triplet). Color jitter hits
/// only the network copy; a horizontal flip hits both and mirrors cx.
std::pair<FrameTriplet, FrameTriplet> augment(const FrameTriplet& triplet,
                                              const AugmentationConfig& cfg, Rng& rng);

struct SyntheticSceneConfig {
  enum class Geometry { Plane, TiltedPlane, Sphere };
  Geometry geometry = Geometry::Plane;
  std::size_t width = 64, height = 64;
  std::size_t frames = 10;
  double base_depth_mm = 60.0;       // plane depth / sphere background plane
  double sphere_radius_mm = 18.0;
  double texture_max = 0.9;          // upper bound of base texture values
  std::size_t blob_count = 0;        // specular blobs composited into images
  double blob_radius_px = 5.0;
  double blob_peak = 1.0;
  double motion_scale = 1.0;         // scales the generated trajectory
  std::uint64_t seed = 1;
  std::optional<CameraIntrinsics> intrinsics;  // derived from size if absent
  std::vector<PoseSE3> trajectory;             // camera-to-world; generated if empty
};

struct SyntheticSequence {
  std::vector<Image> images;
  std::vector<Map> depths;        // analytic camera-frame depth, mm
  std::vector<PoseSE3> poses;     // camera-to-world
  CameraIntrinsics intrinsics;
};

/// Ray-casting renderer over an analytic textured surface; the ground-truth
/// oracle for the warp/loss/mask stack. Independent of synthesize_view.
SyntheticSequence synth_generate(const SyntheticSceneConfig& cfg);

std::vector<FrameTriplet> to_triplets(const SyntheticSequence& seq);

/// Writes `<dir>/frames/%06d.png`, `intrinsics.json`, `depth/%06d.png`
/// (uint16, 1/256 mm) and `poses.json` (4x4 row-major camera-to-world).
void save_sequence(const std::string& dir, const SyntheticSequence& seq);

/// Loads one sequence directory, or a dataset root containing sequence_*
/// subdirectories (triplets never cross sequence boundaries).
std::vector<FrameTriplet> load_sequence(const std::string& path);

constexpr double kDepthScale = 256.0;  // uint16 steps per millimeter

}  // namespace endodepth
