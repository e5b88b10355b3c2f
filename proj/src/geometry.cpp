#include "endodepth/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace endodepth {

namespace {

// sin(sqrt(s))/sqrt(s) and (1-cos(sqrt(s)))/s with series fallbacks so the
// axis-angle map stays smooth through zero rotation.
double sinc_sqrt(double s) {
  if (s < 1e-8) return 1.0 - s / 6.0 + s * s / 120.0;
  const double th = std::sqrt(s);
  return std::sin(th) / th;
}

double d_sinc_sqrt(double s) {
  if (s < 1e-8) return -1.0 / 6.0 + s / 60.0;
  const double th = std::sqrt(s);
  return (th * std::cos(th) - std::sin(th)) / (2.0 * th * th * th);
}

double versine_over_s(double s) {
  if (s < 1e-8) return 0.5 - s / 24.0 + s * s / 720.0;
  const double th = std::sqrt(s);
  return (1.0 - std::cos(th)) / s;
}

double d_versine_over_s(double s) {
  if (s < 1e-8) return -1.0 / 24.0 + s / 360.0;
  const double th = std::sqrt(s);
  return (th * std::sin(th) / 2.0 - (1.0 - std::cos(th))) / (s * s);
}

}  // namespace

void CameraIntrinsics::validate() const {
  if (width < 1 || height < 1)
    throw std::invalid_argument("intrinsics: width and height must be >= 1");
  if (!(fx > 0) || !(fy > 0))
    throw std::invalid_argument("intrinsics: focal lengths must be positive");
  if (!(cx >= 0 && cx < static_cast<double>(width)) ||
      !(cy >= 0 && cy < static_cast<double>(height)))
    throw std::invalid_argument("intrinsics: principal point outside the image");
}

PoseSE3 PoseSE3::from_axis_angle(const std::array<double, 3>& w,
                                 const std::array<double, 3>& t) {
  const double s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  const double a = sinc_sqrt(s);
  const double b = versine_over_s(s);
  PoseSE3 p;
  // R = I + a*[w]x + b*[w]x^2
  const double wx = w[0], wy = w[1], wz = w[2];
  p.rotation = {1 + b * (-wz * wz - wy * wy), a * -wz + b * wx * wy, a * wy + b * wx * wz,
                a * wz + b * wx * wy,         1 + b * (-wz * wz - wx * wx), a * -wx + b * wy * wz,
                a * -wy + b * wx * wz,        a * wx + b * wy * wz, 1 + b * (-wy * wy - wx * wx)};
  p.translation = t;
  return p;
}

PoseSE3 PoseSE3::inverse() const {
  PoseSE3 inv;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) inv.rotation[i * 3 + j] = rotation[j * 3 + i];
  for (int i = 0; i < 3; ++i) {
    double s = 0;
    for (int j = 0; j < 3; ++j) s += inv.rotation[i * 3 + j] * translation[j];
    inv.translation[i] = -s;
  }
  return inv;
}

PoseSE3 PoseSE3::compose(const PoseSE3& other) const {
  PoseSE3 out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += rotation[i * 3 + k] * other.rotation[k * 3 + j];
      out.rotation[i * 3 + j] = s;
    }
  for (int i = 0; i < 3; ++i) {
    double s = translation[i];
    for (int k = 0; k < 3; ++k) s += rotation[i * 3 + k] * other.translation[k];
    out.translation[i] = s;
  }
  return out;
}

std::array<double, 3> PoseSE3::apply(const std::array<double, 3>& p) const {
  std::array<double, 3> out;
  for (int i = 0; i < 3; ++i)
    out[i] = rotation[i * 3 + 0] * p[0] + rotation[i * 3 + 1] * p[1] +
             rotation[i * 3 + 2] * p[2] + translation[i];
  return out;
}

void PoseSE3::validate(double tol) const {
  // R^T R = I
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += rotation[k * 3 + i] * rotation[k * 3 + j];
      const double want = i == j ? 1.0 : 0.0;
      if (std::fabs(s - want) > tol)
        throw std::invalid_argument("pose: rotation is not orthonormal");
    }
  const double det =
      rotation[0] * (rotation[4] * rotation[8] - rotation[5] * rotation[7]) -
      rotation[1] * (rotation[3] * rotation[8] - rotation[5] * rotation[6]) +
      rotation[2] * (rotation[3] * rotation[7] - rotation[4] * rotation[6]);
  if (std::fabs(det - 1.0) > tol)
    throw std::invalid_argument("pose: rotation determinant is not 1");
}

PixelGrid make_pixel_grid(const CameraIntrinsics& k) {
  k.validate();
  const std::size_t n = k.width * k.height;
  std::vector<double> coords(3 * n);
  for (std::size_t y = 0; y < k.height; ++y)
    for (std::size_t x = 0; x < k.width; ++x) {
      const std::size_t i = y * k.width + x;
      coords[i] = static_cast<double>(x);
      coords[n + i] = static_cast<double>(y);
      coords[2 * n + i] = 1.0;
    }
  PixelGrid g;
  g.coords = Tensor::from_data({3, n}, std::move(coords));
  g.width = k.width;
  g.height = k.height;
  return g;
}

Tensor backproject(const Tensor& depth, const CameraIntrinsics& k, const PixelGrid& grid) {
  const std::size_t n = grid.width * grid.height;
  if (depth.numel() != n)
    throw std::invalid_argument("backproject: depth size " + std::to_string(depth.numel()) +
                                " does not match grid " + std::to_string(n));
  // K^-1 * p, precomputed as a constant direction field.
  const double* pc = grid.coords.data();
  std::vector<double> dirs(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    dirs[i] = (pc[i] - k.cx) / k.fx;
    dirs[n + i] = (pc[n + i] - k.cy) / k.fy;
    dirs[2 * n + i] = 1.0;
  }
  Tensor dir_t = Tensor::from_data({3, n}, std::move(dirs));
  Tensor d = depth.reshape({n});
  return mul_row_broadcast(dir_t, d);
}

Tensor transform_points(const Tensor& points, const Tensor& rotation,
                        const Tensor& translation) {
  if (points.shape().size() != 2 || points.dim(0) != 3)
    throw std::invalid_argument("transform_points: points must be (3,N)");
  return add_col_broadcast(matmul(rotation, points), translation);
}

Tensor transform_points(const Tensor& points, const PoseSE3& pose) {
  pose.validate();
  return transform_points(points, pose_to_rotation_tensor(pose),
                          pose_to_translation_tensor(pose));
}

SampleCoords project(const Tensor& points, const CameraIntrinsics& k,
                     std::size_t height, std::size_t width) {
  if (points.shape().size() != 2 || points.dim(0) != 3)
    throw std::invalid_argument("project: points must be (3,N)");
  const std::size_t n = points.dim(1);
  Tensor x = row(points, 0);
  Tensor y = row(points, 1);
  Tensor z = row(points, 2);
  Tensor zc = clamp_min(z, kZEps);
  Tensor u = (x / zc) * k.fx + k.cx;
  Tensor v = (y / zc) * k.fy + k.cy;

  SampleCoords out;
  out.width = width;
  out.height = height;
  out.valid.assign(n, 0);
  const double* pz = z.data();
  const double* pu = u.data();
  const double* pv = v.data();
  const double umax = static_cast<double>(width - 1);
  const double vmax = static_cast<double>(height - 1);
  for (std::size_t i = 0; i < n; ++i) {
    out.valid[i] = pz[i] > kZEps && pu[i] >= 0.0 && pu[i] <= umax && pv[i] >= 0.0 &&
                   pv[i] <= vmax;
  }
  out.u = u.reshape({height, width});
  out.v = v.reshape({height, width});
  return out;
}

Tensor bilinear_sample(const Tensor& image, const SampleCoords& coords,
                       std::vector<std::uint8_t>& valid_out) {
  if (image.shape().size() != 3)
    throw std::invalid_argument("bilinear_sample: image must be (C,H,W)");
  return bilinear_gather(image, coords.u, coords.v, coords.valid, valid_out);
}

Tensor synthesize_view(const Tensor& source, const Tensor& depth, const Tensor& rotation,
                       const Tensor& translation, const CameraIntrinsics& k,
                       std::vector<std::uint8_t>& valid_out) {
  if (source.shape().size() != 3 || source.dim(1) != k.height || source.dim(2) != k.width)
    throw std::invalid_argument("synthesize_view: source does not match intrinsics size");
  if (depth.numel() != k.width * k.height)
    throw std::invalid_argument("synthesize_view: depth does not match intrinsics size");
  PixelGrid grid = make_pixel_grid(k);
  Tensor cloud = backproject(depth, k, grid);
  Tensor moved = transform_points(cloud, rotation, translation);
  SampleCoords coords = project(moved, k, k.height, k.width);
  return bilinear_sample(source, coords, valid_out);
}

Tensor synthesize_view(const Tensor& source, const Tensor& depth, const PoseSE3& pose,
                       const CameraIntrinsics& k, std::vector<std::uint8_t>& valid_out) {
  pose.validate();
  return synthesize_view(source, depth, pose_to_rotation_tensor(pose),
                         pose_to_translation_tensor(pose), k, valid_out);
}

Tensor rotation_from_axis_angle(const Tensor& axis_angle) {
  if (axis_angle.numel() != 3)
    throw std::invalid_argument("rotation_from_axis_angle: needs a 3-vector");
  Tensor w = axis_angle.reshape({3});
  Tensor wx = slice1d(w, 0, 1);
  Tensor wy = slice1d(w, 1, 1);
  Tensor wz = slice1d(w, 2, 1);
  Tensor s = sum(w * w);
  Tensor a = apply_unary(s, &sinc_sqrt, &d_sinc_sqrt);
  Tensor b = apply_unary(s, &versine_over_s, &d_versine_over_s);
  Tensor zero = Tensor::scalar(0.0);
  Tensor hat = cat1d({zero, neg(wz), wy, wz, zero, neg(wx), neg(wy), wx, zero}).reshape({3, 3});
  Tensor hat2 = matmul(hat, hat);
  Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  return add(eye, add(mul(hat, a), mul(hat2, b)));
}

Tensor pose_to_rotation_tensor(const PoseSE3& pose) {
  return Tensor::from_data({3, 3},
                           std::vector<double>(pose.rotation.begin(), pose.rotation.end()));
}

Tensor pose_to_translation_tensor(const PoseSE3& pose) {
  return Tensor::from_data(
      {3}, std::vector<double>(pose.translation.begin(), pose.translation.end()));
}

}  // namespace endodepth
