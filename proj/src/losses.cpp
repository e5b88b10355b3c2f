#include "endodepth/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace endodepth {

namespace {

Tensor channel_mean_abs_diff(const Tensor& a, const Tensor& b) {
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  Tensor diff = abs(sub(a, b));
  Tensor acc = diff.reshape({c, h * w});
  // mean over channels via (1,C) x (C,N) matmul with constant weights
  Tensor ones = Tensor::full({1, c}, 1.0 / static_cast<double>(c));
  return matmul(ones, acc).reshape({h, w});
}

/// 3x3 box-filtered per-channel SSIM map, channel-averaged; same spatial
/// size via reflection-free zero padding (border rows are approximate,
/// which is the usual convention).
Tensor ssim_map(const Tensor& a, const Tensor& b) {
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  Tensor box = Tensor::full({c, 1, 3, 3}, 1.0 / 9.0);
  Tensor nobias;
  auto blur = [&](const Tensor& x) { return conv2d(x, box, nobias, 1, 1, 1, c); };
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Tensor mu_a = blur(a);
  Tensor mu_b = blur(b);
  Tensor sa = sub(blur(mul(a, a)), mul(mu_a, mu_a));
  Tensor sb = sub(blur(mul(b, b)), mul(mu_b, mu_b));
  Tensor sab = sub(blur(mul(a, b)), mul(mu_a, mu_b));
  Tensor num = mul(mul(mu_a, mu_b) * 2.0 + c1, sab * 2.0 + c2);
  Tensor den = mul(mul(mu_a, mu_a) + mul(mu_b, mu_b) + c1, sa + sb + c2);
  Tensor ssim = div(num, den);
  Tensor ones = Tensor::full({1, c}, 1.0 / static_cast<double>(c));
  return matmul(ones, ssim.reshape({c, h * w})).reshape({h, w});
}

}  // namespace

Tensor photometric_error(const Tensor& target, const Tensor& warped,
                         const std::vector<std::uint8_t>& validity,
                         const SsimConfig& ssim) {
  if (target.shape() != warped.shape() || target.shape().size() != 3)
    throw std::invalid_argument("photometric_error: image shape mismatch " +
                                shape_str(target.shape()) + " vs " + shape_str(warped.shape()));
  const std::size_t h = target.dim(1), w = target.dim(2);
  if (!validity.empty() && validity.size() != h * w)
    throw std::invalid_argument("photometric_error: validity size mismatch");

  Tensor err = channel_mean_abs_diff(target, warped);
  if (ssim.enabled) {
    Tensor dssim = (ssim_map(target, warped) * -1.0 + 1.0) * 0.5;
    err = dssim * ssim.alpha + err * (1.0 - ssim.alpha);
  }
  if (!validity.empty()) {
    std::vector<double> vmask(h * w);
    for (std::size_t i = 0; i < vmask.size(); ++i) vmask[i] = validity[i] ? 1.0 : 0.0;
    err = mul(err, Tensor::from_data({h, w}, std::move(vmask)));
  }
  return err;
}

Tensor min_reprojection(const Tensor& err_prev, const Tensor& err_next) {
  if (err_prev.shape() != err_next.shape())
    throw std::invalid_argument("min_reprojection: shape mismatch");
  return minimum(err_prev, err_next);
}

std::vector<std::uint8_t> auto_mask(const Tensor& target, const Tensor& source_prev,
                                    const Tensor& source_next, const Tensor& warped_min_err,
                                    const std::vector<double>& tie_noise) {
  NoGradGuard ng;
  std::vector<std::uint8_t> none;
  Tensor id_prev = photometric_error(target, source_prev, {});
  Tensor id_next = photometric_error(target, source_next, {});
  const std::size_t n = warped_min_err.numel();
  if (id_prev.numel() != n)
    throw std::invalid_argument("auto_mask: error map size mismatch");
  if (!tie_noise.empty() && tie_noise.size() != n)
    throw std::invalid_argument("auto_mask: tie noise size mismatch");
  std::vector<std::uint8_t> mu(n, 0);
  const double* w = warped_min_err.data();
  const double* ip = id_prev.data();
  const double* in_ = id_next.data();
  for (std::size_t i = 0; i < n; ++i) {
    double ident = std::min(ip[i], in_[i]);
    if (!tie_noise.empty()) ident += tie_noise[i];
    mu[i] = w[i] < ident ? 1 : 0;
  }
  return mu;
}

Tensor masked_photometric_loss(const Tensor& err, const std::vector<std::uint8_t>& mu,
                               const Map& confidence, const std::vector<std::uint8_t>& validity,
                               bool* degenerate) {
  const std::size_t n = err.numel();
  if (mu.size() != n || confidence.data.size() != n ||
      (!validity.empty() && validity.size() != n))
    throw std::invalid_argument("masked_photometric_loss: dimension mismatch");
  std::vector<double> weights(n);
  double wsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double w = (mu[i] ? 1.0 : 0.0) * confidence.data[i];
    if (!validity.empty()) w *= validity[i] ? 1.0 : 0.0;
    weights[i] = w;
    wsum += w;
  }
  if (degenerate) *degenerate = wsum < 1e-12;
  if (wsum < 1e-12) return Tensor::scalar(0.0);
  Tensor wt = Tensor::from_data(err.shape(), std::move(weights));
  return sum(mul(err, wt)) * (1.0 / wsum);
}

Tensor smoothness_loss(const Tensor& disparity, const Image& image, double eps) {
  if (disparity.shape().size() != 2)
    throw std::invalid_argument("smoothness_loss: disparity must be (H,W)");
  const std::size_t h = disparity.dim(0), w = disparity.dim(1);
  if (image.height != h || image.width != w)
    throw std::invalid_argument("smoothness_loss: image size mismatch");

  Tensor m = mean(disparity);
  if (m.data()[0] < eps)
    throw std::invalid_argument("smoothness_loss: degenerate disparity (mean below eps)");
  Tensor dn = div(disparity, m);

  // exp(-|gradient|) edge weights from the image, channel-mean, constant
  std::vector<double> wx(h * (w - 1), 0.0), wy((h - 1) * w, 0.0);
  const double cinv = 1.0 / static_cast<double>(image.channels);
  for (std::size_t c = 0; c < image.channels; ++c) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x + 1 < w; ++x)
        wx[y * (w - 1) + x] += std::fabs(image.at(c, y, x + 1) - image.at(c, y, x)) * cinv;
    for (std::size_t y = 0; y + 1 < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        wy[y * w + x] += std::fabs(image.at(c, y + 1, x) - image.at(c, y, x)) * cinv;
  }
  for (double& v : wx) v = std::exp(-v);
  for (double& v : wy) v = std::exp(-v);

  Tensor tx = mean(mul(abs(diff_x(dn)), Tensor::from_data({h, w - 1}, std::move(wx))));
  Tensor ty = mean(mul(abs(diff_y(dn)), Tensor::from_data({h - 1, w}, std::move(wy))));
  return add(tx, ty);
}

Tensor total_loss(const std::vector<Tensor>& per_scale_photometric,
                  const std::vector<Tensor>& per_scale_smoothness, double lambda,
                  LossBreakdown* breakdown) {
  if (per_scale_photometric.empty() ||
      per_scale_photometric.size() != per_scale_smoothness.size())
    throw std::invalid_argument("total_loss: per-scale lists must be nonempty and equal length");
  const double inv = 1.0 / static_cast<double>(per_scale_photometric.size());
  Tensor acc;
  double photo = 0, smooth = 0;
  for (std::size_t s = 0; s < per_scale_photometric.size(); ++s) {
    Tensor term = add(per_scale_photometric[s], per_scale_smoothness[s] * lambda);
    acc = s == 0 ? term : add(acc, term);
    photo += per_scale_photometric[s].item();
    smooth += per_scale_smoothness[s].item();
  }
  acc = acc * inv;
  if (breakdown) {
    breakdown->lambda = lambda;
    breakdown->photometric = photo * inv;
    breakdown->smoothness = smooth * inv;
    breakdown->total = acc.item();
    breakdown->per_scale_photometric.clear();
    breakdown->per_scale_smoothness.clear();
    for (const auto& t : per_scale_photometric)
      breakdown->per_scale_photometric.push_back(t.item());
    for (const auto& t : per_scale_smoothness)
      breakdown->per_scale_smoothness.push_back(t.item());
  }
  return acc;
}

LossBreakdown total_loss(const std::vector<double>& per_scale_photometric,
                         const std::vector<double>& per_scale_smoothness, double lambda) {
  std::vector<Tensor> p, s;
  for (double v : per_scale_photometric) p.push_back(Tensor::scalar(v));
  for (double v : per_scale_smoothness) s.push_back(Tensor::scalar(v));
  LossBreakdown b;
  total_loss(p, s, lambda, &b);
  return b;
}

}  // namespace endodepth
