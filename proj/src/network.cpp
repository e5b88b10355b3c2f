#include "endodepth/network.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "endodepth/geometry.hpp"
#include "endodepth/rng.hpp"

namespace endodepth {

std::string to_string(EncoderMode mode) {
  return mode == EncoderMode::Efficiency ? "efficiency" : "performance";
}

EncoderMode encoder_mode_from_string(const std::string& s) {
  if (s == "efficiency") return EncoderMode::Efficiency;
  if (s == "performance") return EncoderMode::Performance;
  throw std::invalid_argument("unknown encoder mode '" + s +
                              "' (expected efficiency|performance)");
}

EncoderConfig EncoderConfig::make(EncoderMode mode) {
  EncoderConfig cfg;
  cfg.mode = mode;
  if (mode == EncoderMode::Efficiency) {
    cfg.stage_channels = {32, 32, 64, 128};
    cfg.stage4_rates = {1, 2, 3, 2, 4, 6};
    cfg.decoder_channels = {128, 64, 32, 16};
  } else {
    cfg.stage_channels = {64, 64, 128, 256};
    cfg.stage4_rates = {1, 2, 3, 2, 4, 6, 3, 6, 9};
    cfg.decoder_channels = {256, 128, 64, 32};
  }
  return cfg;
}

Tensor ParamStore::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
  Tensor t = Tensor::leaf(std::move(shape), std::move(values));
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown name " + name);
  return items_[it->second].second;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

std::size_t ParamStore::total_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : items_) t.zero_grad();
}

// ---------------------------------------------------------------------------

Tensor dilated_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t rate,
                    std::size_t groups) {
  if (rate < 1) throw std::invalid_argument("dilated_conv: rate must be >= 1");
  const std::size_t k = w.dim(2);
  const std::size_t pad = rate * (k - 1) / 2;
  return conv2d(x, w, b, 1, pad, rate, groups);
}

Tensor xca_block(const Tensor& x, const Tensor& wq, const Tensor& bq, const Tensor& wk,
                 const Tensor& bk, const Tensor& wv, const Tensor& bv,
                 const Tensor& temperature) {
  if (x.shape().size() != 3) throw std::invalid_argument("xca_block: x must be (C,H,W)");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor tokens = x.reshape({c, h * w});
  Tensor q = add_col_broadcast(matmul(wq, tokens), bq);
  Tensor k = add_col_broadcast(matmul(wk, tokens), bk);
  Tensor v = add_col_broadcast(matmul(wv, tokens), bv);
  Tensor attn = softmax_rows(mul(matmul(l2_normalize_rows(q), transpose(l2_normalize_rows(k))),
                                 temperature));
  Tensor out = matmul(transpose(attn), v);
  return add(x, gelu(out).reshape({c, h, w}));
}

Tensor disparity_to_depth(const Tensor& disparity, double d_min, double d_max) {
  if (!(d_min > 0.0) || !(d_min < d_max))
    throw std::invalid_argument("disparity_to_depth: need 0 < d_min < d_max");
  const double a = 1.0 / d_min - 1.0 / d_max;
  const double b = 1.0 / d_max;
  return div(Tensor::scalar(1.0), disparity * a + b);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> conv_init(Rng& rng, std::size_t cout, std::size_t cin_g, std::size_t kh,
                              std::size_t kw) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(cin_g * kh * kw));
  std::vector<double> w(cout * cin_g * kh * kw);
  for (double& v : w) v = rng.truncated_normal() * stddev;
  return w;
}

struct ConvParam {
  Tensor w, b;
};

ConvParam add_conv(ParamStore& ps, Rng& rng, const std::string& name, std::size_t cin,
                   std::size_t cout, std::size_t k, std::size_t groups = 1) {
  const std::size_t cin_g = cin / groups;
  ConvParam p;
  p.w = ps.add(name + ".w", {cout, cin_g, k, k}, conv_init(rng, cout, cin_g, k, k));
  p.b = ps.add(name + ".b", {cout}, std::vector<double>(cout, 0.0));
  return p;
}

struct XcaParam {
  Tensor wq, bq, wk, bk, wv, bv, temp;
};

XcaParam add_xca(ParamStore& ps, Rng& rng, const std::string& name, std::size_t c) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(c));
  auto mat = [&] {
    std::vector<double> w(c * c);
    for (double& v : w) v = rng.truncated_normal() * stddev;
    return w;
  };
  XcaParam p;
  p.wq = ps.add(name + ".wq", {c, c}, mat());
  p.bq = ps.add(name + ".bq", {c}, std::vector<double>(c, 0.0));
  p.wk = ps.add(name + ".wk", {c, c}, mat());
  p.bk = ps.add(name + ".bk", {c}, std::vector<double>(c, 0.0));
  p.wv = ps.add(name + ".wv", {c, c}, mat());
  p.bv = ps.add(name + ".bv", {c}, std::vector<double>(c, 0.0));
  p.temp = ps.add(name + ".temp", {1}, {1.0});
  return p;
}

Tensor run_conv(const ParamStore& ps, const std::string& name, const Tensor& x,
                std::size_t stride, std::size_t pad, std::size_t dil = 1,
                std::size_t groups = 1) {
  return conv2d(x, ps.get(name + ".w"), ps.get(name + ".b"), stride, pad, dil, groups);
}

/// Depthwise-separable dilated residual block: x + pw(gelu(dw(x))).
Tensor run_block(const ParamStore& ps, const std::string& name, const Tensor& x,
                 std::size_t rate) {
  const std::size_t c = x.dim(0);
  Tensor y = dilated_conv(x, ps.get(name + ".dw.w"), ps.get(name + ".dw.b"), rate, c);
  y = gelu(y);
  y = run_conv(ps, name + ".pw", y, 1, 0);
  return add(x, y);
}

Tensor run_xca(const ParamStore& ps, const std::string& name, const Tensor& x) {
  return xca_block(x, ps.get(name + ".wq"), ps.get(name + ".bq"), ps.get(name + ".wk"),
                   ps.get(name + ".bk"), ps.get(name + ".wv"), ps.get(name + ".bv"),
                   ps.get(name + ".temp"));
}

}  // namespace

DepthNet::DepthNet(EncoderMode mode, std::uint64_t seed) : cfg_(EncoderConfig::make(mode)) {
  Rng rng(Rng::derive(seed, 0xD599));
  const auto& ch = cfg_.stage_channels;
  add_conv(params_, rng, "enc.cov1", 3, ch[0], 3);
  add_conv(params_, rng, "enc.cov2", ch[0], ch[1], 3);
  for (std::size_t i = 0; i < cfg_.stage2_rates.size(); ++i) {
    add_conv(params_, rng, "enc.s2.block" + std::to_string(i) + ".dw", ch[1], ch[1], 3, ch[1]);
    add_conv(params_, rng, "enc.s2.block" + std::to_string(i) + ".pw", ch[1], ch[1], 1);
  }
  add_xca(params_, rng, "enc.s2.xca", ch[1]);
  add_conv(params_, rng, "enc.cov3", ch[1], ch[2], 3);
  for (std::size_t i = 0; i < cfg_.stage3_rates.size(); ++i) {
    add_conv(params_, rng, "enc.s3.block" + std::to_string(i) + ".dw", ch[2], ch[2], 3, ch[2]);
    add_conv(params_, rng, "enc.s3.block" + std::to_string(i) + ".pw", ch[2], ch[2], 1);
  }
  add_xca(params_, rng, "enc.s3.xca", ch[2]);
  add_conv(params_, rng, "enc.cov4", ch[2], ch[3], 3);
  for (std::size_t i = 0; i < cfg_.stage4_rates.size(); ++i) {
    add_conv(params_, rng, "enc.s4.block" + std::to_string(i) + ".dw", ch[3], ch[3], 3, ch[3]);
    add_conv(params_, rng, "enc.s4.block" + std::to_string(i) + ".pw", ch[3], ch[3], 1);
  }
  add_xca(params_, rng, "enc.s4.xca", ch[3]);

  const auto& dc = cfg_.decoder_channels;
  add_conv(params_, rng, "dec.l3.c1", ch[3] + ch[2], dc[0], 3);
  add_conv(params_, rng, "dec.l3.c2", dc[0], dc[0], 3);
  add_conv(params_, rng, "dec.l2.c1", dc[0] + ch[1], dc[1], 3);
  add_conv(params_, rng, "dec.l2.c2", dc[1], dc[1], 3);
  add_conv(params_, rng, "dec.l1.c1", dc[1] + ch[0], dc[2], 3);
  add_conv(params_, rng, "dec.l1.c2", dc[2], dc[2], 3);
  add_conv(params_, rng, "dec.l0.c1", dc[2], dc[3], 3);
  add_conv(params_, rng, "dec.l0.c2", dc[3], dc[3], 3);
  add_conv(params_, rng, "dec.head3", dc[0], 1, 3);
  add_conv(params_, rng, "dec.head2", dc[1], 1, 3);
  add_conv(params_, rng, "dec.head1", dc[2], 1, 3);
  add_conv(params_, rng, "dec.head0", dc[3], 1, 3);
}

FeaturePyramid DepthNet::encode(const Tensor& image) const {
  if (image.shape().size() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("DepthNet: input must be (3,H,W)");
  if (image.dim(1) % 16 != 0 || image.dim(2) % 16 != 0)
    throw std::invalid_argument("DepthNet: input size " + std::to_string(image.dim(2)) + "x" +
                                std::to_string(image.dim(1)) + " not divisible by 16");
  FeaturePyramid p;
  p.f1 = gelu(run_conv(params_, "enc.cov1", image, 2, 1));
  Tensor t = gelu(run_conv(params_, "enc.cov2", p.f1, 2, 1));
  for (std::size_t i = 0; i < cfg_.stage2_rates.size(); ++i)
    t = run_block(params_, "enc.s2.block" + std::to_string(i), t, cfg_.stage2_rates[i]);
  p.f2 = run_xca(params_, "enc.s2.xca", t);
  t = gelu(run_conv(params_, "enc.cov3", p.f2, 2, 1));
  for (std::size_t i = 0; i < cfg_.stage3_rates.size(); ++i)
    t = run_block(params_, "enc.s3.block" + std::to_string(i), t, cfg_.stage3_rates[i]);
  p.f3 = run_xca(params_, "enc.s3.xca", t);
  t = gelu(run_conv(params_, "enc.cov4", p.f3, 2, 1));
  for (std::size_t i = 0; i < cfg_.stage4_rates.size(); ++i)
    t = run_block(params_, "enc.s4.block" + std::to_string(i), t, cfg_.stage4_rates[i]);
  p.f4 = run_xca(params_, "enc.s4.xca", t);
  return p;
}

Tensor DepthNet::decoder_level(const Tensor& below, const Tensor& skip,
                               const std::string& name) const {
  Tensor up = upsample_nearest2(below);
  Tensor t = skip.defined() ? concat_channels(up, skip) : up;
  t = gelu(run_conv(params_, name + ".c1", t, 1, 1));
  return gelu(run_conv(params_, name + ".c2", t, 1, 1));
}

std::array<Tensor, 4> DepthNet::forward(const Tensor& image) const {
  FeaturePyramid p = encode(image);
  Tensor d3 = decoder_level(p.f4, p.f3, "dec.l3");
  Tensor d2 = decoder_level(d3, p.f2, "dec.l2");
  Tensor d1 = decoder_level(d2, p.f1, "dec.l1");
  Tensor d0 = decoder_level(d1, Tensor(), "dec.l0");
  auto head = [&](const char* name, const Tensor& f) {
    return sigmoid(run_conv(params_, name, f, 1, 1)).reshape({f.dim(1), f.dim(2)});
  };
  return {head("dec.head0", d0), head("dec.head1", d1), head("dec.head2", d2),
          head("dec.head3", d3)};
}

// ---------------------------------------------------------------------------

PoseNet::PoseNet(std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 0xF05E));
  add_conv(params_, rng, "pose.conv1", 6, kChannels[0], 3);
  add_conv(params_, rng, "pose.conv2", kChannels[0], kChannels[1], 3);
  add_conv(params_, rng, "pose.conv3", kChannels[1], kChannels[2], 3);
  add_conv(params_, rng, "pose.conv4", kChannels[2], kChannels[3], 3);
  // Zero-initialized head: the predicted pose starts at exact identity.
  params_.add("pose.head.w", {6, kChannels[3]}, std::vector<double>(6 * kChannels[3], 0.0));
  params_.add("pose.head.b", {6}, std::vector<double>(6, 0.0));
}

PoseNet::PoseOut PoseNet::forward(const Tensor& target, const Tensor& source) const {
  if (target.shape() != source.shape() || target.shape().size() != 3)
    throw std::invalid_argument("PoseNet: frame shape mismatch");
  Tensor x = concat_channels(target, source);
  x = gelu(run_conv(params_, "pose.conv1", x, 2, 1));
  x = gelu(run_conv(params_, "pose.conv2", x, 2, 1));
  x = gelu(run_conv(params_, "pose.conv3", x, 2, 1));
  x = gelu(run_conv(params_, "pose.conv4", x, 2, 1));
  Tensor feat = mean_spatial(x);  // (C)
  Tensor raw =
      add_col_broadcast(matmul(params_.get("pose.head.w"), feat.reshape({kChannels[3], 1})),
                        params_.get("pose.head.b"))
          .reshape({6});
  Tensor scaled = raw * kOutputScale;
  PoseOut out;
  out.raw = raw;
  out.rotation = rotation_from_axis_angle(slice1d(scaled, 0, 3));
  out.translation = slice1d(scaled, 3, 3);
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint

namespace {

template <typename T>
void write_le(std::ofstream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto* p = reinterpret_cast<unsigned char*>(&v);
    std::reverse(p, p + sizeof(T));
  }
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    auto* p = reinterpret_cast<unsigned char*>(&v);
    std::reverse(p, p + sizeof(T));
  }
  return v;
}

constexpr char kMagic[8] = {'E', 'N', 'D', 'O', 'D', 'P', '0', '1'};

}  // namespace

void Checkpoint::set(const std::string& name, const Shape& shape, std::vector<double> values) {
  for (auto& [n, payload] : arrays) {
    if (n == name) {
      payload = {shape, std::move(values)};
      return;
    }
  }
  arrays.emplace_back(name, std::make_pair(shape, std::move(values)));
}

const std::pair<Shape, std::vector<double>>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, payload] : arrays)
    if (n == name) return &payload;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 8);
  write_le<std::uint32_t>(os, 1);
  write_le<std::uint8_t>(os, ckpt.mode == EncoderMode::Efficiency ? 0 : 1);
  write_le<std::uint64_t>(os, ckpt.step);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& [name, payload] : ckpt.arrays) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(payload.first.size()));
    for (std::size_t d : payload.first) write_le<std::uint64_t>(os, d);
    for (double v : payload.second) write_le<double>(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  const auto version = read_le<std::uint32_t>(is);
  if (version != 1)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.mode = read_le<std::uint8_t>(is) == 0 ? EncoderMode::Efficiency : EncoderMode::Performance;
  ckpt.step = read_le<std::uint64_t>(is);
  const auto count = read_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = read_le<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto ndim = read_le<std::uint32_t>(is);
    Shape shape(ndim);
    for (auto& d : shape) d = read_le<std::uint64_t>(is);
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = read_le<double>(is);
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    ckpt.arrays.emplace_back(std::move(name), std::make_pair(std::move(shape), std::move(values)));
  }
  return ckpt;
}

void store_to_checkpoint(const ParamStore& store, const std::string& prefix, Checkpoint& ckpt) {
  for (const auto& [name, t] : store.items()) {
    ckpt.set(prefix + name, t.shape(),
             std::vector<double>(t.data(), t.data() + t.numel()));
  }
}

void checkpoint_to_store(const Checkpoint& ckpt, const std::string& prefix, ParamStore& store) {
  for (const auto& [name, tensor] : store.items()) {
    Tensor t = tensor;  // shares the underlying buffer
    const auto* payload = ckpt.find(prefix + name);
    if (!payload) throw std::runtime_error("checkpoint is missing array " + prefix + name);
    if (payload->first != t.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + prefix + name);
    std::copy(payload->second.begin(), payload->second.end(), t.data());
  }
}

}  // namespace endodepth
