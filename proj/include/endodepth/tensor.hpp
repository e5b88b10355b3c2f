#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace endodepth {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first use during backward
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // scatters this->grad into parents

  double* grad_buf();  // ensures grad is allocated and zeroed
};

}  // namespace detail

/// Disables gradient taping for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

/// Dense double-precision tensor with reverse-mode autodiff.
///
/// Ops build a DAG; Tensor::backward() on a scalar root accumulates
/// gradients into every reachable leaf created with requires_grad.
/// Creation order doubles as a topological order, so backward is a
/// simple reverse sweep.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from_data(Shape shape, std::vector<double> v);
  static Tensor scalar(double v);
  /// Trainable leaf: participates in backward().
  static Tensor leaf(Shape shape, std::vector<double> v);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t dim(std::size_t i) const;

  double* data();
  const double* data() const;
  double item() const;  // scalar tensors only

  bool requires_grad() const;
  /// Gradient buffer after backward(); null if never touched.
  const double* grad_data() const;
  std::vector<double> grad_vector() const;
  void zero_grad();

  /// Value copy cut off from the graph.
  Tensor detach() const;
  /// Same data, new shape (numel must match).
  Tensor reshape(Shape shape) const;

  /// Backpropagate from a scalar root.
  void backward();

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// --- elementwise (same shape, or either side scalar-shaped) ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator*(const Tensor& a, double s);
inline Tensor operator*(double s, const Tensor& a) { return a * s; }
Tensor operator+(const Tensor& a, double s);
inline Tensor operator+(double s, const Tensor& a) { return a + s; }
inline Tensor operator-(const Tensor& a, double s) { return a + (-s); }

// --- unary ---
Tensor neg(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor clamp_min(const Tensor& x, double lo);
/// Generic smooth unary: f and its derivative supplied as function pointers.
Tensor apply_unary(const Tensor& x, double (*f)(double), double (*df)(double));

// --- reductions ---
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// --- linear algebra / layout ---
Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k)x(k,n)
Tensor transpose(const Tensor& x);                // (r,c)->(c,r)
Tensor row(const Tensor& x, std::size_t i);       // (r,c)->(c)
Tensor slice1d(const Tensor& x, std::size_t off, std::size_t len);
Tensor cat1d(const std::vector<Tensor>& parts);   // 1-D concat
Tensor softmax_rows(const Tensor& x);             // (r,c), softmax over c
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);
Tensor mul_row_broadcast(const Tensor& m, const Tensor& v);  // (r,c)*(c)
Tensor add_col_broadcast(const Tensor& m, const Tensor& v);  // (r,c)+(r)

// --- image / network ops on (C,H,W) ---
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride, std::size_t pad, std::size_t dilation,
              std::size_t groups);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor upsample_nearest2(const Tensor& x);
/// Align-corners bilinear resize to (H,W).
Tensor upsample_bilinear(const Tensor& x, std::size_t H, std::size_t W);
Tensor mean_spatial(const Tensor& x);  // (C,H,W)->(C)
Tensor diff_x(const Tensor& x);        // (H,W)->(H,W-1) forward difference
Tensor diff_y(const Tensor& x);        // (H,W)->(H-1,W)

/// 4-neighbor bilinear gather of img (C,H,W) at continuous coords u,v (h,w).
/// valid_in gates sampling per position; valid_out reports positions whose
/// coords lie in [0,W-1]x[0,H-1] (a zero-weight neighbor on the far edge
/// does not invalidate). Invalid positions produce 0.
Tensor bilinear_gather(const Tensor& img, const Tensor& u, const Tensor& v,
                       const std::vector<std::uint8_t>& valid_in,
                       std::vector<std::uint8_t>& valid_out);

}  // namespace endodepth
