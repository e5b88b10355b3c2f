#include "endodepth/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace endodepth {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

bool any_requires(std::initializer_list<const Tensor*> ts) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : ts)
    if (t->defined() && t->node()->requires_grad) return true;
  return false;
}

void attach(const std::shared_ptr<detail::Node>& n,
            std::initializer_list<const Tensor*> parents,
            std::function<void(detail::Node&)> backward) {
  n->requires_grad = true;
  for (const Tensor* p : parents) n->parents.push_back(p->node());
  n->backward = std::move(backward);
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_str(a) + " vs " + shape_str(b));
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

double* detail::Node::grad_buf() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad.data();
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(Shape shape) {
  std::size_t n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double v) {
  std::size_t n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, v)));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> v) {
  if (shape_numel(shape) != v.size())
    throw std::invalid_argument("from_data: size does not match shape " + shape_str(shape));
  return Tensor(make_node(std::move(shape), std::move(v)));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::leaf(Shape shape, std::vector<double> v) {
  Tensor t = from_data(std::move(shape), std::move(v));
  t.node_->requires_grad = true;
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }
std::size_t Tensor::dim(std::size_t i) const { return node_->shape.at(i); }
double* Tensor::data() { return node_->value.data(); }
const double* Tensor::data() const { return node_->value.data(); }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const double* Tensor::grad_data() const {
  return node_->grad.empty() ? nullptr : node_->grad.data();
}

std::vector<double> Tensor::grad_vector() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  return Tensor(make_node(node_->shape, node_->value));
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw std::invalid_argument("reshape: numel mismatch " + shape_str(node_->shape) +
                                " -> " + shape_str(shape));
  auto n = make_node(std::move(shape), node_->value);
  if (any_requires({this})) {
    attach(n, {this}, [](detail::Node& self) {
      double* pg = self.parents[0]->grad_buf();
      const double* g = self.grad.data();
      for (std::size_t i = 0; i < self.value.size(); ++i) pg[i] += g[i];
    });
  }
  return Tensor(n);
}

void Tensor::backward() {
  if (numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!node_->requires_grad) return;

  // Collect the grad-requiring subgraph; ids are a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  node_->grad_buf()[0] = 1.0;
  for (detail::Node* n : order) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise helpers

namespace {

enum class BinKind { AA, AS, SA };  // tensor-tensor, tensor-scalarT, scalarT-tensor

template <typename FwdFn, typename BwdFn>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    shape_error(name, a.shape(), b.shape());
  const Shape& out_shape = b_scalar ? a.shape() : b.shape();
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(pa[a_scalar ? 0 : i], pb[b_scalar ? 0 : i]);
  }
  auto node = make_node(out_shape, std::move(out));
  if (any_requires({&a, &b})) {
    bool ra = a.requires_grad(), rb = b.requires_grad();
    auto an = a.node().get();
    auto bn = b.node().get();
    attach(node, {&a, &b}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      const double* va = an->value.data();
      const double* vb = bn->value.data();
      double* ga = ra ? an->grad_buf() : nullptr;
      double* gb = rb ? bn->grad_buf() : nullptr;
      const std::size_t m = self.value.size();
      for (std::size_t i = 0; i < m; ++i) {
        double da, db;
        bwd(va[a_scalar ? 0 : i], vb[b_scalar ? 0 : i], self.value[i], da, db);
        if (ga) ga[a_scalar ? 0 : i] += g[i] * da;
        if (gb) gb[b_scalar ? 0 : i] += g[i] * db;
      }
    });
  }
  return Tensor(node);
}

template <typename FwdFn, typename BwdFn>
Tensor unary_op(const Tensor& x, FwdFn fwd, BwdFn bwd) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  const double* px = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(px[i]);
  auto node = make_node(x.shape(), std::move(out));
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      const double* vx = xn->value.data();
      double* gx = xn->grad_buf();
      for (std::size_t i = 0; i < self.value.size(); ++i)
        gx[i] += g[i] * bwd(vx[i], self.value[i]);
    });
  }
  return Tensor(node);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op("add", a, b, [](double x, double y) { return x + y; },
                   [](double, double, double, double& da, double& db) { da = 1; db = 1; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op("sub", a, b, [](double x, double y) { return x - y; },
                   [](double, double, double, double& da, double& db) { da = 1; db = -1; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op("mul", a, b, [](double x, double y) { return x * y; },
                   [](double x, double y, double, double& da, double& db) { da = y; db = x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op("div", a, b, [](double x, double y) { return x / y; },
                   [](double x, double y, double, double& da, double& db) {
                     da = 1.0 / y;
                     db = -x / (y * y);
                   });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  // Ties route the gradient to the first argument.
  return binary_op("minimum", a, b,
                   [](double x, double y) { return x <= y ? x : y; },
                   [](double x, double y, double, double& da, double& db) {
                     da = x <= y ? 1.0 : 0.0;
                     db = x <= y ? 0.0 : 1.0;
                   });
}

Tensor operator*(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor operator+(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) {
  return unary_op(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor abs(const Tensor& x) {
  return unary_op(x, [](double v) { return std::fabs(v); },
                  [](double v, double) { return v >= 0 ? 1.0 : -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, [](double v) { return std::exp(v); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(x, [](double v) { return std::sqrt(v); },
                  [](double, double y) { return 0.5 / y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(x,
                  [](double v) {
                    return v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                  : std::exp(v) / (1.0 + std::exp(v));
                  },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  return unary_op(x,
                  [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
                  [](double v, double) {
                    double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                    double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                    return cdf + v * pdf;
                  });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary_op(x, [lo](double v) { return v < lo ? lo : v; },
                  [lo](double v, double) { return v < lo ? 0.0 : 1.0; });
}

Tensor apply_unary(const Tensor& x, double (*f)(double), double (*df)(double)) {
  return unary_op(x, [f](double v) { return f(v); },
                  [df](double v, double) { return df(v); });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
  double s = 0;
  const double* px = x.data();
  for (std::size_t i = 0; i < x.numel(); ++i) s += px[i];
  auto node = make_node({1}, {s});
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=](detail::Node& self) {
      double g = self.grad[0];
      double* gx = xn->grad_buf();
      for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g;
    });
  }
  return Tensor(node);
}

Tensor mean(const Tensor& x) { return sum(x) * (1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// linear algebra / layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
    shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      const double* brow = pb + l * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  auto node = make_node({m, n}, std::move(out));
  if (any_requires({&a, &b})) {
    bool ra = a.requires_grad(), rb = b.requires_grad();
    auto an = a.node().get();
    auto bn = b.node().get();
    attach(node, {&a, &b}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      if (ra) {
        double* ga = an->grad_buf();  // dA = G * B^T
        const double* pb2 = bn->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t l = 0; l < k; ++l) {
            double s = 0;
            const double* grow = g + i * n;
            const double* brow = pb2 + l * n;
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga[i * k + l] += s;
          }
      }
      if (rb) {
        double* gb = bn->grad_buf();  // dB = A^T * G
        const double* pa2 = an->value.data();
        for (std::size_t l = 0; l < k; ++l)
          for (std::size_t i = 0; i < m; ++i) {
            const double av = pa2[i * k + l];
            const double* grow = g + i * n;
            double* gbrow = gb + l * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
      }
    });
  }
  return Tensor(node);
}

Tensor transpose(const Tensor& x) {
  if (x.shape().size() != 2) throw std::invalid_argument("transpose: needs rank-2");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  const double* px = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = px[i * c + j];
  auto node = make_node({c, r}, std::move(out));
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      double* gx = xn->grad_buf();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
  }
  return Tensor(node);
}

Tensor row(const Tensor& x, std::size_t i) {
  if (x.shape().size() != 2 || i >= x.dim(0))
    throw std::invalid_argument("row: bad index for " + shape_str(x.shape()));
  const std::size_t c = x.dim(1);
  std::vector<double> out(x.data() + i * c, x.data() + (i + 1) * c);
  auto node = make_node({c}, std::move(out));
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      double* gx = xn->grad_buf();
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j];
    });
  }
  return Tensor(node);
}

Tensor slice1d(const Tensor& x, std::size_t off, std::size_t len) {
  if (x.shape().size() != 1 || off + len > x.dim(0))
    throw std::invalid_argument("slice1d: out of range");
  std::vector<double> out(x.data() + off, x.data() + off + len);
  auto node = make_node({len}, std::move(out));
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      double* gx = xn->grad_buf();
      for (std::size_t j = 0; j < len; ++j) gx[off + j] += g[j];
    });
  }
  return Tensor(node);
}

Tensor cat1d(const std::vector<Tensor>& parts) {
  std::size_t total = 0;
  for (const auto& p : parts) total += p.numel();
  std::vector<double> out;
  out.reserve(total);
  for (const auto& p : parts)
    out.insert(out.end(), p.data(), p.data() + p.numel());
  auto node = make_node({total}, std::move(out));
  bool req = false;
  if (g_grad_enabled)
    for (const auto& p : parts) req = req || p.requires_grad();
  if (req) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward = [](detail::Node& self) {
      const double* g = self.grad.data();
      std::size_t off = 0;
      for (auto& p : self.parents) {
        std::size_t n = p->value.size();
        if (p->requires_grad) {
          double* gp = p->grad_buf();
          for (std::size_t j = 0; j < n; ++j) gp[j] += g[off + j];
        }
        off += n;
      }
    };
  }
  return Tensor(node);
}

Tensor softmax_rows(const Tensor& x) {
  if (x.shape().size() != 2) throw std::invalid_argument("softmax_rows: needs rank-2");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  const double* px = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = px + i * c;
    double* yr = out.data() + i * c;
    double mx = xr[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (std::size_t j = 0; j < c; ++j) yr[j] /= s;
  }
  auto node = make_node({r, c}, std::move(out));
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      const double* y = self.value.data();
      double* gx = xn->grad_buf();
      for (std::size_t i = 0; i < r; ++i) {
        const double* gr = g + i * c;
        const double* yr = y + i * c;
        double dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return Tensor(node);
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  if (x.shape().size() != 2) throw std::invalid_argument("l2_normalize_rows: needs rank-2");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(r * c);
  std::vector<double> norms(r);
  const double* px = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += px[i * c + j] * px[i * c + j];
    norms[i] = std::sqrt(s + eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = px[i * c + j] / norms[i];
  }
  auto node = make_node({r, c}, std::move(out));
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=, norms = std::move(norms)](detail::Node& self) {
      const double* g = self.grad.data();
      const double* y = self.value.data();
      double* gx = xn->grad_buf();
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          gx[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
      }
    });
  }
  return Tensor(node);
}

Tensor mul_row_broadcast(const Tensor& m, const Tensor& v) {
  if (m.shape().size() != 2 || v.shape().size() != 1 || m.dim(1) != v.dim(0))
    shape_error("mul_row_broadcast", m.shape(), v.shape());
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> out(r * c);
  const double* pm = m.data();
  const double* pv = v.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = pm[i * c + j] * pv[j];
  auto node = make_node({r, c}, std::move(out));
  if (any_requires({&m, &v})) {
    bool rm = m.requires_grad(), rv = v.requires_grad();
    auto mn = m.node().get();
    auto vn = v.node().get();
    attach(node, {&m, &v}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      if (rm) {
        double* gm = mn->grad_buf();
        const double* pv2 = vn->value.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += g[i * c + j] * pv2[j];
      }
      if (rv) {
        double* gv = vn->grad_buf();
        const double* pm2 = mn->value.data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j] * pm2[i * c + j];
      }
    });
  }
  return Tensor(node);
}

Tensor add_col_broadcast(const Tensor& m, const Tensor& v) {
  if (m.shape().size() != 2 || v.shape().size() != 1 || m.dim(0) != v.dim(0))
    shape_error("add_col_broadcast", m.shape(), v.shape());
  const std::size_t r = m.dim(0), c = m.dim(1);
  std::vector<double> out(r * c);
  const double* pm = m.data();
  const double* pv = v.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = pm[i * c + j] + pv[i];
  auto node = make_node({r, c}, std::move(out));
  if (any_requires({&m, &v})) {
    bool rm = m.requires_grad(), rv = v.requires_grad();
    auto mn = m.node().get();
    auto vn = v.node().get();
    attach(node, {&m, &v}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      if (rm) {
        double* gm = mn->grad_buf();
        for (std::size_t i = 0; i < r * c; ++i) gm[i] += g[i];
      }
      if (rv) {
        double* gv = vn->grad_buf();
        for (std::size_t i = 0; i < r; ++i) {
          double s = 0;
          for (std::size_t j = 0; j < c; ++j) s += g[i * c + j];
          gv[i] += s;
        }
      }
    });
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvDims {
  std::size_t cin, h, w, cout, kh, kw, ho, wo, groups, cin_g, cout_g;
  std::size_t stride, pad, dil;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, std::size_t stride,
                   std::size_t pad, std::size_t dil, std::size_t groups) {
  if (x.shape().size() != 3 || w.shape().size() != 4)
    throw std::invalid_argument("conv2d: x must be (C,H,W), w must be (Cout,Cin/g,kh,kw)");
  ConvDims d{};
  d.cin = x.dim(0);
  d.h = x.dim(1);
  d.w = x.dim(2);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.groups = groups;
  if (groups == 0 || d.cin % groups != 0 || d.cout % groups != 0)
    throw std::invalid_argument("conv2d: bad group count");
  d.cin_g = d.cin / groups;
  d.cout_g = d.cout / groups;
  if (w.dim(1) != d.cin_g)
    throw std::invalid_argument("conv2d: weight input channels " + std::to_string(w.dim(1)) +
                                " do not match x channels/groups " + std::to_string(d.cin_g));
  d.stride = stride;
  d.pad = pad;
  d.dil = dil;
  const std::size_t eff_kh = dil * (d.kh - 1) + 1;
  const std::size_t eff_kw = dil * (d.kw - 1) + 1;
  if (d.h + 2 * pad < eff_kh || d.w + 2 * pad < eff_kw)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  d.ho = (d.h + 2 * pad - eff_kh) / stride + 1;
  d.wo = (d.w + 2 * pad - eff_kw) / stride + 1;
  return d;
}

// Valid output-column range [lo,hi) for a kernel tap: 0 <= ox*s - pad + kx*dil < W.
inline void ox_range(std::size_t wo, std::size_t w, std::size_t stride, long long shift,
                     std::size_t& lo, std::size_t& hi) {
  long long l = 0, h = static_cast<long long>(wo);
  if (shift < 0) {
    l = (-shift + static_cast<long long>(stride) - 1) / static_cast<long long>(stride);
  }
  long long max_ox = (static_cast<long long>(w) - 1 - shift) / static_cast<long long>(stride);
  h = std::min(h, max_ox + 1);
  lo = static_cast<std::size_t>(std::max(0LL, l));
  hi = static_cast<std::size_t>(std::max(0LL, h));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride, std::size_t pad, std::size_t dilation,
              std::size_t groups) {
  ConvDims d = conv_dims(x, w, stride, pad, dilation, groups);
  const bool has_bias = b.defined();
  if (has_bias && (b.shape().size() != 1 || b.dim(0) != d.cout))
    throw std::invalid_argument("conv2d: bias shape must be (Cout)");

  std::vector<double> out(d.cout * d.ho * d.wo, 0.0);
  const double* px = x.data();
  const double* pw = w.data();
  for (std::size_t g = 0; g < d.groups; ++g) {
    for (std::size_t ocg = 0; ocg < d.cout_g; ++ocg) {
      const std::size_t oc = g * d.cout_g + ocg;
      double* oplane = out.data() + oc * d.ho * d.wo;
      if (has_bias) {
        const double bv = b.data()[oc];
        for (std::size_t i = 0; i < d.ho * d.wo; ++i) oplane[i] = bv;
      }
      for (std::size_t icg = 0; icg < d.cin_g; ++icg) {
        const std::size_t ic = g * d.cin_g + icg;
        const double* iplane = px + ic * d.h * d.w;
        const double* kk = pw + (oc * d.cin_g + icg) * d.kh * d.kw;
        for (std::size_t ky = 0; ky < d.kh; ++ky) {
          for (std::size_t kx = 0; kx < d.kw; ++kx) {
            const double wv = kk[ky * d.kw + kx];
            if (wv == 0.0) continue;
            const long long sy = static_cast<long long>(ky * d.dil) - static_cast<long long>(d.pad);
            const long long sx = static_cast<long long>(kx * d.dil) - static_cast<long long>(d.pad);
            std::size_t oy_lo, oy_hi, ox_lo, ox_hi;
            ox_range(d.ho, d.h, d.stride, sy, oy_lo, oy_hi);
            ox_range(d.wo, d.w, d.stride, sx, ox_lo, ox_hi);
            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
              const std::size_t iy = static_cast<std::size_t>(oy * d.stride + sy);
              const double* irow = iplane + iy * d.w;
              double* orow = oplane + oy * d.wo;
              if (d.stride == 1) {
                const double* ir = irow + ox_lo + sx;
                for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * ir[ox - ox_lo];
              } else {
                for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                  orow[ox] += wv * irow[ox * d.stride + sx];
              }
            }
          }
        }
      }
    }
  }

  auto node = make_node({d.cout, d.ho, d.wo}, std::move(out));
  if (any_requires({&x, &w, &b})) {
    bool rx = x.requires_grad(), rw = w.requires_grad();
    bool rb = has_bias && b.requires_grad();
    auto xn = x.node().get();
    auto wn = w.node().get();
    auto bn = has_bias ? b.node().get() : nullptr;
    auto back = [=](detail::Node& self) {
      const double* g = self.grad.data();
      if (rb) {
        double* gb = bn->grad_buf();
        for (std::size_t oc = 0; oc < d.cout; ++oc) {
          double s = 0;
          const double* gp = g + oc * d.ho * d.wo;
          for (std::size_t i = 0; i < d.ho * d.wo; ++i) s += gp[i];
          gb[oc] += s;
        }
      }
      const double* pxv = xn->value.data();
      const double* pwv = wn->value.data();
      double* gx = rx ? xn->grad_buf() : nullptr;
      double* gw = rw ? wn->grad_buf() : nullptr;
      for (std::size_t g2 = 0; g2 < d.groups; ++g2) {
        for (std::size_t ocg = 0; ocg < d.cout_g; ++ocg) {
          const std::size_t oc = g2 * d.cout_g + ocg;
          const double* gplane = g + oc * d.ho * d.wo;
          for (std::size_t icg = 0; icg < d.cin_g; ++icg) {
            const std::size_t ic = g2 * d.cin_g + icg;
            const double* iplane = pxv + ic * d.h * d.w;
            double* giplane = gx ? gx + ic * d.h * d.w : nullptr;
            const std::size_t kbase = (oc * d.cin_g + icg) * d.kh * d.kw;
            for (std::size_t ky = 0; ky < d.kh; ++ky) {
              for (std::size_t kx = 0; kx < d.kw; ++kx) {
                const long long sy = static_cast<long long>(ky * d.dil) - static_cast<long long>(d.pad);
                const long long sx = static_cast<long long>(kx * d.dil) - static_cast<long long>(d.pad);
                std::size_t oy_lo, oy_hi, ox_lo, ox_hi;
                ox_range(d.ho, d.h, d.stride, sy, oy_lo, oy_hi);
                ox_range(d.wo, d.w, d.stride, sx, ox_lo, ox_hi);
                double wv = pwv[kbase + ky * d.kw + kx];
                double wacc = 0;
                for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                  const std::size_t iy = static_cast<std::size_t>(oy * d.stride + sy);
                  const double* irow = iplane + iy * d.w;
                  const double* grow = gplane + oy * d.wo;
                  if (gw) {
                    for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                      wacc += grow[ox] * irow[ox * d.stride + sx];
                  }
                  if (gx) {
                    double* girow = giplane + iy * d.w;
                    for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                      girow[ox * d.stride + sx] += wv * grow[ox];
                  }
                }
                if (gw) gw[kbase + ky * d.kw + kx] += wacc;
              }
            }
          }
        }
      }
    };
    if (has_bias)
      attach(node, {&x, &w, &b}, back);
    else
      attach(node, {&x, &w}, back);
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// feature-map ops

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(1) != b.dim(1) ||
      a.dim(2) != b.dim(2))
    shape_error("concat_channels", a.shape(), b.shape());
  const std::size_t ca = a.dim(0), cb = b.dim(0), h = a.dim(1), w = a.dim(2);
  std::vector<double> out;
  out.reserve((ca + cb) * h * w);
  out.insert(out.end(), a.data(), a.data() + ca * h * w);
  out.insert(out.end(), b.data(), b.data() + cb * h * w);
  auto node = make_node({ca + cb, h, w}, std::move(out));
  if (any_requires({&a, &b})) {
    bool ra = a.requires_grad(), rb = b.requires_grad();
    auto an = a.node().get();
    auto bn = b.node().get();
    attach(node, {&a, &b}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      const std::size_t na = ca * h * w, nb = cb * h * w;
      if (ra) {
        double* ga = an->grad_buf();
        for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
      }
      if (rb) {
        double* gb = bn->grad_buf();
        for (std::size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
      }
    });
  }
  return Tensor(node);
}

Tensor upsample_nearest2(const Tensor& x) {
  if (x.shape().size() != 3) throw std::invalid_argument("upsample_nearest2: needs (C,H,W)");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> out(c * 4 * h * w);
  const double* px = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y) {
      const double* irow = px + (ch * h + y) * w;
      double* o0 = out.data() + (ch * 2 * h + 2 * y) * 2 * w;
      double* o1 = o0 + 2 * w;
      for (std::size_t xx = 0; xx < w; ++xx) {
        o0[2 * xx] = o0[2 * xx + 1] = o1[2 * xx] = o1[2 * xx + 1] = irow[xx];
      }
    }
  auto node = make_node({c, 2 * h, 2 * w}, std::move(out));
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      double* gx = xn->grad_buf();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y) {
          double* grow = gx + (ch * h + y) * w;
          const double* g0 = g + (ch * 2 * h + 2 * y) * 2 * w;
          const double* g1 = g0 + 2 * w;
          for (std::size_t xx = 0; xx < w; ++xx)
            grow[xx] += g0[2 * xx] + g0[2 * xx + 1] + g1[2 * xx] + g1[2 * xx + 1];
        }
    });
  }
  return Tensor(node);
}

Tensor upsample_bilinear(const Tensor& x, std::size_t H, std::size_t W) {
  if (x.shape().size() != 3) throw std::invalid_argument("upsample_bilinear: needs (C,H,W)");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const double sy = H > 1 ? static_cast<double>(h - 1) / static_cast<double>(H - 1) : 0.0;
  const double sx = W > 1 ? static_cast<double>(w - 1) / static_cast<double>(W - 1) : 0.0;
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  std::vector<Tap> ty(H), tx(W);
  for (std::size_t y = 0; y < H; ++y) {
    double v = y * sy;
    std::size_t i0 = std::min(static_cast<std::size_t>(v), h - 1);
    ty[y] = {i0, std::min(i0 + 1, h - 1), v - static_cast<double>(i0)};
  }
  for (std::size_t xx = 0; xx < W; ++xx) {
    double v = xx * sx;
    std::size_t i0 = std::min(static_cast<std::size_t>(v), w - 1);
    tx[xx] = {i0, std::min(i0 + 1, w - 1), v - static_cast<double>(i0)};
  }
  std::vector<double> out(c * H * W);
  const double* px = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = px + ch * h * w;
    double* oplane = out.data() + ch * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      const double* r0 = plane + ty[y].i0 * w;
      const double* r1 = plane + ty[y].i1 * w;
      const double fy = ty[y].f;
      double* orow = oplane + y * W;
      for (std::size_t xx = 0; xx < W; ++xx) {
        const Tap& t = tx[xx];
        const double top = r0[t.i0] * (1 - t.f) + r0[t.i1] * t.f;
        const double bot = r1[t.i0] * (1 - t.f) + r1[t.i1] * t.f;
        orow[xx] = top * (1 - fy) + bot * fy;
      }
    }
  }
  auto node = make_node({c, H, W}, std::move(out));
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=, ty = std::move(ty), tx = std::move(tx)](detail::Node& self) {
      const double* g = self.grad.data();
      double* gx = xn->grad_buf();
      for (std::size_t ch = 0; ch < c; ++ch) {
        double* gplane = gx + ch * h * w;
        const double* goplane = g + ch * H * W;
        for (std::size_t y = 0; y < H; ++y) {
          const double fy = ty[y].f;
          double* g0 = gplane + ty[y].i0 * w;
          double* g1 = gplane + ty[y].i1 * w;
          const double* grow = goplane + y * W;
          for (std::size_t xx = 0; xx < W; ++xx) {
            const Tap& t = tx[xx];
            const double gv = grow[xx];
            g0[t.i0] += gv * (1 - t.f) * (1 - fy);
            g0[t.i1] += gv * t.f * (1 - fy);
            g1[t.i0] += gv * (1 - t.f) * fy;
            g1[t.i1] += gv * t.f * fy;
          }
        }
      }
    });
  }
  return Tensor(node);
}

Tensor mean_spatial(const Tensor& x) {
  if (x.shape().size() != 3) throw std::invalid_argument("mean_spatial: needs (C,H,W)");
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  std::vector<double> out(c, 0.0);
  const double* px = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += px[ch * n + i];
    out[ch] = s / static_cast<double>(n);
  }
  auto node = make_node({c}, std::move(out));
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      double* gx = xn->grad_buf();
      const double inv = 1.0 / static_cast<double>(n);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < n; ++i) gx[ch * n + i] += g[ch] * inv;
    });
  }
  return Tensor(node);
}

Tensor diff_x(const Tensor& x) {
  if (x.shape().size() != 2 || x.dim(1) < 2)
    throw std::invalid_argument("diff_x: needs (H,W>=2)");
  const std::size_t h = x.dim(0), w = x.dim(1);
  std::vector<double> out(h * (w - 1));
  const double* px = x.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx + 1 < w; ++xx)
      out[y * (w - 1) + xx] = px[y * w + xx + 1] - px[y * w + xx];
  auto node = make_node({h, w - 1}, std::move(out));
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      double* gx = xn->grad_buf();
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx + 1 < w; ++xx) {
          const double gv = g[y * (w - 1) + xx];
          gx[y * w + xx + 1] += gv;
          gx[y * w + xx] -= gv;
        }
    });
  }
  return Tensor(node);
}

Tensor diff_y(const Tensor& x) {
  if (x.shape().size() != 2 || x.dim(0) < 2)
    throw std::invalid_argument("diff_y: needs (H>=2,W)");
  const std::size_t h = x.dim(0), w = x.dim(1);
  std::vector<double> out((h - 1) * w);
  const double* px = x.data();
  for (std::size_t y = 0; y + 1 < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx)
      out[y * w + xx] = px[(y + 1) * w + xx] - px[y * w + xx];
  auto node = make_node({h - 1, w}, std::move(out));
  if (any_requires({&x})) {
    auto xn = x.node().get();
    attach(node, {&x}, [=](detail::Node& self) {
      const double* g = self.grad.data();
      double* gx = xn->grad_buf();
      for (std::size_t y = 0; y + 1 < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const double gv = g[y * w + xx];
          gx[(y + 1) * w + xx] += gv;
          gx[y * w + xx] -= gv;
        }
    });
  }
  return Tensor(node);
}

Tensor bilinear_gather(const Tensor& img, const Tensor& u, const Tensor& v,
                       const std::vector<std::uint8_t>& valid_in,
                       std::vector<std::uint8_t>& valid_out) {
  if (img.shape().size() != 3) throw std::invalid_argument("bilinear_gather: img must be (C,H,W)");
  if (u.shape() != v.shape()) shape_error("bilinear_gather", u.shape(), v.shape());
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::size_t n = u.numel();
  if (!valid_in.empty() && valid_in.size() != n)
    throw std::invalid_argument("bilinear_gather: validity size mismatch");

  struct Samp {
    std::size_t x0, y0;
    double fx, fy;
    bool x1_in, y1_in;
  };
  std::vector<Samp> samp(n);
  valid_out.assign(n, 0);
  const double* pu = u.data();
  const double* pv = v.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid_in.empty() && !valid_in[i]) continue;
    const double uu = pu[i], vv = pv[i];
    if (!(uu >= 0.0 && uu <= static_cast<double>(w - 1) && vv >= 0.0 &&
          vv <= static_cast<double>(h - 1)))
      continue;
    Samp s;
    s.x0 = std::min(static_cast<std::size_t>(uu), w - 1);
    s.y0 = std::min(static_cast<std::size_t>(vv), h - 1);
    s.fx = uu - static_cast<double>(s.x0);
    s.fy = vv - static_cast<double>(s.y0);
    s.x1_in = s.x0 + 1 < w;
    s.y1_in = s.y0 + 1 < h;
    samp[i] = s;
    valid_out[i] = 1;
  }

  Shape out_shape = u.shape();
  out_shape.insert(out_shape.begin(), c);
  std::vector<double> out(c * n, 0.0);
  const double* pim = img.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = pim + ch * h * w;
    double* oplane = out.data() + ch * n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!valid_out[i]) continue;
      const Samp& s = samp[i];
      const double i00 = plane[s.y0 * w + s.x0];
      const double i01 = s.x1_in ? plane[s.y0 * w + s.x0 + 1] : 0.0;
      const double i10 = s.y1_in ? plane[(s.y0 + 1) * w + s.x0] : 0.0;
      const double i11 = (s.x1_in && s.y1_in) ? plane[(s.y0 + 1) * w + s.x0 + 1] : 0.0;
      oplane[i] = (1 - s.fy) * ((1 - s.fx) * i00 + s.fx * i01) +
                  s.fy * ((1 - s.fx) * i10 + s.fx * i11);
    }
  }

  auto node = make_node(std::move(out_shape), std::move(out));
  if (any_requires({&img, &u, &v})) {
    bool ri = img.requires_grad(), ru = u.requires_grad(), rv = v.requires_grad();
    auto in_ = img.node().get();
    auto un = u.node().get();
    auto vn = v.node().get();
    auto vmask = valid_out;  // frozen copy for backward
    attach(node, {&img, &u, &v},
           [=, samp = std::move(samp), vmask = std::move(vmask)](detail::Node& self) {
             const double* g = self.grad.data();
             const double* plane0 = in_->value.data();
             double* gi = ri ? in_->grad_buf() : nullptr;
             double* gu = ru ? un->grad_buf() : nullptr;
             double* gv = rv ? vn->grad_buf() : nullptr;
             for (std::size_t ch = 0; ch < c; ++ch) {
               const double* plane = plane0 + ch * h * w;
               double* gplane = gi ? gi + ch * h * w : nullptr;
               const double* go = g + ch * n;
               for (std::size_t i = 0; i < n; ++i) {
                 if (!vmask[i]) continue;
                 const Samp& s = samp[i];
                 const double gva = go[i];
                 if (gva == 0.0) continue;
                 const double i00 = plane[s.y0 * w + s.x0];
                 const double i01 = s.x1_in ? plane[s.y0 * w + s.x0 + 1] : 0.0;
                 const double i10 = s.y1_in ? plane[(s.y0 + 1) * w + s.x0] : 0.0;
                 const double i11 = (s.x1_in && s.y1_in) ? plane[(s.y0 + 1) * w + s.x0 + 1] : 0.0;
                 if (gplane) {
                   gplane[s.y0 * w + s.x0] += gva * (1 - s.fx) * (1 - s.fy);
                   if (s.x1_in) gplane[s.y0 * w + s.x0 + 1] += gva * s.fx * (1 - s.fy);
                   if (s.y1_in) gplane[(s.y0 + 1) * w + s.x0] += gva * (1 - s.fx) * s.fy;
                   if (s.x1_in && s.y1_in)
                     gplane[(s.y0 + 1) * w + s.x0 + 1] += gva * s.fx * s.fy;
                 }
                 if (gu)
                   gu[i] += gva * ((1 - s.fy) * (i01 - i00) + s.fy * (i11 - i10));
                 if (gv)
                   gv[i] += gva * ((1 - s.fx) * (i10 - i00) + s.fx * (i11 - i01));
               }
             }
           });
  }
  return Tensor(node);
}

}  // namespace endodepth
