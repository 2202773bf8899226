#include "mavt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "mavt/rng.hpp"

namespace mavt {

namespace {

thread_local bool g_grad_enabled = true;

void ensure_grad_buf(Node& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
}

int normalize_axis(int axis, int ndim, const char* op) {
  int a = axis < 0 ? axis + ndim : axis;
  if (a < 0 || a >= ndim) {
    std::ostringstream os;
    os << op << ": axis " << axis << " out of range for rank " << ndim;
    throw DimensionError(os.str());
  }
  return a;
}

bool any_parent_requires(const std::vector<NodePtr>& parents) {
  for (const auto& p : parents)
    if (p->requires_grad) return true;
  return false;
}

// Builds the result node. When recording is off or no parent is traced the
// result is a plain constant and the closure is dropped.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::vector<NodePtr> parents,
                   std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (g_grad_enabled && any_parent_requires(parents)) {
    n->parents = std::move(parents);
    n->backward = std::move(bw);
    n->requires_grad = true;
    n->leaf = false;
  }
  return Tensor(std::move(n));
}

// Suffix-broadcast layout: b's shape must equal the trailing dims of a's.
std::size_t check_suffix(const Tensor& a, const Tensor& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sb.size() <= sa.size();
  if (ok) {
    for (std::size_t i = 0; i < sb.size(); ++i)
      ok = ok && sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i];
  }
  if (!ok) {
    throw DimensionError(std::string(op) + ": cannot broadcast " +
                         shape_str(sb) + " against " + shape_str(sa));
  }
  return b.numel();
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= static_cast<std::size_t>(s[i]);
  r.n = static_cast<std::size_t>(s[axis]);
  for (std::size_t i = axis + 1; i < s.size(); ++i)
    r.inner *= static_cast<std::size_t>(s[i]);
  return r;
}

// C[p,r] (+)= A[p,q] * B[q,r]
void gemm_nn(const double* a, const double* b, double* c, int p, int q, int r,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(p) * r, 0.0);
  for (int i = 0; i < p; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * q;
    double* ci = c + static_cast<std::size_t>(i) * r;
    for (int k = 0; k < q; ++k) {
      double aik = ai[k];
      const double* bk = b + static_cast<std::size_t>(k) * r;
      for (int j = 0; j < r; ++j) ci[j] += aik * bk[j];
    }
  }
}

// C[p,q] += A[p,r] * B[q,r]^T
void gemm_nt_acc(const double* a, const double* b, double* c, int p, int q,
                 int r) {
  for (int i = 0; i < p; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * r;
    double* ci = c + static_cast<std::size_t>(i) * q;
    for (int j = 0; j < q; ++j) {
      const double* bj = b + static_cast<std::size_t>(j) * r;
      double acc = 0.0;
      for (int k = 0; k < r; ++k) acc += ai[k] * bj[k];
      ci[j] += acc;
    }
  }
}

// C[q,r] += A[p,q]^T * B[p,r]
void gemm_tn_acc(const double* a, const double* b, double* c, int p, int q,
                 int r) {
  for (int i = 0; i < p; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * q;
    const double* bi = b + static_cast<std::size_t>(i) * r;
    for (int k = 0; k < q; ++k) {
      double aik = ai[k];
      double* ck = c + static_cast<std::size_t>(k) * r;
      for (int j = 0; j < r; ++j) ck[j] += aik * bi[j];
    }
  }
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor -----------------------------------------------------------------

static void check_dims_positive(const Shape& shape) {
  for (int d : shape)
    if (d <= 0)
      throw DimensionError("tensor shape must have positive dims, got " +
                           shape_str(shape));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_dims_positive(shape);
  auto n = std::make_shared<Node>();
  n->data.assign(shape_numel(shape), 0.0);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return full({}, value, false); }

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  check_dims_positive(shape);
  if (values.size() != shape_numel(shape)) {
    std::ostringstream os;
    os << "Tensor::from: " << values.size() << " values for shape "
       << shape_str(shape);
    throw DimensionError(os.str());
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.node_->data) v = stddev * rng.normal();
  return t;
}

static const Node& deref(const NodePtr& n, const char* what) {
  if (!n) throw ContractError(std::string(what) + " on an undefined tensor");
  return *n;
}

const Shape& Tensor::shape() const { return deref(node_, "shape()").shape; }
int Tensor::ndim() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
  const Shape& s = shape();
  int a = normalize_axis(axis, static_cast<int>(s.size()), "dim");
  return s[a];
}

std::size_t Tensor::numel() const { return deref(node_, "numel()").data.size(); }

std::span<const double> Tensor::data() const {
  const Node& n = deref(node_, "data()");
  return {n.data.data(), n.data.size()};
}

std::span<double> Tensor::mutable_data() {
  deref(node_, "mutable_data()");
  if (!node_->leaf)
    throw ContractError("mutable_data() is only allowed on leaf tensors");
  return {node_->data.data(), node_->data.size()};
}

double Tensor::item() const {
  const Node& n = deref(node_, "item()");
  if (n.data.size() != 1)
    throw DimensionError("item() needs a one-element tensor, got shape " +
                         shape_str(n.shape));
  return n.data[0];
}

double Tensor::at(std::size_t flat_index) const {
  const Node& n = deref(node_, "at()");
  if (flat_index >= n.data.size())
    throw DimensionError("at(): index out of range");
  return n.data[flat_index];
}

bool Tensor::requires_grad() const {
  return deref(node_, "requires_grad()").requires_grad;
}

void Tensor::set_requires_grad(bool value) {
  deref(node_, "set_requires_grad()");
  if (!node_->leaf)
    throw ContractError("set_requires_grad() is only allowed on leaf tensors");
  node_->requires_grad = value;
}

bool Tensor::is_leaf() const { return deref(node_, "is_leaf()").leaf; }

std::span<const double> Tensor::grad() const {
  const Node& n = deref(node_, "grad()");
  return {n.grad.data(), n.grad.size()};
}

void Tensor::zero_grad() {
  deref(node_, "zero_grad()");
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  deref(node_, "clear_grad()");
  node_->grad.clear();
  node_->grad.shrink_to_fit();
}

void Tensor::retain_grad() {
  deref(node_, "retain_grad()");
  node_->retain = true;
}

Tensor Tensor::detach() const {
  const Node& n = deref(node_, "detach()");
  auto out = std::make_shared<Node>();
  out->shape = n.shape;
  out->data = n.data;
  return Tensor(std::move(out));
}

Tensor Tensor::clone() const {
  const Node& n = deref(node_, "clone()");
  auto out = std::make_shared<Node>();
  out->shape = n.shape;
  out->data = n.data;
  out->requires_grad = n.requires_grad;
  return Tensor(std::move(out));
}

// ---- tape & backward --------------------------------------------------------

Tape build_tape(const Tensor& root) {
  Tape tape;
  if (!root.defined() || !root.node()->requires_grad) return tape;
  // Iterative post-order DFS over traced nodes only.
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      tape.order.push_back(n);
      stack.pop_back();
    }
  }
  return tape;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: root must be a defined scalar tensor");
  if (!loss.node()->requires_grad)
    throw ContractError(
        "backward: root does not require grad (nothing was recorded)");
  Tape tape = build_tape(loss);
  ensure_grad_buf(*loss.node());
  loss.node()->grad[0] = 1.0;
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      for (const auto& p : n->parents)
        if (p->requires_grad) ensure_grad_buf(*p);
      n->backward(*n);
    }
    if (!n->leaf && !n->retain) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---- elementwise ------------------------------------------------------------

static Tensor binary_suffix(const Tensor& a, const Tensor& b, const char* op,
                            double (*fwd)(double, double), int mode) {
  // mode: 0 add, 1 sub, 2 mul
  std::size_t bn = check_suffix(a, b, op);
  std::vector<double> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i % bn]);
  NodePtr an = a.node_ptr(), bnp = b.node_ptr();
  return make_result(a.shape(), std::move(out), {an, bnp},
                     [an, bnp, bn, mode](Node& self) {
                       const auto& g = self.grad;
                       if (an->requires_grad) {
                         auto& da = an->grad;
                         if (mode == 2) {
                           for (std::size_t i = 0; i < g.size(); ++i)
                             da[i] += g[i] * bnp->data[i % bn];
                         } else {
                           for (std::size_t i = 0; i < g.size(); ++i)
                             da[i] += g[i];
                         }
                       }
                       if (bnp->requires_grad) {
                         auto& db = bnp->grad;
                         if (mode == 0) {
                           for (std::size_t i = 0; i < g.size(); ++i)
                             db[i % bn] += g[i];
                         } else if (mode == 1) {
                           for (std::size_t i = 0; i < g.size(); ++i)
                             db[i % bn] -= g[i];
                         } else {
                           for (std::size_t i = 0; i < g.size(); ++i)
                             db[i % bn] += g[i] * an->data[i];
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_suffix(a, b, "add", [](double x, double y) { return x + y; }, 0);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_suffix(a, b, "sub", [](double x, double y) { return x - y; }, 1);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_suffix(a, b, "mul", [](double x, double y) { return x * y; }, 2);
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * ad[i];
  NodePtr an = a.node_ptr();
  return make_result(a.shape(), std::move(out), {an}, [an, c](Node& self) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += c * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + c;
  NodePtr an = a.node_ptr();
  return make_result(a.shape(), std::move(out), {an}, [an](Node& self) {
    if (!an->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i];
  });
}

static Tensor unary_op(const Tensor& x, const char*,
                       double (*fwd)(double),
                       std::function<double(double, double, double)> dfn) {
  // dfn(x, y, g) -> contribution to dx
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  NodePtr xn = x.node_ptr();
  return make_result(x.shape(), std::move(out), {xn},
                     [xn, dfn](Node& self) {
                       if (!xn->requires_grad) return;
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                         xn->grad[i] +=
                             dfn(xn->data[i], self.data[i], self.grad[i]);
                     });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double, double g) { return v > 0.0 ? g : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary_op(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [](double v, double, double g) {
        double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        return g * (phi + v * pdf);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid",
      [](double v) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
      },
      [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, "log", [](double v) { return std::log(v); },
      [](double v, double, double g) { return g / v; });
}

// ---- softmax / layernorm ----------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  int a = normalize_axis(axis, x.ndim(), "softmax");
  AxisSplit sp = split_at(x.shape(), a);
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      std::size_t base = o * sp.n * sp.inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k)
        m = std::max(m, xd[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        double e = std::exp(xd[base + k * sp.inner] - m);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= z;
    }
  }
  NodePtr xn = x.node_ptr();
  return make_result(x.shape(), std::move(out), {xn}, [xn, sp](Node& self) {
    if (!xn->requires_grad) return;
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        std::size_t base = o * sp.n * sp.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k) {
          std::size_t i = base + k * sp.inner;
          dot += g[i] * y[i];
        }
        for (std::size_t k = 0; k < sp.n; ++k) {
          std::size_t i = base + k * sp.inner;
          xn->grad[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps) {
  if (x.ndim() < 1) throw DimensionError("layernorm: input must have rank >= 1");
  int d = x.shape().back();
  if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != d ||
      bias.dim(0) != d) {
    throw DimensionError("layernorm: gain/bias must be [" + std::to_string(d) +
                         "], got " + shape_str(gain.shape()) + " and " +
                         shape_str(bias.shape()));
  }
  std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> invstd(rows);
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double m = 0.0;
    for (int j = 0; j < d; ++j) m += row[j];
    m /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = row[j] - m;
      var += c * c;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    invstd[r] = is;
    for (int j = 0; j < d; ++j) {
      double xh = (row[j] - m) * is;
      xhat[r * d + j] = xh;
      out[r * d + j] = gd[j] * xh + bd[j];
    }
  }
  NodePtr xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr();
  return make_result(
      x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, d, rows, xhat = std::move(xhat),
       invstd = std::move(invstd)](Node& self) {
        const auto& g = self.grad;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data() + r * d;
          const double* xh = xhat.data() + r * d;
          if (gn->requires_grad || bn->requires_grad) {
            for (int j = 0; j < d; ++j) {
              if (gn->requires_grad) gn->grad[j] += gr[j] * xh[j];
              if (bn->requires_grad) bn->grad[j] += gr[j];
            }
          }
          if (xn->requires_grad) {
            // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * invstd
            double s1 = 0.0, s2 = 0.0;
            for (int j = 0; j < d; ++j) {
              double dxh = gr[j] * gn->data[j];
              s1 += dxh;
              s2 += dxh * xh[j];
            }
            s1 /= d;
            s2 /= d;
            for (int j = 0; j < d; ++j) {
              double dxh = gr[j] * gn->data[j];
              xn->grad[r * d + j] += (dxh - s1 - xh[j] * s2) * invstd[r];
            }
          }
        }
      });
}

// ---- reductions -------------------------------------------------------------

Tensor mean(const Tensor& x, int axis) {
  int a = normalize_axis(axis, x.ndim(), "mean");
  AxisSplit sp = split_at(x.shape(), a);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + a);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t in = 0; in < sp.inner; ++in)
        out[o * sp.inner + in] += xd[(o * sp.n + k) * sp.inner + in];
  double inv = 1.0 / static_cast<double>(sp.n);
  for (double& v : out) v *= inv;
  NodePtr xn = x.node_ptr();
  return make_result(std::move(out_shape), std::move(out), {xn},
                     [xn, sp, inv](Node& self) {
                       if (!xn->requires_grad) return;
                       const auto& g = self.grad;
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t k = 0; k < sp.n; ++k)
                           for (std::size_t in = 0; in < sp.inner; ++in)
                             xn->grad[(o * sp.n + k) * sp.inner + in] +=
                                 inv * g[o * sp.inner + in];
                     });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  NodePtr xn = x.node_ptr();
  return make_result({}, {acc}, {xn}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    double g = self.grad[0];
    for (double& d : xn->grad) d += g;
  });
}

// ---- matmul -----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    throw DimensionError("matmul: operands must have rank >= 2, got " +
                         shape_str(sa) + " and " + shape_str(sb));
  int p = sa[sa.size() - 2], q = sa.back();
  int q2 = sb[sb.size() - 2], r = sb.back();
  if (q != q2)
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(sa) +
                         " vs " + shape_str(sb));
  Shape batch_a(sa.begin(), sa.end() - 2);
  Shape batch_b(sb.begin(), sb.end() - 2);
  if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b)
    throw DimensionError("matmul: batch dimensions disagree: " + shape_str(sa) +
                         " vs " + shape_str(sb));
  Shape batch = batch_a.empty() ? batch_b : batch_a;
  std::size_t nb = shape_numel(batch);
  std::size_t stride_a = batch_a.empty() ? 0 : static_cast<std::size_t>(p) * q;
  std::size_t stride_b = batch_b.empty() ? 0 : static_cast<std::size_t>(q) * r;
  std::size_t stride_c = static_cast<std::size_t>(p) * r;

  Shape out_shape = batch;
  out_shape.push_back(p);
  out_shape.push_back(r);
  std::vector<double> out(nb * stride_c);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < nb; ++i)
    gemm_nn(ad.data() + i * stride_a, bd.data() + i * stride_b,
            out.data() + i * stride_c, p, q, r, false);

  NodePtr an = a.node_ptr(), bn = b.node_ptr();
  return make_result(
      std::move(out_shape), std::move(out), {an, bn},
      [an, bn, p, q, r, nb, stride_a, stride_b, stride_c](Node& self) {
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < nb; ++i) {
          if (an->requires_grad)  // dA += dC * B^T
            gemm_nt_acc(g + i * stride_c, bn->data.data() + i * stride_b,
                        an->grad.data() + i * stride_a, p, q, r);
          if (bn->requires_grad)  // dB += A^T * dC
            gemm_tn_acc(an->data.data() + i * stride_a, g + i * stride_c,
                        bn->grad.data() + i * stride_b, p, q, r);
        }
      });
}

// ---- structure ops ----------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: needs at least one tensor");
  int nd = parts[0].ndim();
  int a = normalize_axis(axis, nd, "concat");
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const Tensor& t : parts) {
    if (t.ndim() != nd)
      throw DimensionError("concat: rank mismatch: " + shape_str(out_shape) +
                           " vs " + shape_str(t.shape()));
    for (int i = 0; i < nd; ++i)
      if (i != a && t.shape()[i] != out_shape[i])
        throw DimensionError("concat: shapes disagree off-axis: " +
                             shape_str(out_shape) + " vs " +
                             shape_str(t.shape()));
    total += t.shape()[a];
  }
  out_shape[a] = total;
  AxisSplit sp = split_at(out_shape, a);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> lens;
  std::size_t off = 0;  // offset along the axis
  for (const Tensor& t : parts) {
    std::size_t tn = static_cast<std::size_t>(t.shape()[a]);
    auto td = t.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::memcpy(out.data() + (o * sp.n + off) * sp.inner,
                  td.data() + o * tn * sp.inner,
                  tn * sp.inner * sizeof(double));
    nodes.push_back(t.node_ptr());
    lens.push_back(tn);
    off += tn;
  }
  return make_result(std::move(out_shape), std::move(out), nodes,
                     [nodes, lens, sp](Node& self) {
                       const auto& g = self.grad;
                       std::size_t off = 0;
                       for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                         std::size_t tn = lens[pi];
                         if (nodes[pi]->requires_grad) {
                           auto& pg = nodes[pi]->grad;
                           for (std::size_t o = 0; o < sp.outer; ++o) {
                             const double* src =
                                 g.data() + (o * sp.n + off) * sp.inner;
                             double* dst = pg.data() + o * tn * sp.inner;
                             for (std::size_t i = 0; i < tn * sp.inner; ++i)
                               dst[i] += src[i];
                           }
                         }
                         off += tn;
                       }
                     });
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  int a = normalize_axis(axis, x.ndim(), "slice");
  int n = x.shape()[a];
  if (start < 0 || length <= 0 || start + length > n) {
    std::ostringstream os;
    os << "slice: [" << start << ", " << start + length
       << ") out of range for axis of size " << n;
    throw DimensionError(os.str());
  }
  AxisSplit sp = split_at(x.shape(), a);
  Shape out_shape = x.shape();
  out_shape[a] = length;
  std::vector<double> out(shape_numel(out_shape));
  auto xd = x.data();
  std::size_t len = static_cast<std::size_t>(length);
  std::size_t st = static_cast<std::size_t>(start);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::memcpy(out.data() + o * len * sp.inner,
                xd.data() + (o * sp.n + st) * sp.inner,
                len * sp.inner * sizeof(double));
  NodePtr xn = x.node_ptr();
  return make_result(std::move(out_shape), std::move(out), {xn},
                     [xn, sp, st, len](Node& self) {
                       if (!xn->requires_grad) return;
                       const auto& g = self.grad;
                       for (std::size_t o = 0; o < sp.outer; ++o) {
                         const double* src = g.data() + o * len * sp.inner;
                         double* dst =
                             xn->grad.data() + (o * sp.n + st) * sp.inner;
                         for (std::size_t i = 0; i < len * sp.inner; ++i)
                           dst[i] += src[i];
                       }
                     });
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  int nd = x.ndim();
  int a0 = normalize_axis(axis0, nd, "transpose");
  int a1 = normalize_axis(axis1, nd, "transpose");
  if (a0 == a1) throw DimensionError("transpose: axes must differ");
  if (a0 > a1) std::swap(a0, a1);
  Shape out_shape = x.shape();
  std::swap(out_shape[a0], out_shape[a1]);
  // Walk the input in row-major order; ostrides[i] is where a step along
  // input axis i lands in the output.
  const Shape& is = x.shape();
  std::vector<std::size_t> ostrides(nd, 1);
  for (int i = nd - 2; i >= 0; --i)
    ostrides[i] = ostrides[i + 1] * static_cast<std::size_t>(out_shape[i + 1]);
  std::swap(ostrides[a0], ostrides[a1]);
  std::vector<double> out(x.numel());
  auto xd = x.data();
  std::vector<int> idx(nd, 0);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t opos = 0;
    for (int i = 0; i < nd; ++i) opos += idx[i] * ostrides[i];
    out[opos] = xd[flat];
    for (int i = nd - 1; i >= 0; --i) {
      if (++idx[i] < is[i]) break;
      idx[i] = 0;
    }
  }
  NodePtr xn = x.node_ptr();
  return make_result(std::move(out_shape), std::move(out), {xn},
                     [xn, ostrides, is, nd](Node& self) {
                       if (!xn->requires_grad) return;
                       const auto& g = self.grad;
                       std::vector<int> idx(nd, 0);
                       for (std::size_t flat = 0; flat < g.size(); ++flat) {
                         std::size_t opos = 0;
                         for (int i = 0; i < nd; ++i)
                           opos += idx[i] * ostrides[i];
                         xn->grad[flat] += g[opos];
                         for (int i = nd - 1; i >= 0; --i) {
                           if (++idx[i] < is[i]) break;
                           idx[i] = 0;
                         }
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_dims_positive(shape);
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  NodePtr xn = x.node_ptr();
  return make_result(std::move(shape), std::move(out), {xn}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xn->grad[i] += self.grad[i];
  });
}

Tensor broadcast_batch(const Tensor& x, int batch) {
  if (batch <= 0) throw DimensionError("broadcast_batch: batch must be positive");
  Shape out_shape;
  out_shape.push_back(batch);
  for (int d : x.shape()) out_shape.push_back(d);
  std::size_t n = x.numel();
  std::vector<double> out(static_cast<std::size_t>(batch) * n);
  auto xd = x.data();
  for (int b = 0; b < batch; ++b)
    std::memcpy(out.data() + static_cast<std::size_t>(b) * n, xd.data(),
                n * sizeof(double));
  NodePtr xn = x.node_ptr();
  return make_result(std::move(out_shape), std::move(out), {xn},
                     [xn, batch, n](Node& self) {
                       if (!xn->requires_grad) return;
                       const auto& g = self.grad;
                       for (int b = 0; b < batch; ++b) {
                         const double* src =
                             g.data() + static_cast<std::size_t>(b) * n;
                         for (std::size_t i = 0; i < n; ++i)
                           xn->grad[i] += src[i];
                       }
                     });
}

Tensor select_rows(const Tensor& x, const std::vector<int>& rows) {
  if (x.ndim() < 1) throw DimensionError("select_rows: input must have rank >= 1");
  int n = x.shape()[0];
  for (int r : rows)
    if (r < 0 || r >= n) {
      std::ostringstream os;
      os << "select_rows: index " << r << " out of range for " << n << " rows";
      throw DimensionError(os.str());
    }
  if (rows.empty())
    throw ContractError("select_rows: empty selection");
  std::size_t stride = x.numel() / static_cast<std::size_t>(n);
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<int>(rows.size());
  std::vector<double> out(rows.size() * stride);
  auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out.data() + i * stride,
                xd.data() + static_cast<std::size_t>(rows[i]) * stride,
                stride * sizeof(double));
  NodePtr xn = x.node_ptr();
  return make_result(std::move(out_shape), std::move(out), {xn},
                     [xn, rows, stride](Node& self) {
                       if (!xn->requires_grad) return;
                       const auto& g = self.grad;
                       for (std::size_t i = 0; i < rows.size(); ++i) {
                         double* dst =
                             xn->grad.data() +
                             static_cast<std::size_t>(rows[i]) * stride;
                         const double* src = g.data() + i * stride;
                         for (std::size_t k = 0; k < stride; ++k)
                           dst[k] += src[k];
                       }
                     });
}

// ---- similarity -------------------------------------------------------------

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  if (x.ndim() < 1)
    throw DimensionError("l2_normalize_rows: input must have rank >= 1");
  int d = x.shape().back();
  std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  std::vector<double> out(x.numel());
  std::vector<double> rnorm(rows);
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) {
      double v = xd[r * d + j];
      s += v * v;
    }
    double nrm = std::max(std::sqrt(s), eps);
    rnorm[r] = nrm;
    for (int j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] / nrm;
  }
  NodePtr xn = x.node_ptr();
  return make_result(
      x.shape(), std::move(out), {xn},
      [xn, d, rows, eps, rnorm = std::move(rnorm)](Node& self) {
        if (!xn->requires_grad) return;
        const auto& y = self.data;
        const auto& g = self.grad;
        for (std::size_t r = 0; r < rows; ++r) {
          double nrm = rnorm[r];
          if (nrm > eps) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
            for (int j = 0; j < d; ++j)
              xn->grad[r * d + j] +=
                  (g[r * d + j] - y[r * d + j] * dot) / nrm;
          } else {  // clamped: y = x / eps
            for (int j = 0; j < d; ++j) xn->grad[r * d + j] += g[r * d + j] / eps;
          }
        }
      });
}

Tensor cosine_sim(const Tensor& u, const Tensor& v, double eps) {
  if (u.shape() != v.shape())
    throw DimensionError("cosine_sim: shapes disagree: " + shape_str(u.shape()) +
                         " vs " + shape_str(v.shape()));
  auto ud = u.data();
  auto vd = v.data();
  double dot = 0.0, nu2 = 0.0, nv2 = 0.0;
  for (std::size_t i = 0; i < ud.size(); ++i) {
    dot += ud[i] * vd[i];
    nu2 += ud[i] * ud[i];
    nv2 += vd[i] * vd[i];
  }
  double nu = std::sqrt(nu2), nv = std::sqrt(nv2);
  double den = std::max(nu * nv, eps);
  double y = dot / den;
  NodePtr un = u.node_ptr(), vn = v.node_ptr();
  bool active = nu * nv > eps;
  return make_result(
      {}, {y}, {un, vn},
      [un, vn, dot, nu, nv, den, active](Node& self) {
        double g = self.grad[0];
        if (un->requires_grad) {
          for (std::size_t i = 0; i < un->data.size(); ++i) {
            double term = vn->data[i] / den;
            if (active) term -= dot * nv * un->data[i] / (nu * den * den);
            un->grad[i] += g * term;
          }
        }
        if (vn->requires_grad) {
          for (std::size_t i = 0; i < vn->data.size(); ++i) {
            double term = un->data[i] / den;
            if (active) term -= dot * nu * vn->data[i] / (nv * den * den);
            vn->grad[i] += g * term;
          }
        }
      });
}

// ---- fused losses -----------------------------------------------------------

Tensor diag_nll(const Tensor& scores) {
  if (scores.ndim() != 2 || scores.dim(0) != scores.dim(1))
    throw DimensionError("diag_nll: scores must be square, got " +
                         shape_str(scores.shape()));
  int n = scores.dim(0);
  auto zd = scores.data();
  std::vector<double> out(n);
  std::vector<double> prob(zd.size());  // row softmax, reused in backward
  for (int b = 0; b < n; ++b) {
    const double* row = zd.data() + static_cast<std::size_t>(b) * n;
    double m = row[0];
    for (int j = 1; j < n; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      double e = std::exp(row[j] - m);
      prob[static_cast<std::size_t>(b) * n + j] = e;
      z += e;
    }
    for (int j = 0; j < n; ++j) prob[static_cast<std::size_t>(b) * n + j] /= z;
    if (row[b] == m) {
      // Shift by the diagonal itself: exact 0 for n == 1 and exact log n for
      // constant rows.
      double zz = 0.0;
      for (int j = 0; j < n; ++j) zz += std::exp(row[j] - row[b]);
      out[b] = std::log(zz);
    } else {
      out[b] = (m - row[b]) + std::log(z);
    }
  }
  NodePtr sn = scores.node_ptr();
  return make_result({n}, std::move(out), {sn},
                     [sn, n, prob = std::move(prob)](Node& self) {
                       if (!sn->requires_grad) return;
                       const auto& g = self.grad;
                       for (int b = 0; b < n; ++b) {
                         std::size_t base = static_cast<std::size_t>(b) * n;
                         for (int j = 0; j < n; ++j) {
                           double p = prob[base + j];
                           sn->grad[base + j] +=
                               g[b] * (p - (j == b ? 1.0 : 0.0));
                         }
                       }
                     });
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels,
                          const std::vector<double>& weights) {
  if (logits.ndim() != 2)
    throw DimensionError("cross_entropy_mean: logits must be [B, C], got " +
                         shape_str(logits.shape()));
  int B = logits.dim(0), C = logits.dim(1);
  if (static_cast<int>(labels.size()) != B ||
      static_cast<int>(weights.size()) != B)
    throw DimensionError(
        "cross_entropy_mean: labels/weights must match the batch size");
  for (int y : labels)
    if (y < 0 || y >= C)
      throw DimensionError("cross_entropy_mean: label out of range");
  auto zd = logits.data();
  double total = 0.0;
  std::vector<double> prob(zd.size());
  for (int b = 0; b < B; ++b) {
    const double* row = zd.data() + static_cast<std::size_t>(b) * C;
    double m = row[0];
    for (int j = 1; j < C; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (int j = 0; j < C; ++j) {
      double e = std::exp(row[j] - m);
      prob[static_cast<std::size_t>(b) * C + j] = e;
      z += e;
    }
    for (int j = 0; j < C; ++j) prob[static_cast<std::size_t>(b) * C + j] /= z;
    total += weights[b] * ((m - row[labels[b]]) + std::log(z));
  }
  total /= B;
  NodePtr ln = logits.node_ptr();
  return make_result(
      {}, {total}, {ln},
      [ln, B, C, labels, weights, prob = std::move(prob)](Node& self) {
        if (!ln->requires_grad) return;
        double g = self.grad[0];
        for (int b = 0; b < B; ++b) {
          double w = g * weights[b] / B;
          if (w == 0.0) continue;
          std::size_t base = static_cast<std::size_t>(b) * C;
          for (int j = 0; j < C; ++j)
            ln->grad[base + j] +=
                w * (prob[base + j] - (j == labels[b] ? 1.0 : 0.0));
        }
      });
}

Tensor bce_logits_mean(const Tensor& logits, const std::vector<double>& targets,
                       const std::vector<double>& weights) {
  std::size_t B = logits.numel();
  if (targets.size() != B || weights.size() != B)
    throw DimensionError(
        "bce_logits_mean: targets/weights must match the batch size");
  auto zd = logits.data();
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    double z = zd[b];
    // max(z,0) - z*t + log(1 + exp(-|z|))
    double l = std::max(z, 0.0) - z * targets[b] + std::log1p(std::exp(-std::abs(z)));
    total += weights[b] * l;
  }
  total /= static_cast<double>(B);
  NodePtr ln = logits.node_ptr();
  return make_result({}, {total}, {ln},
                     [ln, B, targets, weights](Node& self) {
                       if (!ln->requires_grad) return;
                       double g = self.grad[0];
                       for (std::size_t b = 0; b < B; ++b) {
                         double z = ln->data[b];
                         double s = z >= 0.0
                                        ? 1.0 / (1.0 + std::exp(-z))
                                        : std::exp(z) / (1.0 + std::exp(z));
                         ln->grad[b] += g * weights[b] * (s - targets[b]) /
                                        static_cast<double>(B);
                       }
                     });
}

// ---- finite differences -----------------------------------------------------

FdReport fd_check(const std::function<Tensor()>& f, Tensor x, double h) {
  if (!x.defined() || !x.is_leaf() || !x.requires_grad())
    throw ContractError("fd_check: x must be a leaf with requires_grad");
  if (h <= 0.0) throw ContractError("fd_check: h must be positive");

  // Analytic pass.
  Tensor loss = f();
  if (loss.numel() != 1)
    throw ContractError("fd_check: f must return a scalar");
  x.zero_grad();
  backward(loss);
  auto gspan = x.grad();
  std::vector<double> analytic(gspan.begin(), gspan.end());
  if (analytic.empty()) analytic.assign(x.numel(), 0.0);

  FdReport rep;
  rep.checked = x.numel();
  auto xd = x.mutable_data();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    double saved = xd[i];
    double fp, fm;
    {
      NoGradGuard ng;
      xd[i] = saved + h;
      fp = f().item();
      xd[i] = saved - h;
      fm = f().item();
    }
    xd[i] = saved;
    double numeric = (fp - fm) / (2.0 * h);
    double a = analytic[i];
    double err = std::abs(a - numeric) /
                 std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (err > rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst_index = i;
      rep.analytic = a;
      rep.numeric = numeric;
    }
  }
  return rep;
}

}  // namespace mavt
