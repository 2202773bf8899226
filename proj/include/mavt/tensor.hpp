#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mavt/errors.hpp"

namespace mavt {

class Rng;

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Global gradient-recording mode (thread local). Ops run while recording is
// off produce constant tensors with no graph attached.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// One vertex of the computation graph. Owned via shared_ptr by Tensor handles
// and by child nodes (through `parents`), so a graph stays alive as long as
// its root does.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // lazily sized; empty means "no grad yet"
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // accumulates into parents' grads
  bool requires_grad = false;
  bool leaf = true;
  bool retain = false;  // keep grad on a non-leaf after backward
};

using NodePtr = std::shared_ptr<Node>;

// Value handle. Copying a Tensor aliases the same node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int dim(int axis) const;  // negative axes count from the back
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct writes are only allowed on leaves; everything else is owned by the
  // graph that computed it.
  std::span<double> mutable_data();

  double item() const;  // requires numel() == 1
  double at(std::size_t flat_index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);  // leaf tensors only
  bool is_leaf() const;

  std::span<const double> grad() const;  // empty when absent
  void zero_grad();
  void clear_grad();
  void retain_grad();

  Tensor detach() const;  // fresh constant leaf sharing no state
  Tensor clone() const;   // deep copy as a new leaf

  Node* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

// ---- graph execution --------------------------------------------------------

// Reverse topological order over the recorded subgraph that requires grad.
struct Tape {
  std::vector<Node*> order;  // inputs first, root last
};

Tape build_tape(const Tensor& root);

// Full reverse sweep from a scalar root: seeds d(root)/d(root) = 1, then runs
// every node's backward. Grad buffers of plain intermediates are released as
// soon as they have been consumed.
void backward(const Tensor& loss);

// ---- operations -------------------------------------------------------------

// Binary elementwise ops broadcast `b` against a trailing suffix of `a`'s
// shape ([..., s] op [s]); identical shapes always work.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

Tensor softmax(const Tensor& x, int axis);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps = 1e-5);

Tensor mean(const Tensor& x, int axis);  // drops the reduced axis
Tensor sum(const Tensor& x);             // full reduction to a scalar

// Batched matrix product. [*, p, q] x [*, q, r] -> [*, p, r]; either operand
// may omit the batch dims entirely and is then shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast_batch(const Tensor& x, int batch);        // [..] -> [B, ..]
Tensor select_rows(const Tensor& x, const std::vector<int>& rows);

Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);
Tensor cosine_sim(const Tensor& u, const Tensor& v, double eps = 1e-8);

// Per-row negative log-likelihood of the diagonal entry of a square score
// matrix under row softmax: out[b] = -log softmax(scores[b,:])[b]. The fused
// form is exact for constant rows (returns log n) and for n == 1 (returns 0).
Tensor diag_nll(const Tensor& scores);

// Mean weighted cross entropy over rows of [B, C] logits.
Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels,
                          const std::vector<double>& weights);
// Mean weighted binary cross entropy on logits ([B] or [B, 1]).
Tensor bce_logits_mean(const Tensor& logits, const std::vector<double>& targets,
                       const std::vector<double>& weights);

// ---- finite-difference oracle ----------------------------------------------

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Central-difference check of d f / d x against the recorded gradient.
// `f` must rebuild the loss from current parameter values on every call and
// must depend on `x` through its node (aliasing handle). `x` must be a leaf
// with requires_grad set. Perturbs x in place and restores it.
FdReport fd_check(const std::function<Tensor()>& f, Tensor x, double h = 1e-5);

}  // namespace mavt
