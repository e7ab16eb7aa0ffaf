#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// Operations record a backward closure on the thread's active Tape (see
// TapeScope) whenever at least one input requires a gradient. With no active
// tape nothing is recorded, which is how inference runs. Leaves accumulate
// gradients across backward calls until zero_grad().
//
// Tensors are row-major. Broadcasting is limited to adding a row vector to
// every row of a matrix (add_rowvec); everything else needs matching shapes.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace wstab::ad {

using Real = double;
using Shape = std::vector<int>;

class Tape;

namespace detail {
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until first needed
  bool requires_grad = false;
  bool leaf = true;
  const Tape* tape = nullptr;

  Real* grad_data() {
    if (grad.empty()) grad.assign(value.size(), Real{0});
    return grad.data();
  }
};
}  // namespace detail

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  int dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const Real> data() const { return node_->value; }
  std::span<Real> mutable_data() { return node_->value; }
  Real item() const;

  /// Gradient buffer; all zeros when nothing has flowed into this tensor.
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return node_->leaf; }

  /// Deep copy of the values as a new leaf.
  Tensor clone(bool requires_grad = false) const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Records operations in execution order and replays them backwards.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Seeds d(loss)/d(loss) = 1 and propagates to every leaf reached.
  /// Intermediate gradients are reset first, so repeated calls accumulate
  /// only into leaves. Throws NotScalar.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  void record(std::shared_ptr<detail::Node> out, std::function<void()> backward_fn);

 private:
  struct Entry {
    std::shared_ptr<detail::Node> out;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
};

/// Makes `tape` the active tape of the calling thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording on the calling thread for the scope's lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]·[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]·[n,k]ᵀ
Tensor transpose(const Tensor& x);                   // 2-D only

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);
/// x[m,n] + v[n] added to every row.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor relu(const Tensor& x);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);

// ---- reductions and normalization ----------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Softmax along `axis` (negative counts from the end), max-subtracted.
Tensor softmax(const Tensor& x, int axis = -1);
/// Normalizes the last axis to zero mean / unit variance, then gain·x̂ + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = 1e-5);

enum class Reduction { Mean, Sum };

/// Cross-entropy of logits[t,V] against class ids. Positions whose target is
/// `ignore_id` contribute nothing. Mean divides by the number of counted
/// positions. Throws EmptyAfterIgnore when nothing is counted, IdOutOfRange
/// for targets outside [0, V).
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_id,
                     Reduction reduction = Reduction::Mean);

/// Number of positions cross_entropy would count.
std::size_t count_targets(std::span<const int> targets, int ignore_id);

// ---- convolution ----------------------------------------------------------

/// Cross-correlation of x[C,H,W] with kernel[O,C,kh,kw], zero padding.
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad);
/// x[C,H,W] + bias[C] per channel.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// x[C,H,W] -> [W·H, C] visiting columns left to right, rows top to bottom
/// within each column (sequence index = col·H + row).
Tensor flatten_column_major(const Tensor& x);

// ---- indexing and shape ---------------------------------------------------

/// Gathers rows of table[V,d]; gradient scatter-adds. Throws IdOutOfRange.
Tensor embed(const Tensor& table, std::span<const int> ids);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, int begin, int end);
Tensor slice_cols(const Tensor& x, int begin, int end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

/// Inverted dropout: zeroes with probability p and scales survivors by
/// 1/(1-p). The mask comes from `seed` alone, so equal seeds give equal masks.
Tensor dropout(const Tensor& x, Real p, std::uint64_t seed);

// ---- gradient checking ----------------------------------------------------

struct GradCheckReport {
  std::size_t n_values = 0;  // scalar entries checked across all params
  double max_rel_err = 0.0;  // ‖g_ad − g_fd‖∞ / (‖g_fd‖∞ + 1e-12)
  double max_abs_err = 0.0;
  double grad_inf_norm = 0.0;
  double tol = 0.0;
  bool pass = true;
};

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences over every entry of `params`. `f` must be deterministic.
/// Parameter values are restored on return and their grads reset.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, Real h = 1e-5,
                           Real tol = 1e-4);

}  // namespace wstab::ad
