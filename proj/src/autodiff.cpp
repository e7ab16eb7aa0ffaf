#include "wstab/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "wstab/error.hpp"

namespace wstab::ad {

using detail::Node;
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw Error(Errc::ShapeMismatch, "negative dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value.assign(shape_size(shape), Real{0});
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<Real> values, bool requires_grad) : node_(std::make_shared<Node>()) {
  if (values.size() != shape_size(shape)) {
    throw Error(Errc::ShapeMismatch, std::to_string(values.size()) + " values for shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(Real v, bool requires_grad) { return Tensor({}, {v}, requires_grad); }

Real Tensor::item() const {
  if (size() != 1) throw Error(Errc::NotScalar, "item() on shape " + shape_str(shape()));
  return node_->value[0];
}

std::span<const Real> Tensor::grad() const { return {node_->grad_data(), node_->value.size()}; }

std::span<Real> Tensor::mutable_grad() { return {node_->grad_data(), node_->value.size()}; }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Real{0});
}

void Tensor::set_requires_grad(bool on) {
  if (!node_->leaf) throw Error(Errc::InvalidConfig, "requires_grad can only be set on leaves");
  node_->requires_grad = on;
}

Tensor Tensor::clone(bool requires_grad) const { return Tensor(shape(), node_->value, requires_grad); }

// ---- Tape -----------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }

NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void Tape::record(std::shared_ptr<Node> out, std::function<void()> backward_fn) {
  entries_.push_back({std::move(out), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw Error(Errc::NotScalar, "backward() needs a scalar loss, got " +
                                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  Node* root = loss.node();
  if (!root->requires_grad) return;
  if (root->leaf) {
    root->grad_data()[0] += 1;
    return;
  }
  if (root->tape != this) throw Error(Errc::InvalidConfig, "loss was recorded on a different tape");
  for (auto& e : entries_) e.out->grad.clear();
  root->grad.assign(1, Real{1});
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->out->grad.empty()) it->backward();
  }
}

// ---- op helpers -----------------------------------------------------------

namespace {

bool tracking(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = g_active_tape;
  if (!tape) return false;
  bool any = false;
  for (const Tensor* t : inputs) {
    if (!t->requires_grad()) continue;
    if (!t->is_leaf() && t->node()->tape != tape) {
      throw Error(Errc::InvalidConfig, "tensors from different tapes cannot be mixed");
    }
    any = true;
  }
  return any;
}

Tensor make_output(Shape shape, bool track) {
  auto node = std::make_shared<Node>();
  node->value.assign(shape_size(shape), Real{0});
  node->shape = std::move(shape);
  node->requires_grad = track;
  node->leaf = !track;
  node->tape = track ? g_active_tape : nullptr;
  return Tensor(std::move(node));
}

void record(const Tensor& out, std::function<void()> fn) { g_active_tape->record(out.shared(), std::move(fn)); }

void require(bool cond, const std::string& what) {
  if (!cond) throw Error(Errc::ShapeMismatch, what);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require(t.defined() && t.rank() == rank,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
              (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
}

ConstMatMap cmap(const Node* n, int rows, int cols) { return ConstMatMap(n->value.data(), rows, cols); }

}  // namespace

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  bool track = tracking({&a, &b});
  Tensor out = make_output({m, n}, track);
  MatMap(out.node()->value.data(), m, n).noalias() = cmap(a.node(), m, k) * cmap(b.node(), k, n);
  if (track) {
    auto an = a.shared(), bn = b.shared();
    Node* on = out.node();
    record(out, [an, bn, on, m, k, n] {
      ConstMatMap g(on->grad.data(), m, n);
      if (an->requires_grad) MatMap(an->grad_data(), m, k).noalias() += g * cmap(bn.get(), k, n).transpose();
      if (bn->requires_grad) MatMap(bn->grad_data(), k, n).noalias() += cmap(an.get(), m, k).transpose() * g;
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  require(b.dim(1) == k, "matmul_nt: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "T");
  bool track = tracking({&a, &b});
  Tensor out = make_output({m, n}, track);
  MatMap(out.node()->value.data(), m, n).noalias() = cmap(a.node(), m, k) * cmap(b.node(), n, k).transpose();
  if (track) {
    auto an = a.shared(), bn = b.shared();
    Node* on = out.node();
    record(out, [an, bn, on, m, k, n] {
      ConstMatMap g(on->grad.data(), m, n);
      if (an->requires_grad) MatMap(an->grad_data(), m, k).noalias() += g * cmap(bn.get(), n, k);
      if (bn->requires_grad) MatMap(bn->grad_data(), n, k).noalias() += g.transpose() * cmap(an.get(), m, k);
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  int m = x.dim(0), n = x.dim(1);
  bool track = tracking({&x});
  Tensor out = make_output({n, m}, track);
  MatMap(out.node()->value.data(), n, m) = cmap(x.node(), m, n).transpose();
  if (track) {
    auto xn = x.shared();
    Node* on = out.node();
    record(out, [xn, on, m, n] {
      MatMap(xn->grad_data(), m, n) += ConstMatMap(on->grad.data(), n, m).transpose();
    });
  }
  return out;
}

// ---- elementwise ----------------------------------------------------------

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.defined() && b.defined() && a.shape() == b.shape(),
          std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  bool track = tracking({&a, &b});
  Tensor out = make_output(a.shape(), track);
  auto& ov = out.node()->value;
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (track) {
    auto an = a.shared(), bn = b.shared();
    Node* on = out.node();
    record(out, [an, bn, on] {
      const auto& g = on->grad;
      for (Node* in : {an.get(), bn.get()}) {
        if (!in->requires_grad) continue;
        Real* gi = in->grad_data();
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  bool track = tracking({&a, &b});
  Tensor out = make_output(a.shape(), track);
  auto& ov = out.node()->value;
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (track) {
    auto an = a.shared(), bn = b.shared();
    Node* on = out.node();
    record(out, [an, bn, on] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        Real* ga = an->grad_data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bn->requires_grad) {
        Real* gb = bn->grad_data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  bool track = tracking({&a, &b});
  Tensor out = make_output(a.shape(), track);
  auto& ov = out.node()->value;
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (track) {
    auto an = a.shared(), bn = b.shared();
    Node* on = out.node();
    record(out, [an, bn, on] {
      const auto& g = on->grad;
      if (an->requires_grad) {
        Real* ga = an->grad_data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        Real* gb = bn->grad_data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, Real factor) {
  bool track = tracking({&x});
  Tensor out = make_output(x.shape(), track);
  auto& ov = out.node()->value;
  const auto& xv = x.node()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * factor;
  if (track) {
    auto xn = x.shared();
    Node* on = out.node();
    record(out, [xn, on, factor] {
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i] * factor;
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_rank(x, 2, "add_rowvec");
  int m = x.dim(0), n = x.dim(1);
  require(v.defined() && v.size() == static_cast<std::size_t>(n) && (v.rank() == 1 || (v.rank() == 2 && v.dim(0) == 1)),
          "add_rowvec: vector " + shape_str(v.shape()) + " for matrix " + shape_str(x.shape()));
  bool track = tracking({&x, &v});
  Tensor out = make_output(x.shape(), track);
  auto& ov = out.node()->value;
  const auto& xv = x.node()->value;
  const auto& vv = v.node()->value;
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < n; ++c) {
      std::size_t i = static_cast<std::size_t>(r) * n + c;
      ov[i] = xv[i] + vv[static_cast<std::size_t>(c)];
    }
  }
  if (track) {
    auto xn = x.shared(), vn = v.shared();
    Node* on = out.node();
    record(out, [xn, vn, on, m, n] {
      const auto& g = on->grad;
      if (xn->requires_grad) {
        Real* gx = xn->grad_data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (vn->requires_grad) {
        Real* gv = vn->grad_data();
        for (int r = 0; r < m; ++r) {
          for (int c = 0; c < n; ++c) gv[c] += g[static_cast<std::size_t>(r) * n + c];
        }
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  bool track = tracking({&x});
  Tensor out = make_output(x.shape(), track);
  auto& ov = out.node()->value;
  const auto& xv = x.node()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0 ? xv[i] : Real{0};
  if (track) {
    auto xn = x.shared();
    Node* on = out.node();
    record(out, [xn, on] {
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        if (xn->value[i] > 0) gx[i] += on->grad[i];
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr Real kInvSqrt2 = 0.70710678118654752440;
  constexpr Real kInvSqrt2Pi = 0.39894228040143267794;
  bool track = tracking({&x});
  Tensor out = make_output(x.shape(), track);
  auto& ov = out.node()->value;
  const auto& xv = x.node()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = Real{0.5} * xv[i] * (1 + std::erf(xv[i] * kInvSqrt2));
  if (track) {
    auto xn = x.shared();
    Node* on = out.node();
    record(out, [xn, on] {
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        Real v = xn->value[i];
        Real cdf = Real{0.5} * (1 + std::erf(v * kInvSqrt2));
        Real pdf = kInvSqrt2Pi * std::exp(Real{-0.5} * v * v);
        gx[i] += on->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// ---- reductions and normalization ----------------------------------------

Tensor sum(const Tensor& x) {
  bool track = tracking({&x});
  Tensor out = make_output({}, track);
  const auto& xv = x.node()->value;
  out.node()->value[0] = std::accumulate(xv.begin(), xv.end(), Real{0});
  if (track) {
    auto xn = x.shared();
    Node* on = out.node();
    record(out, [xn, on] {
      Real g = on->grad[0];
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  require(x.size() > 0, "mean of an empty tensor");
  return scale(sum(x), Real{1} / static_cast<Real>(x.size()));
}

Tensor softmax(const Tensor& x, int axis) {
  int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, "softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  std::size_t len = static_cast<std::size_t>(x.dim(static_cast<std::size_t>(axis)));
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.dim(static_cast<std::size_t>(i)));
  for (int i = axis + 1; i < rank; ++i) inner *= static_cast<std::size_t>(x.dim(static_cast<std::size_t>(i)));

  bool track = tracking({&x});
  Tensor out = make_output(x.shape(), track);
  auto& y = out.node()->value;
  const auto& xv = x.node()->value;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      std::size_t base = o * len * inner + j;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
      Real total = 0;
      for (std::size_t i = 0; i < len; ++i) {
        Real e = std::exp(xv[base + i * inner] - mx);
        y[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) y[base + i * inner] /= total;
    }
  }
  if (track) {
    auto xn = x.shared();
    Node* on = out.node();
    record(out, [xn, on, outer, inner, len] {
      const auto& g = on->grad;
      const auto& yv = on->value;
      Real* gx = xn->grad_data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
          std::size_t base = o * len * inner + j;
          Real dot = 0;
          for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * yv[base + i * inner];
          for (std::size_t i = 0; i < len; ++i) {
            std::size_t k = base + i * inner;
            gx[k] += yv[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  require(x.defined() && x.rank() >= 1, "layer_norm: input must have rank >= 1");
  std::size_t n = static_cast<std::size_t>(x.shape().back());
  require(n > 0 && gain.size() == n && bias.size() == n,
          "layer_norm: gain/bias " + shape_str(gain.shape()) + " for input " + shape_str(x.shape()));
  std::size_t rows = x.size() / n;
  bool track = tracking({&x, &gain, &bias});
  Tensor out = make_output(x.shape(), track);
  auto& y = out.node()->value;
  const auto& xv = x.node()->value;
  const auto& gv = gain.node()->value;
  const auto& bv = bias.node()->value;
  std::vector<Real> xhat(x.size());
  std::vector<Real> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data() + r * n;
    Real mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += xr[i];
    mu /= static_cast<Real>(n);
    Real var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<Real>(n);
    rstd[r] = Real{1} / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      Real h = (xr[i] - mu) * rstd[r];
      xhat[r * n + i] = h;
      y[r * n + i] = gv[i] * h + bv[i];
    }
  }
  if (track) {
    auto xn = x.shared(), gn = gain.shared(), bn = bias.shared();
    Node* on = out.node();
    record(out, [xn, gn, bn, on, rows, n, xhat = std::move(xhat), rstd = std::move(rstd)] {
      const auto& g = on->grad;
      if (gn->requires_grad || bn->requires_grad) {
        Real* gg = gn->requires_grad ? gn->grad_data() : nullptr;
        Real* gb = bn->requires_grad ? bn->grad_data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < n; ++i) {
            if (gg) gg[i] += g[r * n + i] * xhat[r * n + i];
            if (gb) gb[i] += g[r * n + i];
          }
        }
      }
      if (!xn->requires_grad) return;
      Real* gx = xn->grad_data();
      const auto& gain_v = gn->value;
      for (std::size_t r = 0; r < rows; ++r) {
        Real mean_d = 0, mean_dh = 0;
        for (std::size_t i = 0; i < n; ++i) {
          Real d = g[r * n + i] * gain_v[i];
          mean_d += d;
          mean_dh += d * xhat[r * n + i];
        }
        mean_d /= static_cast<Real>(n);
        mean_dh /= static_cast<Real>(n);
        for (std::size_t i = 0; i < n; ++i) {
          Real d = g[r * n + i] * gain_v[i];
          gx[r * n + i] += rstd[r] * (d - mean_d - xhat[r * n + i] * mean_dh);
        }
      }
    });
  }
  return out;
}

std::size_t count_targets(std::span<const int> targets, int ignore_id) {
  return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [&](int t) { return t != ignore_id; }));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_id, Reduction reduction) {
  require_rank(logits, 2, "cross_entropy");
  int t = logits.dim(0), v = logits.dim(1);
  if (static_cast<std::size_t>(t) != targets.size()) {
    throw Error(Errc::Misaligned, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                      std::to_string(t) + " logit rows");
  }
  std::size_t counted = count_targets(targets, ignore_id);
  if (counted == 0) throw Error(Errc::EmptyAfterIgnore, "cross_entropy: every target is ignored");
  for (int target : targets) {
    if (target != ignore_id && (target < 0 || target >= v)) {
      throw Error(Errc::IdOutOfRange, "cross_entropy: target " + std::to_string(target) + " for " +
                                          std::to_string(v) + " classes");
    }
  }
  Real norm = reduction == Reduction::Mean ? Real{1} / static_cast<Real>(counted) : Real{1};
  bool track = tracking({&logits});
  Tensor out = make_output({}, track);
  const auto& lv = logits.node()->value;
  std::vector<Real> probs(track ? lv.size() : 0);
  Real total = 0;
  for (int r = 0; r < t; ++r) {
    int target = targets[static_cast<std::size_t>(r)];
    if (target == ignore_id) continue;
    const Real* row = lv.data() + static_cast<std::size_t>(r) * v;
    Real mx = *std::max_element(row, row + v);
    Real z = 0;
    for (int c = 0; c < v; ++c) z += std::exp(row[c] - mx);
    Real lse = mx + std::log(z);
    total += lse - row[target];
    if (track) {
      for (int c = 0; c < v; ++c) probs[static_cast<std::size_t>(r) * v + c] = std::exp(row[c] - lse);
    }
  }
  out.node()->value[0] = total * norm;
  if (track) {
    auto ln = logits.shared();
    Node* on = out.node();
    std::vector<int> tg(targets.begin(), targets.end());
    record(out, [ln, on, t, v, norm, ignore_id, tg = std::move(tg), probs = std::move(probs)] {
      Real g = on->grad[0] * norm;
      Real* gl = ln->grad_data();
      for (int r = 0; r < t; ++r) {
        int target = tg[static_cast<std::size_t>(r)];
        if (target == ignore_id) continue;
        std::size_t base = static_cast<std::size_t>(r) * v;
        for (int c = 0; c < v; ++c) gl[base + c] += g * probs[base + c];
        gl[base + target] -= g;
      }
    });
  }
  return out;
}

// ---- convolution ----------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad) {
  require_rank(x, 3, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  require(stride >= 1 && pad >= 0, "conv2d: stride must be >= 1 and pad >= 0");
  int c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  int c_out = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  require(kernel.dim(1) == c_in, "conv2d: kernel " + shape_str(kernel.shape()) + " for input " + shape_str(x.shape()));
  int ho = (h + 2 * pad - kh) / stride + 1;
  int wo = (w + 2 * pad - kw) / stride + 1;
  require(ho > 0 && wo > 0, "conv2d: kernel larger than padded input");

  int patch = c_in * kh * kw;
  int positions = ho * wo;
  // im2col: cols[patch, positions]
  std::vector<Real> cols(static_cast<std::size_t>(patch) * positions, Real{0});
  const auto& xv = x.node()->value;
  for (int c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        Real* dst = cols.data() + static_cast<std::size_t>((c * kh + ky) * kw + kx) * positions;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const Real* src = xv.data() + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[oy * wo + ox] = src[ix];
          }
        }
      }
    }
  }
  bool track = tracking({&x, &kernel});
  Tensor out = make_output({c_out, ho, wo}, track);
  MatMap(out.node()->value.data(), c_out, positions).noalias() =
      cmap(kernel.node(), c_out, patch) * ConstMatMap(cols.data(), patch, positions);
  if (track) {
    auto xn = x.shared(), kn = kernel.shared();
    Node* on = out.node();
    record(out, [=, cols = std::move(cols)] {
      ConstMatMap g(on->grad.data(), c_out, positions);
      if (kn->requires_grad) {
        MatMap(kn->grad_data(), c_out, patch).noalias() += g * ConstMatMap(cols.data(), patch, positions).transpose();
      }
      if (!xn->requires_grad) return;
      RowMat dcols = cmap(kn.get(), c_out, patch).transpose() * g;
      Real* gx = xn->grad_data();
      for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            const Real* src = dcols.data() + static_cast<std::size_t>((c * kh + ky) * kw + kx) * positions;
            for (int oy = 0; oy < ho; ++oy) {
              int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              Real* dst = gx + (static_cast<std::size_t>(c) * h + iy) * w;
              for (int ox = 0; ox < wo; ++ox) {
                int ix = ox * stride - pad + kx;
                if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 3, "add_channel_bias");
  int c = x.dim(0);
  std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  require(bias.defined() && bias.size() == static_cast<std::size_t>(c),
          "add_channel_bias: bias " + shape_str(bias.shape()) + " for " + shape_str(x.shape()));
  bool track = tracking({&x, &bias});
  Tensor out = make_output(x.shape(), track);
  auto& ov = out.node()->value;
  const auto& xv = x.node()->value;
  const auto& bv = bias.node()->value;
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) ov[ch * plane + i] = xv[ch * plane + i] + bv[static_cast<std::size_t>(ch)];
  }
  if (track) {
    auto xn = x.shared(), bn = bias.shared();
    Node* on = out.node();
    record(out, [xn, bn, on, c, plane] {
      const auto& g = on->grad;
      if (xn->requires_grad) {
        Real* gx = xn->grad_data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bn->requires_grad) {
        Real* gb = bn->grad_data();
        for (int ch = 0; ch < c; ++ch) {
          Real s = 0;
          for (std::size_t i = 0; i < plane; ++i) s += g[ch * plane + i];
          gb[ch] += s;
        }
      }
    });
  }
  return out;
}

Tensor flatten_column_major(const Tensor& x) {
  require_rank(x, 3, "flatten_column_major");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  bool track = tracking({&x});
  Tensor out = make_output({w * h, c}, track);
  auto& ov = out.node()->value;
  const auto& xv = x.node()->value;
  for (int col = 0; col < w; ++col) {
    for (int row = 0; row < h; ++row) {
      std::size_t s = static_cast<std::size_t>(col) * h + row;
      for (int ch = 0; ch < c; ++ch) ov[s * c + ch] = xv[(static_cast<std::size_t>(ch) * h + row) * w + col];
    }
  }
  if (track) {
    auto xn = x.shared();
    Node* on = out.node();
    record(out, [xn, on, c, h, w] {
      Real* gx = xn->grad_data();
      const auto& g = on->grad;
      for (int col = 0; col < w; ++col) {
        for (int row = 0; row < h; ++row) {
          std::size_t s = static_cast<std::size_t>(col) * h + row;
          for (int ch = 0; ch < c; ++ch) gx[(static_cast<std::size_t>(ch) * h + row) * w + col] += g[s * c + ch];
        }
      }
    });
  }
  return out;
}

// ---- indexing and shape ---------------------------------------------------

Tensor embed(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embed");
  int vocab = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw Error(Errc::IdOutOfRange, "embed: id " + std::to_string(id) + " for table of " + std::to_string(vocab));
    }
  }
  int n = static_cast<int>(ids.size());
  bool track = tracking({&table});
  Tensor out = make_output({n, d}, track);
  auto& ov = out.node()->value;
  const auto& tv = table.node()->value;
  for (int i = 0; i < n; ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d, d,
                ov.data() + static_cast<std::size_t>(i) * d);
  }
  if (track) {
    auto tn = table.shared();
    Node* on = out.node();
    std::vector<int> idv(ids.begin(), ids.end());
    record(out, [tn, on, d, idv = std::move(idv)] {
      Real* gt = tn->grad_data();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        Real* dst = gt + static_cast<std::size_t>(idv[i]) * d;
        const Real* src = on->grad.data() + i * d;
        for (int k = 0; k < d; ++k) dst[k] += src[k];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_size(shape) == x.size(), "reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  bool track = tracking({&x});
  Tensor out = make_output(std::move(shape), track);
  out.node()->value = x.node()->value;
  if (track) {
    auto xn = x.shared();
    Node* on = out.node();
    record(out, [xn, on] {
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int begin, int end) {
  require_rank(x, 2, "slice_rows");
  require(0 <= begin && begin <= end && end <= x.dim(0), "slice_rows: range out of bounds");
  int n = x.dim(1);
  bool track = tracking({&x});
  Tensor out = make_output({end - begin, n}, track);
  std::copy_n(x.node()->value.data() + static_cast<std::size_t>(begin) * n, static_cast<std::size_t>(end - begin) * n,
              out.node()->value.data());
  if (track) {
    auto xn = x.shared();
    Node* on = out.node();
    record(out, [xn, on, begin, n] {
      Real* gx = xn->grad_data() + static_cast<std::size_t>(begin) * n;
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int begin, int end) {
  require_rank(x, 2, "slice_cols");
  require(0 <= begin && begin <= end && end <= x.dim(1), "slice_cols: range out of bounds");
  int m = x.dim(0), n = x.dim(1), w = end - begin;
  bool track = tracking({&x});
  Tensor out = make_output({m, w}, track);
  MatMap(out.node()->value.data(), m, w) = cmap(x.node(), m, n).middleCols(begin, w);
  if (track) {
    auto xn = x.shared();
    Node* on = out.node();
    record(out, [xn, on, m, n, w, begin] {
      MatMap(xn->grad_data(), m, n).middleCols(begin, w) += ConstMatMap(on->grad.data(), m, w);
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  int n = parts[0].dim(1), m = 0;
  bool track = false;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    require(p.dim(1) == n, "concat_rows: column count mismatch");
    m += p.dim(0);
    track = track || tracking({&p});
  }
  Tensor out = make_output({m, n}, track);
  std::size_t offset = 0;
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) {
    std::copy(p.node()->value.begin(), p.node()->value.end(), out.node()->value.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.size();
    nodes.push_back(p.shared());
  }
  if (track) {
    Node* on = out.node();
    record(out, [nodes = std::move(nodes), on] {
      std::size_t off = 0;
      for (const auto& pn : nodes) {
        if (pn->requires_grad) {
          Real* gp = pn->grad_data();
          for (std::size_t i = 0; i < pn->value.size(); ++i) gp[i] += on->grad[off + i];
        }
        off += pn->value.size();
      }
    });
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  int m = parts[0].dim(0), n = 0;
  bool track = false;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    require(p.dim(0) == m, "concat_cols: row count mismatch");
    n += p.dim(1);
    track = track || tracking({&p});
  }
  Tensor out = make_output({m, n}, track);
  MatMap om(out.node()->value.data(), m, n);
  std::vector<std::shared_ptr<Node>> nodes;
  int col = 0;
  for (const auto& p : parts) {
    om.middleCols(col, p.dim(1)) = cmap(p.node(), m, p.dim(1));
    col += p.dim(1);
    nodes.push_back(p.shared());
  }
  if (track) {
    Node* on = out.node();
    record(out, [nodes = std::move(nodes), on, m, n] {
      ConstMatMap g(on->grad.data(), m, n);
      int c = 0;
      for (const auto& pn : nodes) {
        int w = pn->shape[1];
        if (pn->requires_grad) MatMap(pn->grad_data(), m, w) += g.middleCols(c, w);
        c += w;
      }
    });
  }
  return out;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

Tensor dropout(const Tensor& x, Real p, std::uint64_t seed) {
  if (p <= 0) return x;
  require(p < 1, "dropout: probability must be < 1");
  bool track = tracking({&x});
  Tensor out = make_output(x.shape(), track);
  std::vector<Real> mask(x.size());
  std::uint64_t state = seed;
  Real keep = 1 - p;
  for (auto& m : mask) {
    double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
    m = u < p ? Real{0} : Real{1} / keep;
  }
  auto& ov = out.node()->value;
  const auto& xv = x.node()->value;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * mask[i];
  if (track) {
    auto xn = x.shared();
    Node* on = out.node();
    record(out, [xn, on, mask = std::move(mask)] {
      Real* gx = xn->grad_data();
      for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += on->grad[i] * mask[i];
    });
  }
  return out;
}

// ---- gradient checking ----------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, Real h, Real tol) {
  GradCheckReport report;
  report.tol = tol;
  if (params.empty()) return report;

  std::vector<bool> previous(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    previous[p] = params[p].requires_grad();
    params[p].set_requires_grad(true);
    params[p].zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f();
    tape.backward(loss);
  }

  double max_diff = 0, max_fd = 0, max_ad = 0;
  for (auto& param : params) {
    std::vector<Real> analytic(param.grad().begin(), param.grad().end());
    auto values = param.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      Real saved = values[i];
      values[i] = saved + h;
      Real plus = f().item();
      values[i] = saved - h;
      Real minus = f().item();
      values[i] = saved;
      Real numeric = (plus - minus) / (2 * h);
      max_diff = std::max(max_diff, std::abs(static_cast<double>(analytic[i] - numeric)));
      max_fd = std::max(max_fd, std::abs(static_cast<double>(numeric)));
      max_ad = std::max(max_ad, std::abs(static_cast<double>(analytic[i])));
      ++report.n_values;
    }
    param.zero_grad();
  }
  for (std::size_t p = 0; p < params.size(); ++p) params[p].set_requires_grad(previous[p]);

  report.max_abs_err = max_diff;
  report.grad_inf_norm = max_ad;
  report.max_rel_err = max_diff / (max_fd + 1e-12);
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace wstab::ad
