#pragma once

// Reverse-mode automatic differentiation on dense double tensors.
//
// Each op returns a Var holding its value plus a closure that maps the
// upstream gradient to parent gradients. Backward closures are themselves
// written in terms of ops, so calling grad() with create_graph=true yields
// gradients that are differentiable again (needed to push an objective
// through a gradient-based parameter update).

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "leco/errors.hpp"
#include "leco/tensor.hpp"

namespace leco::ad {

inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

struct GradGuard {
  bool prev;
  GradGuard() : prev(grad_mode()) { grad_mode() = true; }
  ~GradGuard() { grad_mode() = prev; }
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;

  static Var leaf(Tensor t);
  static Var constant(Tensor t);

  bool defined() const { return n != nullptr; }
  const Tensor& val() const;
  bool requires_grad() const;
  Var detach() const { return constant(val()); }

  int64_t numel() const { return val().numel(); }
  const Shape& shape() const { return val().shape(); }
  double item() const { return val().item(); }

  NodePtr n;
};

struct Node {
  Tensor value;
  bool requires_grad = false;
  bool is_leaf = false;
  std::vector<NodePtr> parents;
  // Maps upstream gradient to parent gradients, aligned with `parents`.
  std::function<std::vector<Var>(const Var&)> backward;
  const char* op = "const";
};

inline Var Var::leaf(Tensor t) {
  Var v;
  v.n = std::make_shared<Node>();
  v.n->value = std::move(t);
  v.n->requires_grad = true;
  v.n->is_leaf = true;
  v.n->op = "leaf";
  return v;
}

inline Var Var::constant(Tensor t) {
  Var v;
  v.n = std::make_shared<Node>();
  v.n->value = std::move(t);
  v.n->op = "const";
  return v;
}

inline const Tensor& Var::val() const {
  assert(n);
  return n->value;
}

inline bool Var::requires_grad() const { return n && n->requires_grad; }

inline Var make_op(const char* op, Tensor value, std::vector<Var> parents,
                   std::function<std::vector<Var>(const Var&)> backward) {
  bool rg = false;
  if (grad_mode()) {
    for (const Var& p : parents) rg = rg || p.requires_grad();
  }
  if (!rg) return Var::constant(std::move(value));
  Var v;
  v.n = std::make_shared<Node>();
  v.n->value = std::move(value);
  v.n->requires_grad = true;
  v.n->parents.reserve(parents.size());
  for (const Var& p : parents) v.n->parents.push_back(p.n);
  v.n->backward = std::move(backward);
  v.n->op = op;
  return v;
}

// ---------------------------------------------------------------------------
// elementwise ops

inline Var add(const Var& a, const Var& b) {
  assert(a.numel() == b.numel());
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.val().data();
  const double* pb = b.val().data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  return make_op("add", std::move(out), {a, b},
                 [](const Var& gy) { return std::vector<Var>{gy, gy}; });
}

inline Var sub(const Var& a, const Var& b);
inline Var affine(const Var& a, double mul, double shift);

inline Var neg(const Var& a) { return affine(a, -1.0, 0.0); }

inline Var sub(const Var& a, const Var& b) {
  assert(a.numel() == b.numel());
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.val().data();
  const double* pb = b.val().data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  return make_op("sub", std::move(out), {a, b}, [](const Var& gy) {
    return std::vector<Var>{gy, neg(gy)};
  });
}

inline Var mul(const Var& a, const Var& b) {
  assert(a.numel() == b.numel());
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.val().data();
  const double* pb = b.val().data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  return make_op("mul", std::move(out), {a, b}, [a, b](const Var& gy) {
    return std::vector<Var>{mul(gy, b), mul(gy, a)};
  });
}

inline Var div(const Var& a, const Var& b) {
  assert(a.numel() == b.numel());
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.val().data();
  const double* pb = b.val().data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  return make_op("div", std::move(out), {a, b}, [a, b](const Var& gy) {
    Var ga = div(gy, b);
    Var gb = neg(div(mul(gy, a), mul(b, b)));
    return std::vector<Var>{ga, gb};
  });
}

// y = mul*x + shift
inline Var affine(const Var& a, double m, double s) {
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = m * pa[i] + s;
  return make_op("affine", std::move(out), {a}, [m](const Var& gy) {
    return std::vector<Var>{affine(gy, m, 0.0)};
  });
}

inline Var smul(const Var& a, double m) { return affine(a, m, 0.0); }

inline Var relu(const Var& a) {
  Tensor out(a.shape());
  Tensor mask(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.val().data();
  double* po = out.data();
  double* pm = mask.data();
  for (int64_t i = 0; i < n; ++i) {
    const bool pos = pa[i] > 0.0;
    po[i] = pos ? pa[i] : 0.0;
    pm[i] = pos ? 1.0 : 0.0;
  }
  return make_op("relu", std::move(out), {a}, [mask](const Var& gy) {
    return std::vector<Var>{mul(gy, Var::constant(mask))};
  });
}

inline Var tanh_op(const Var& a) {
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = std::tanh(pa[i]);
  Tensor yv = out;  // shares buffer, carries no graph
  return make_op("tanh", std::move(out), {a}, [a, yv](const Var& gy) {
    if (grad_mode()) {
      Var y = tanh_op(a);
      return std::vector<Var>{mul(gy, affine(mul(y, y), -1.0, 1.0))};
    }
    Tensor g(yv.shape());
    for (int64_t i = 0; i < yv.numel(); ++i) g[i] = gy.val()[i] * (1.0 - yv[i] * yv[i]);
    return std::vector<Var>{Var::constant(std::move(g))};
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = 1.0 / (1.0 + std::exp(-pa[i]));
  Tensor yv = out;
  return make_op("sigmoid", std::move(out), {a}, [a, yv](const Var& gy) {
    if (grad_mode()) {
      Var y = sigmoid(a);
      return std::vector<Var>{mul(gy, mul(y, affine(y, -1.0, 1.0)))};
    }
    Tensor g(yv.shape());
    for (int64_t i = 0; i < yv.numel(); ++i) g[i] = gy.val()[i] * yv[i] * (1.0 - yv[i]);
    return std::vector<Var>{Var::constant(std::move(g))};
  });
}

inline Var exp_op(const Var& a) {
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = std::exp(pa[i]);
  Tensor yv = out;
  return make_op("exp", std::move(out), {a}, [a, yv](const Var& gy) {
    if (grad_mode()) return std::vector<Var>{mul(gy, exp_op(a))};
    Tensor g(yv.shape());
    for (int64_t i = 0; i < yv.numel(); ++i) g[i] = gy.val()[i] * yv[i];
    return std::vector<Var>{Var::constant(std::move(g))};
  });
}

inline Var log_op(const Var& a) {
  Tensor out(a.shape());
  const int64_t n = a.numel();
  const double* pa = a.val().data();
  double* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = std::log(pa[i]);
  return make_op("log", std::move(out), {a},
                 [a](const Var& gy) { return std::vector<Var>{div(gy, a)}; });
}

inline Var square(const Var& a) { return mul(a, a); }

// ---------------------------------------------------------------------------
// matmul / transpose

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<const RowMat>;
using MutMatMap = Eigen::Map<RowMat>;

// c = op(a) * op(b), 2-D row-major, optional transposes.
inline Var matmul(const Var& a, const Var& b, bool ta = false, bool tb = false) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  const int64_t m = ta ? av.cols() : av.rows();
  const int64_t k = ta ? av.rows() : av.cols();
  const int64_t kb = tb ? bv.cols() : bv.rows();
  const int64_t n = tb ? bv.rows() : bv.cols();
  assert(k == kb);
  (void)kb;
  Tensor out(Shape{m, n});
  MatMap A(av.data(), av.rows(), av.cols());
  MatMap B(bv.data(), bv.rows(), bv.cols());
  MutMatMap C(out.data(), m, n);
  if (!ta && !tb)
    C.noalias() = A * B;
  else if (ta && !tb)
    C.noalias() = A.transpose() * B;
  else if (!ta && tb)
    C.noalias() = A * B.transpose();
  else
    C.noalias() = A.transpose() * B.transpose();
  return make_op("matmul", std::move(out), {a, b}, [a, b, ta, tb](const Var& gy) {
    Var ga = ta ? matmul(b, gy, tb, true) : matmul(gy, b, false, !tb);
    Var gb = tb ? matmul(gy, a, true, ta) : matmul(a, gy, !ta, false);
    return std::vector<Var>{ga, gb};
  });
}

inline Var transpose(const Var& a) {
  const Tensor& av = a.val();
  const int64_t r = av.rows(), c = av.cols();
  Tensor out(Shape{c, r});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
  return make_op("transpose", std::move(out), {a},
                 [](const Var& gy) { return std::vector<Var>{transpose(gy)}; });
}

// ---------------------------------------------------------------------------
// reductions / broadcasts

inline Var bcast_rows(const Var& a, int64_t f);

inline Var sum_all(const Var& a) {
  Tensor out = Tensor::scalar(a.val().sum());
  Shape sh = a.shape();
  return make_op("sum_all", std::move(out), {a}, [sh](const Var& gy) {
    const double g = gy.val().item();
    return std::vector<Var>{Var::constant(Tensor::full(sh, g))};
  });
}

inline Var mean_all(const Var& a) { return smul(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

// [n, f] -> [n, 1]
inline Var sum_rows(const Var& a) {
  const Tensor& av = a.val();
  const int64_t n = av.rows(), f = av.cols();
  Tensor out(Shape{n, 1});
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    const double* row = av.data() + i * f;
    for (int64_t j = 0; j < f; ++j) s += row[j];
    out[i] = s;
  }
  return make_op("sum_rows", std::move(out), {a},
                 [f](const Var& gy) { return std::vector<Var>{bcast_rows(gy, f)}; });
}

// [n, 1] -> [n, f]
inline Var bcast_rows(const Var& a, int64_t f) {
  const Tensor& av = a.val();
  const int64_t n = av.rows();
  assert(av.cols() == 1);
  Tensor out(Shape{n, f});
  for (int64_t i = 0; i < n; ++i) {
    const double v = av[i];
    double* row = out.data() + i * f;
    for (int64_t j = 0; j < f; ++j) row[j] = v;
  }
  return make_op("bcast_rows", std::move(out), {a},
                 [](const Var& gy) { return std::vector<Var>{sum_rows(gy)}; });
}

inline Var bcast_cols(const Var& a, int64_t n);

// [n, f] -> [1, f]
inline Var sum_cols(const Var& a) {
  const Tensor& av = a.val();
  const int64_t n = av.rows(), f = av.cols();
  Tensor out(Shape{1, f});
  for (int64_t i = 0; i < n; ++i) {
    const double* row = av.data() + i * f;
    for (int64_t j = 0; j < f; ++j) out[j] += row[j];
  }
  return make_op("sum_cols", std::move(out), {a},
                 [n](const Var& gy) { return std::vector<Var>{bcast_cols(gy, n)}; });
}

// [1, f] -> [n, f]
inline Var bcast_cols(const Var& a, int64_t n) {
  const Tensor& av = a.val();
  const int64_t f = av.numel();
  Tensor out(Shape{n, f});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < f; ++j) out.at(i, j) = av[j];
  return make_op("bcast_cols", std::move(out), {a},
                 [](const Var& gy) { return std::vector<Var>{sum_cols(gy)}; });
}

// ---------------------------------------------------------------------------
// indexing

// Per output element, the flat source index in the input (-1 reads zero).
struct IndexMap {
  Shape out_shape;
  Shape in_shape;
  std::vector<int64_t> src;
};
using IndexMapPtr = std::shared_ptr<const IndexMap>;

inline Var scatter(const Var& g, const IndexMapPtr& m);

inline Var gather(const Var& x, const IndexMapPtr& m) {
  assert(static_cast<int64_t>(m->src.size()) == shape_numel(m->out_shape));
  assert(x.numel() == shape_numel(m->in_shape));
  Tensor out(m->out_shape);
  const double* px = x.val().data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    const int64_t s = m->src[static_cast<size_t>(i)];
    po[i] = s >= 0 ? px[s] : 0.0;
  }
  return make_op("gather", std::move(out), {x},
                 [m](const Var& gy) { return std::vector<Var>{scatter(gy, m)}; });
}

// adjoint of gather: out[src[i]] += g[i]
inline Var scatter(const Var& g, const IndexMapPtr& m) {
  assert(g.numel() == shape_numel(m->out_shape));
  Tensor out(m->in_shape);
  const double* pg = g.val().data();
  double* po = out.data();
  const int64_t n = g.numel();
  for (int64_t i = 0; i < n; ++i) {
    const int64_t s = m->src[static_cast<size_t>(i)];
    if (s >= 0) po[s] += pg[i];
  }
  return make_op("scatter", std::move(out), {g},
                 [m](const Var& gy) { return std::vector<Var>{gather(gy, m)}; });
}

inline Var reshape(const Var& a, Shape shape) {
  Shape orig = a.shape();
  Tensor out = a.val().reshape(std::move(shape));
  return make_op("reshape", std::move(out), {a}, [orig](const Var& gy) {
    return std::vector<Var>{reshape(gy, orig)};
  });
}

// Rows of `table` [k, d] selected by integer index, -1 yields a zero row.
inline Var gather_rows(const Var& table, const std::vector<int64_t>& idx) {
  const int64_t d = table.val().cols();
  auto m = std::make_shared<IndexMap>();
  m->out_shape = {static_cast<int64_t>(idx.size()), d};
  m->in_shape = table.shape();
  m->src.resize(idx.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < idx.size(); ++i)
    for (int64_t j = 0; j < d; ++j)
      m->src[i * static_cast<size_t>(d) + static_cast<size_t>(j)] =
          idx[i] >= 0 ? idx[i] * d + j : -1;
  return gather(table, m);
}

// One element per row of `a` [n, f], chosen by column index, -1 yields zero.
inline Var select_cols(const Var& a, const std::vector<int64_t>& idx) {
  const Tensor& av = a.val();
  const int64_t f = av.cols();
  assert(static_cast<int64_t>(idx.size()) == av.rows());
  auto m = std::make_shared<IndexMap>();
  m->out_shape = {av.rows(), 1};
  m->in_shape = a.shape();
  m->src.resize(idx.size());
  for (size_t i = 0; i < idx.size(); ++i)
    m->src[i] = idx[i] >= 0 ? static_cast<int64_t>(i) * f + idx[i] : -1;
  return gather(a, m);
}

inline Var slice_cols(const Var& a, int64_t lo, int64_t hi) {
  const Tensor& av = a.val();
  const int64_t n = av.rows(), f = av.cols(), w = hi - lo;
  auto m = std::make_shared<IndexMap>();
  m->out_shape = {n, w};
  m->in_shape = a.shape();
  m->src.resize(static_cast<size_t>(n * w));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < w; ++j) m->src[static_cast<size_t>(i * w + j)] = i * f + lo + j;
  return gather(a, m);
}

inline Var slice_rows(const Var& a, int64_t lo, int64_t hi) {
  const Tensor& av = a.val();
  const int64_t f = av.cols(), w = hi - lo;
  auto m = std::make_shared<IndexMap>();
  m->out_shape = {w, f};
  m->in_shape = a.shape();
  m->src.resize(static_cast<size_t>(w * f));
  for (int64_t i = 0; i < w * f; ++i) m->src[static_cast<size_t>(i)] = lo * f + i;
  return gather(a, m);
}

inline Var concat_cols(const Var& a, const Var& b) {
  const int64_t n = a.val().rows(), fa = a.val().cols(), fb = b.val().cols();
  assert(b.val().rows() == n);
  Tensor out(Shape{n, fa + fb});
  for (int64_t i = 0; i < n; ++i) {
    std::copy_n(a.val().data() + i * fa, fa, out.data() + i * (fa + fb));
    std::copy_n(b.val().data() + i * fb, fb, out.data() + i * (fa + fb) + fa);
  }
  return make_op("concat_cols", std::move(out), {a, b}, [fa, fb](const Var& gy) {
    return std::vector<Var>{slice_cols(gy, 0, fa), slice_cols(gy, fa, fa + fb)};
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  assert(!parts.empty());
  const int64_t f = parts[0].val().cols();
  int64_t n = 0;
  for (const Var& p : parts) n += p.val().rows();
  Tensor out(Shape{n, f});
  int64_t at = 0;
  std::vector<int64_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(at);
    std::copy_n(p.val().data(), p.numel(), out.data() + at * f);
    at += p.val().rows();
  }
  std::vector<int64_t> sizes;
  for (const Var& p : parts) sizes.push_back(p.val().rows());
  return make_op("concat_rows", std::move(out), parts, [offsets, sizes](const Var& gy) {
    std::vector<Var> gs;
    for (size_t i = 0; i < offsets.size(); ++i)
      gs.push_back(slice_rows(gy, offsets[i], offsets[i] + sizes[i]));
    return gs;
  });
}

// ---------------------------------------------------------------------------
// composites

inline Var dot(const Var& a, const Var& b) { return sum_all(mul(a, b)); }

inline Tensor row_max(const Tensor& a) {
  const int64_t n = a.rows(), f = a.cols();
  Tensor out(Shape{n, 1});
  for (int64_t i = 0; i < n; ++i) {
    double m = a.at(i, 0);
    for (int64_t j = 1; j < f; ++j) m = std::max(m, a.at(i, j));
    out[i] = m;
  }
  return out;
}

// Numerically stable; the max shift is treated as a constant, which leaves
// the gradient unchanged.
inline Var log_softmax_rows(const Var& logits) {
  const int64_t f = logits.val().cols();
  Var shifted = sub(logits, bcast_rows(Var::constant(row_max(logits.val())), f));
  Var e = exp_op(shifted);
  Var lz = log_op(sum_rows(e));
  return sub(shifted, bcast_rows(lz, f));
}

inline Var softmax_rows(const Var& logits) { return exp_op(log_softmax_rows(logits)); }

// per-row entropy [n, 1]
inline Var entropy_rows(const Var& logits) {
  Var lp = log_softmax_rows(logits);
  Var p = exp_op(lp);
  return neg(sum_rows(mul(p, lp)));
}

// ---------------------------------------------------------------------------
// grad

// Gradients of `root` (summed with seed ones) w.r.t. `leaves`. With
// create_graph the returned Vars are differentiable; otherwise they are
// constants. Leaves the root does not reach get zero gradients.
inline std::vector<Var> grad(const Var& root, const std::vector<Var>& leaves,
                             bool create_graph = false, const Tensor& seed = Tensor()) {
  assert(root.defined());
  // topological order over the requires_grad subgraph
  std::vector<Node*> topo;
  std::unordered_map<Node*, int> state;  // 0 new, 1 open, 2 done
  std::vector<Node*> stack{root.n.get()};
  if (!root.n->requires_grad) {
    // constant root: all leaf grads are zero
    std::vector<Var> out;
    for (const Var& l : leaves) out.push_back(Var::constant(Tensor::zeros(l.shape())));
    return out;
  }
  while (!stack.empty()) {
    Node* cur = stack.back();
    int& st = state[cur];
    if (st == 0) {
      st = 1;
      for (const NodePtr& p : cur->parents)
        if (p && p->requires_grad && state[p.get()] == 0) stack.push_back(p.get());
    } else {
      stack.pop_back();
      if (st == 1) {
        st = 2;
        topo.push_back(cur);
      }
    }
  }

  std::unordered_map<Node*, Var> acc;
  acc[root.n.get()] =
      seed.defined() ? Var::constant(seed) : Var::constant(Tensor::full(root.shape(), 1.0));

  auto run = [&]() {
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node* node = *it;
      auto found = acc.find(node);
      if (found == acc.end() || node->parents.empty() || !node->backward) continue;
      std::vector<Var> pg = node->backward(found->second);
      assert(pg.size() == node->parents.size());
      for (size_t i = 0; i < pg.size(); ++i) {
        Node* parent = node->parents[i].get();
        if (!parent || !parent->requires_grad || !pg[i].defined()) continue;
        auto cur = acc.find(parent);
        if (cur == acc.end())
          acc.emplace(parent, pg[i]);
        else
          cur->second = add(cur->second, pg[i]);
      }
    }
  };

  if (create_graph) {
    GradGuard g;
    run();
  } else {
    NoGradGuard g;
    run();
  }

  std::vector<Var> out;
  out.reserve(leaves.size());
  for (const Var& l : leaves) {
    auto it = acc.find(l.n.get());
    if (it == acc.end())
      out.push_back(Var::constant(Tensor::zeros(l.shape())));
    else
      out.push_back(it->second);
  }
  return out;
}

}  // namespace leco::ad
