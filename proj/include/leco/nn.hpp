#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "leco/autodiff.hpp"
#include "leco/rng.hpp"
#include "leco/tensor.hpp"

namespace leco {

struct Param {
  std::string name;
  ad::Var v;
};
using ParamList = std::vector<Param>;

inline std::vector<ad::Var> param_vars(const ParamList& ps) {
  std::vector<ad::Var> out;
  out.reserve(ps.size());
  for (const Param& p : ps) out.push_back(p.v);
  return out;
}

inline Tensor uniform_init(Shape shape, int64_t fan_in, Rng& rng) {
  const double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::rand_uniform(std::move(shape), -k, k, rng);
}

// Minimal interface for composable feedforward stacks; lets small test
// networks stand in for the production conv stacks.
struct Net {
  virtual ~Net() = default;
  virtual ad::Var forward(const ad::Var& x) const = 0;
  virtual void collect(ParamList& out, const std::string& prefix) const = 0;
};
using NetPtr = std::shared_ptr<Net>;

class Linear {
 public:
  Linear() = default;
  Linear(int64_t in, int64_t out, Rng& rng)
      : w_(ad::Var::leaf(uniform_init({in, out}, in, rng))),
        b_(ad::Var::leaf(uniform_init({1, out}, in, rng))) {}

  ad::Var forward(const ad::Var& x) const {
    return ad::add(ad::matmul(x, w_), ad::bcast_cols(b_, x.val().rows()));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + "/w", w_});
    out.push_back({prefix + "/b", b_});
  }

  std::vector<ad::Var*> var_slots() { return {&w_, &b_}; }

  const ad::Var& w() const { return w_; }
  const ad::Var& b() const { return b_; }

 private:
  ad::Var w_, b_;
};

// NHWC convolution; weight is stored as [kh*kw*cin, cout] so the forward is
// a single gather + matmul.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t pad, Rng& rng)
      : cin_(cin), cout_(cout), k_(k), stride_(stride), pad_(pad),
        w_(ad::Var::leaf(uniform_init({k * k * cin, cout}, k * k * cin, rng))),
        b_(ad::Var::leaf(uniform_init({1, cout}, k * k * cin, rng))) {}

  int64_t out_dim(int64_t in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  ad::Var forward(const ad::Var& x) const {
    const Shape& s = x.shape();
    const int64_t n = s[0], h = s[1], w = s[2];
    const int64_t ho = out_dim(h), wo = out_dim(w);
    ad::Var cols = ad::gather(x, im2col_map(n, h, w));
    ad::Var y = ad::add(ad::matmul(cols, w_), ad::bcast_cols(b_, n * ho * wo));
    return ad::reshape(y, {n, ho, wo, cout_});
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + "/w", w_});
    out.push_back({prefix + "/b", b_});
  }

  std::vector<ad::Var*> var_slots() { return {&w_, &b_}; }

 private:
  ad::IndexMapPtr im2col_map(int64_t n, int64_t h, int64_t w) const {
    const int64_t key = (n * 100000 + h) * 1000 + w;
    auto it = maps_.find(key);
    if (it != maps_.end()) return it->second;
    const int64_t ho = out_dim(h), wo = out_dim(w);
    auto m = std::make_shared<ad::IndexMap>();
    m->out_shape = {n * ho * wo, k_ * k_ * cin_};
    m->in_shape = {n, h, w, cin_};
    m->src.resize(static_cast<size_t>(n * ho * wo * k_ * k_ * cin_));
    size_t at = 0;
    for (int64_t b = 0; b < n; ++b)
      for (int64_t i = 0; i < ho; ++i)
        for (int64_t j = 0; j < wo; ++j)
          for (int64_t ki = 0; ki < k_; ++ki) {
            const int64_t hi = i * stride_ - pad_ + ki;
            for (int64_t kj = 0; kj < k_; ++kj) {
              const int64_t wi = j * stride_ - pad_ + kj;
              const bool ok = hi >= 0 && hi < h && wi >= 0 && wi < w;
              for (int64_t c = 0; c < cin_; ++c)
                m->src[at++] = ok ? ((b * h + hi) * w + wi) * cin_ + c : -1;
            }
          }
    maps_[key] = m;
    return m;
  }

  int64_t cin_ = 0, cout_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  ad::Var w_, b_;
  mutable std::unordered_map<int64_t, ad::IndexMapPtr> maps_;
};

// Nearest-neighbour resize on NHWC tensors.
class UpsampleNearest {
 public:
  UpsampleNearest() = default;
  UpsampleNearest(int64_t ho, int64_t wo) : ho_(ho), wo_(wo) {}

  ad::Var forward(const ad::Var& x) const {
    return ad::gather(x, map_for(x.shape()));
  }

  // value-only path for preprocessing
  Tensor apply(const Tensor& x) const {
    auto m = map_for(x.shape());
    Tensor out(m->out_shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x[m->src[static_cast<size_t>(i)]];
    return out;
  }

 private:
  ad::IndexMapPtr map_for(const Shape& s) const {
    const int64_t n = s[0], h = s[1], w = s[2], c = s[3];
    const int64_t key = (n * 100000 + h) * 1000 + w;
    auto it = maps_.find(key);
    if (it != maps_.end()) return it->second;
    auto m = std::make_shared<ad::IndexMap>();
    m->out_shape = {n, ho_, wo_, c};
    m->in_shape = s;
    m->src.resize(static_cast<size_t>(n * ho_ * wo_ * c));
    size_t at = 0;
    for (int64_t b = 0; b < n; ++b)
      for (int64_t i = 0; i < ho_; ++i) {
        const int64_t hi = i * h / ho_;
        for (int64_t j = 0; j < wo_; ++j) {
          const int64_t wi = j * w / wo_;
          for (int64_t ch = 0; ch < c; ++ch)
            m->src[at++] = ((b * h + hi) * w + wi) * c + ch;
        }
      }
    maps_[key] = m;
    return m;
  }

  int64_t ho_ = 0, wo_ = 0;
  mutable std::unordered_map<int64_t, ad::IndexMapPtr> maps_;
};

struct LstmState {
  ad::Var h, c;
};

class LstmCell {
 public:
  LstmCell() = default;
  LstmCell(int64_t in, int64_t hidden, Rng& rng)
      : in_(in), hidden_(hidden),
        wih_(ad::Var::leaf(uniform_init({in, 4 * hidden}, hidden, rng))),
        whh_(ad::Var::leaf(uniform_init({hidden, 4 * hidden}, hidden, rng))),
        b_(ad::Var::leaf(uniform_init({1, 4 * hidden}, hidden, rng))) {
    // bias the forget gate open
    Tensor bv = b_.val().clone();
    for (int64_t i = hidden; i < 2 * hidden; ++i) bv[i] += 1.0;
    b_.n->value = bv;
  }

  int64_t hidden() const { return hidden_; }

  LstmState zero_state(int64_t batch) const {
    return {ad::Var::constant(Tensor::zeros({batch, hidden_})),
            ad::Var::constant(Tensor::zeros({batch, hidden_}))};
  }

  LstmState step(const ad::Var& x, const LstmState& s) const {
    const int64_t n = x.val().rows();
    ad::Var gates = ad::add(ad::add(ad::matmul(x, wih_), ad::matmul(s.h, whh_)),
                            ad::bcast_cols(b_, n));
    ad::Var i = ad::sigmoid(ad::slice_cols(gates, 0, hidden_));
    ad::Var f = ad::sigmoid(ad::slice_cols(gates, hidden_, 2 * hidden_));
    ad::Var g = ad::tanh_op(ad::slice_cols(gates, 2 * hidden_, 3 * hidden_));
    ad::Var o = ad::sigmoid(ad::slice_cols(gates, 3 * hidden_, 4 * hidden_));
    ad::Var c = ad::add(ad::mul(f, s.c), ad::mul(i, g));
    ad::Var h = ad::mul(o, ad::tanh_op(c));
    return {h, c};
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + "/wih", wih_});
    out.push_back({prefix + "/whh", whh_});
    out.push_back({prefix + "/b", b_});
  }

  std::vector<ad::Var*> var_slots() { return {&wih_, &whh_, &b_}; }

 private:
  int64_t in_ = 0, hidden_ = 0;
  ad::Var wih_, whh_, b_;
};

// MLP with ReLU hidden layers, linear output.
class Mlp : public Net {
 public:
  Mlp() = default;
  Mlp(const std::vector<int64_t>& dims, Rng& rng) {
    for (size_t i = 0; i + 1 < dims.size(); ++i)
      layers_.emplace_back(dims[i], dims[i + 1], rng);
  }

  ad::Var forward(const ad::Var& x) const override {
    ad::Var h = x;
    for (size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(h);
      if (i + 1 < layers_.size()) h = ad::relu(h);
    }
    return h;
  }

  void collect(ParamList& out, const std::string& prefix) const override {
    for (size_t i = 0; i < layers_.size(); ++i)
      layers_[i].collect(out, prefix + "/fc" + std::to_string(i));
  }

 private:
  std::vector<Linear> layers_;
};

// ---------------------------------------------------------------------------

class Adam {
 public:
  Adam() = default;
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-6)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  // Computes updated values and advances the moment estimates without
  // touching the parameter leaves; callers assign when the graphs that
  // captured the old values are no longer differentiated.
  std::vector<Tensor> plan(const ParamList& params, const std::vector<Tensor>& grads) {
    assert(params.size() == grads.size());
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      const std::string& name = params[i].name;
      Tensor& m = m_[name];
      Tensor& v = v_[name];
      const Tensor& g = grads[i];
      const Tensor& x = params[i].v.val();
      if (!m.defined()) m = Tensor::zeros(x.shape());
      if (!v.defined()) v = Tensor::zeros(x.shape());
      Tensor nx(x.shape());
      for (int64_t j = 0; j < x.numel(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        nx[j] = x[j] - lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
      out.push_back(std::move(nx));
    }
    return out;
  }

  // Gradient-descent step; leaves receive fresh value tensors.
  void step(ParamList& params, const std::vector<Tensor>& grads) {
    std::vector<Tensor> next = plan(params, grads);
    for (size_t i = 0; i < params.size(); ++i) params[i].v.n->value = next[i];
  }

  int64_t steps() const { return t_; }
  const std::map<std::string, Tensor>& m_state() const { return m_; }
  const std::map<std::string, Tensor>& v_state() const { return v_; }
  void restore(int64_t t, std::map<std::string, Tensor> m, std::map<std::string, Tensor> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-6;
  int64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

inline std::vector<Tensor> grad_values(const std::vector<ad::Var>& gs) {
  std::vector<Tensor> out;
  out.reserve(gs.size());
  for (const ad::Var& g : gs) out.push_back(g.val());
  return out;
}

}  // namespace leco
