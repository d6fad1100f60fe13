#pragma once

// Intrinsic reward composition: episodic novelty from hash counts plus a
// learned task-specific modulation, combined additively with weight lambda
// and scaled into the total reward by alpha.

#include <optional>
#include <vector>

#include "leco/errors.hpp"
#include "leco/nn.hpp"

namespace leco {

struct RewardBreakdown {
  double r_ep = 0.0;   // episodic novelty, in (0, 1]
  double r_ta = 0.0;   // task-specific modulation, in (-1, 1)
  double r_i = 0.0;    // combined intrinsic reward
  double lambda = 0.5;
  double alpha = 0.01;
};

// r_i = (1 - lambda) * r_ep + lambda * r_ta
inline double combine(double r_ep, double r_ta, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ConfigError("lambda must lie in [0, 1]");
  return (1.0 - lambda) * r_ep + lambda * r_ta;
}

// r = r_e + alpha * r_i
inline double total_reward(double r_e, double r_i, double alpha) { return r_e + alpha * r_i; }

// Two-layer modulation network: flatten(z) -> 512 rectified units, then the
// hidden vector concatenated with the one-hot of the current action maps to
// one output per action. The previous action's one-hot selects the output
// and tanh bounds it; a null previous action (episode start) has an all-zero
// one-hot, so the modulation is exactly zero there. The naive variant feeds
// the episodic reward as an extra input instead of adding it outside.
class Modulator {
 public:
  Modulator() = default;
  Modulator(int in_dim, int actions, Rng& rng, bool naive = false, int hidden = 512)
      : in_dim_(in_dim), actions_(actions), naive_(naive),
        fc1_(in_dim + (naive ? 1 : 0), hidden, rng),
        fc2_(hidden + actions, actions, rng) {}

  bool naive() const { return naive_; }
  int in_dim() const { return in_dim_; }
  int actions() const { return actions_; }

  // z_flat [n, in_dim]; action index per row; prev index per row with -1 for
  // null; r_ep [n, 1] required by the naive variant. Returns [n, 1] in (-1,1).
  ad::Var forward(const ad::Var& z_flat, const std::vector<int64_t>& a_t,
                  const std::vector<int64_t>& a_prev,
                  const ad::Var& r_ep = ad::Var()) const {
    const int64_t n = z_flat.shape()[0];
    if (z_flat.val().cols() != in_dim_)
      throw ConfigError("modulator input width " + std::to_string(z_flat.val().cols()) +
                        ", expected " + std::to_string(in_dim_));
    ad::Var in = z_flat;
    if (naive_) {
      if (!r_ep.defined() || r_ep.numel() != n)
        throw ConfigError("naive modulator needs an r_ep column");
      in = ad::concat_cols(in, ad::reshape(r_ep, {n, 1}));
    }
    ad::Var h = ad::relu(fc1_.forward(in));
    Tensor onehot(Shape{n, actions_});
    for (int64_t i = 0; i < n; ++i)
      onehot.at(i, a_t[static_cast<size_t>(i)]) = 1.0;
    ad::Var out = fc2_.forward(ad::concat_cols(h, ad::Var::constant(onehot)));
    return ad::tanh_op(ad::select_cols(out, a_prev));
  }

  // single-step value path
  double modulate(const Tensor& z_flat, int64_t a_t, std::optional<int64_t> a_prev,
                  double r_ep = 0.0) const {
    ad::NoGradGuard ng;
    ad::Var z = ad::Var::constant(z_flat.reshape({1, in_dim_}));
    ad::Var rep = naive_ ? ad::Var::constant(Tensor::full({1, 1}, r_ep)) : ad::Var();
    return forward(z, {a_t}, {a_prev ? *a_prev : -1}, rep).val().item();
  }

  void collect(ParamList& out, const std::string& prefix) const {
    fc1_.collect(out, prefix + "/fc1");
    fc2_.collect(out, prefix + "/fc2");
  }

  // test hook: zeroing the output layer pins the modulation to tanh(0) = 0
  void zero_output_layer() {
    fc2_.w().n->value = Tensor::zeros(fc2_.w().shape());
    fc2_.b().n->value = Tensor::zeros(fc2_.b().shape());
  }

 private:
  int in_dim_ = 0, actions_ = 0;
  bool naive_ = false;
  Linear fc1_, fc2_;
};

}  // namespace leco
