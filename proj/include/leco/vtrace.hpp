#pragma once

// V-trace off-policy actor-critic targets. One recursion implementation on
// graph variables serves both the plain numeric entry point and the learner,
// whose reward inputs carry gradients for the meta-update.

#include <cmath>
#include <vector>

#include "leco/autodiff.hpp"
#include "leco/errors.hpp"
#include "leco/tensor.hpp"

namespace leco {

struct VtraceVars {
  std::vector<ad::Var> vs;      // per-step value targets, each [1, b]
  std::vector<ad::Var> pg_adv;  // per-step policy-gradient advantages, each [1, b]
};

// rewards [t, b] (may carry a graph); dones/values/rho/c are data. values
// [t+1, b] includes the bootstrap row; rho and c are already clipped.
inline VtraceVars vtrace_recursion(const ad::Var& rewards, const Tensor& dones,
                                   const Tensor& values, const Tensor& rho, const Tensor& c,
                                   double gamma) {
  const int64_t t_steps = rewards.shape()[0];
  const int64_t b = rewards.shape()[1];
  if (dones.rows() != t_steps || values.rows() != t_steps + 1 || rho.rows() != t_steps ||
      c.rows() != t_steps || dones.cols() != b || values.cols() != b)
    throw UsageError("vtrace: per-step arrays are not aligned over the unroll");

  auto row = [b](const Tensor& t, int64_t i) {
    return Tensor::from(std::vector<double>(t.data() + i * b, t.data() + (i + 1) * b), {1, b});
  };

  VtraceVars out;
  out.vs.resize(static_cast<size_t>(t_steps));
  out.pg_adv.resize(static_cast<size_t>(t_steps));
  ad::Var carry = ad::Var::constant(Tensor::zeros({1, b}));  // vs_{t+1} - V_{t+1}
  for (int64_t t = t_steps - 1; t >= 0; --t) {
    Tensor nd(Shape{1, b});
    for (int64_t i = 0; i < b; ++i) nd[i] = 1.0 - dones.at(t, i);
    ad::Var nd_v = ad::Var::constant(nd);
    ad::Var rho_v = ad::Var::constant(row(rho, t));
    ad::Var c_v = ad::Var::constant(row(c, t));
    ad::Var v_t = ad::Var::constant(row(values, t));
    ad::Var v_n = ad::Var::constant(row(values, t + 1));
    ad::Var r_t = ad::slice_rows(rewards, t, t + 1);

    ad::Var boot = ad::mul(nd_v, ad::smul(v_n, gamma));
    ad::Var delta = ad::mul(rho_v, ad::sub(ad::add(r_t, boot), v_t));
    ad::Var vs_minus_v = ad::add(delta, ad::mul(ad::smul(ad::mul(nd_v, c_v), gamma), carry));
    out.vs[static_cast<size_t>(t)] = ad::add(v_t, vs_minus_v);

    ad::Var vs_next = t == t_steps - 1 ? v_n : out.vs[static_cast<size_t>(t + 1)];
    ad::Var adv =
        ad::mul(rho_v, ad::sub(ad::add(r_t, ad::mul(nd_v, ad::smul(vs_next, gamma))), v_t));
    out.pg_adv[static_cast<size_t>(t)] = adv;
    carry = vs_minus_v;
  }
  return out;
}

inline Tensor clip_ratios(const Tensor& behavior_logp, const Tensor& target_logp, double bound) {
  if (behavior_logp.numel() != target_logp.numel())
    throw UsageError("vtrace: behavior/target log-prob arrays differ in length");
  Tensor out(behavior_logp.shape());
  for (int64_t i = 0; i < out.numel(); ++i) {
    const double ratio = std::exp(target_logp[i] - behavior_logp[i]);
    out[i] = std::isinf(bound) ? ratio : std::min(bound, ratio);
  }
  return out;
}

struct VtraceOut {
  Tensor vs;      // [t, b]
  Tensor pg_adv;  // [t, b]
};

// Plain numeric entry point.
inline VtraceOut vtrace_targets(const Tensor& rewards, const Tensor& dones, const Tensor& values,
                                const Tensor& behavior_logp, const Tensor& target_logp,
                                double rho_bar, double c_bar, double gamma) {
  ad::NoGradGuard ng;
  const Tensor rho = clip_ratios(behavior_logp, target_logp, rho_bar);
  const Tensor c = clip_ratios(behavior_logp, target_logp, c_bar);
  auto vars = vtrace_recursion(ad::Var::constant(rewards), dones, values, rho, c, gamma);
  const int64_t t_steps = rewards.rows(), b = rewards.cols();
  VtraceOut out{Tensor(Shape{t_steps, b}), Tensor(Shape{t_steps, b})};
  for (int64_t t = 0; t < t_steps; ++t)
    for (int64_t i = 0; i < b; ++i) {
      out.vs.at(t, i) = vars.vs[static_cast<size_t>(t)].val()[i];
      out.pg_adv.at(t, i) = vars.pg_adv[static_cast<size_t>(t)].val()[i];
    }
  return out;
}

}  // namespace leco
