#pragma once

// Two-level optimizer. The inner step improves the policy on combined
// extrinsic+intrinsic V-trace returns while staying differentiable with
// respect to the reward inputs; the outer step pushes an extrinsic-only
// policy-gradient objective through the inner update into the intrinsic
// module (modulator, shared encoder, codebook, extrinsic value head) and
// adds the vector-quantization objective.

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "leco/intrinsic.hpp"
#include "leco/policy.hpp"
#include "leco/rollout.hpp"
#include "leco/vq.hpp"
#include "leco/vtrace.hpp"

namespace leco {

struct Hyper {
  double eta = 3e-4;        // inner learning rate
  double eta_ta = 3e-4;     // outer learning rate
  double gamma = 0.99;
  double alpha = 0.01;      // intrinsic scale
  double lambda = 0.5;      // episodic/modulation weight
  double entropy_coef = 5e-4;
  double value_coef = 0.5;
  double rho_bar = 1.0;
  double c_bar = 1.0;
  int64_t unroll = 96;
  int64_t batch = 16;
  bool second_order = true;         // differentiate through the inner step
  bool commit_adam = true;          // committed policy update uses Adam
  bool outer_grad_to_encoder = true;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-6;

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0,1]");
    if (alpha <= 0.0) throw ConfigError("alpha must be positive");
    if (!(gamma >= 0.0 && gamma < 1.0 + 1e-12)) throw ConfigError("gamma must lie in [0,1]");
    if (unroll <= 0 || batch <= 0) throw ConfigError("unroll and batch must be positive");
  }
};

struct AeLshConfig {
  int bits = 25;
  int latent = 256;
};

struct DscConfig {
  int w = 3, h = 3, K = 11;
};

// Learnable intrinsic-reward parts bundled per method.
class IntrinsicModule {
 public:
  IntrinsicModule() = default;

  IntrinsicModule(Method method, const VqConfig& vq_cfg, const AeLshConfig& ae_cfg,
                  const DscConfig& dsc_cfg, int actions, Rng& rng)
      : method_(method), dsc_(dsc_cfg) {
    if (method_uses_vq(method)) vq_.emplace(vq_cfg, rng);
    if (method_uses_aelsh(method)) aelsh_.emplace(ae_cfg.bits, ae_cfg.latent, rng);
    if (method_has_modulator(method)) {
      mod_.emplace(latent_dim(), actions, rng, method == Method::LecoNaive);
      ve_ = std::make_shared<Mlp>(std::vector<int64_t>{latent_dim(), 512, 1}, rng);
    }
  }

  Method method() const { return method_; }
  bool has_vq() const { return vq_.has_value(); }
  bool has_modulator() const { return mod_.has_value(); }
  bool trainable() const { return has_vq() || aelsh_.has_value() || has_modulator(); }
  VqModel& vq() { return *vq_; }
  const VqModel& vq() const { return *vq_; }
  Modulator& modulator() { return *mod_; }
  const Modulator& modulator() const { return *mod_; }
  const AeLshHasher& aelsh() const { return *aelsh_; }
  const Mlp& ve_head() const { return *ve_; }

  int latent_dim() const {
    if (vq_) return vq_->positions() * vq_->config().D;
    if (aelsh_) return aelsh_->latent();
    return 0;
  }

  StepHasher hasher() const {
    StepHasher h;
    h.method = method_;
    h.vq = vq_ ? &*vq_ : nullptr;
    h.aelsh = aelsh_ ? &*aelsh_ : nullptr;
    h.dsc_w = dsc_.w;
    h.dsc_h = dsc_.h;
    h.dsc_k = dsc_.K;
    return h;
  }

  ParamList params() const {
    ParamList ps;
    if (vq_) vq_->collect(ps, "intr/vq");
    if (aelsh_) aelsh_->collect(ps, "intr/aelsh");
    if (mod_) mod_->collect(ps, "intr/mod");
    if (ve_) ve_->collect(ps, "intr/ve");
    return ps;
  }

 private:
  Method method_ = Method::NoInt;
  DscConfig dsc_;
  std::optional<VqModel> vq_;
  std::optional<AeLshHasher> aelsh_;
  std::optional<Modulator> mod_;
  std::shared_ptr<Mlp> ve_;
};

struct UpdateReport {
  int64_t epoch = 0;
  int64_t env_step = 0;
  double inner_loss = 0.0;
  double outer_loss = 0.0;
  double vq_loss = 0.0;
  double eta = 0.0, eta_ta = 0.0;
  double mean_r_ep = 0.0, mean_r_ta = 0.0, mean_r_i = 0.0;
  double mean_entropy = 0.0;
  std::map<std::string, double> grad_norms;

  bool all_finite() const {
    for (double v : {inner_loss, outer_loss, vq_loss, mean_r_ep, mean_r_ta, mean_r_i,
                     mean_entropy})
      if (!std::isfinite(v)) return false;
    for (const auto& [k, v] : grad_norms)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Differentiable gradient-ascent step: theta'_i = theta_i + step * dJ/dtheta_i,
// with the gradient graph kept alive so later objectives can differentiate
// through the update.
inline std::vector<ad::Var> ascent_through(const ad::Var& objective,
                                           const std::vector<ad::Var>& params, double step) {
  std::vector<ad::Var> gs = ad::grad(objective, params, /*create_graph=*/true);
  std::vector<ad::Var> out;
  out.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i)
    out.push_back(ad::add(params[i], ad::smul(gs[i], step)));
  return out;
}

class Learner {
 public:
  Learner() = default;

  Learner(Method method, const PolicyConfig& pc, const VqConfig& vq_cfg,
          const AeLshConfig& ae_cfg, const DscConfig& dsc_cfg, const Hyper& hp, uint64_t seed)
      : hp_(hp), method_(method) {
    hp_.validate();
    Rng rng(derive_seed(seed, 0x696e697400000000ull));
    policy_ = PolicyNet(pc, rng);
    intr_ = IntrinsicModule(method, vq_cfg, ae_cfg, dsc_cfg, pc.actions, rng);
    opt_policy_ = Adam(hp.eta, hp.adam_beta1, hp.adam_beta2, hp.adam_eps);
    opt_intr_ = Adam(hp.eta_ta, hp.adam_beta1, hp.adam_beta2, hp.adam_eps);
  }

  PolicyNet& policy() { return policy_; }
  const PolicyNet& policy() const { return policy_; }
  IntrinsicModule& intrinsic() { return intr_; }
  Adam& policy_opt() { return opt_policy_; }
  Adam& intrinsic_opt() { return opt_intr_; }
  const Hyper& hyper() const { return hp_; }
  Method method() const { return method_; }
  int64_t epoch() const { return epoch_; }
  void set_epoch(int64_t e) { epoch_ = e; }

  struct RewardGraph {
    ad::Var r_total;  // [T, B]
    ad::Var r_i;      // [T, B]
    ad::Var r_ta;     // [T, B] when a modulator exists
    ad::Var ze_flat_all;  // [(T+1)B, latent_dim] when an encoder exists
    ad::Var x_vq_steps;   // preprocessed vq input for the T step rows
    ad::Var x7_steps;     // normalized raw views for the T step rows
  };

  // Builds the per-step total reward as a graph over the intrinsic module.
  RewardGraph build_rewards(const TrajectoryBatch& b) {
    RewardGraph rg;
    const int64_t T = b.T, B = b.B, n_steps = T * B;
    if (method_ == Method::NoInt) {
      rg.r_total = ad::Var::constant(b.r_e);
      rg.r_i = ad::Var::constant(Tensor::zeros({T, B}));
      return rg;
    }

    // shared latents for modulator and extrinsic value head
    if (intr_.has_vq()) {
      Tensor x_all = intr_.vq().preprocess({b.obs.data(), b.obs.size()});
      rg.x_vq_steps = ad::Var::constant(
          intr_.vq().preprocess({b.obs.data(), static_cast<size_t>(n_steps)}));
      ad::Var ze = intr_.vq().encode_batch(ad::Var::constant(x_all));
      rg.ze_flat_all = ad::reshape(ze, {(T + 1) * B, intr_.latent_dim()});
    } else if (method_uses_aelsh(method_)) {
      Tensor x7_all = obs_batch_tensor({b.obs.data(), b.obs.size()});
      rg.x7_steps =
          ad::Var::constant(obs_batch_tensor({b.obs.data(), static_cast<size_t>(n_steps)}));
      rg.ze_flat_all = intr_.aelsh().latent_of(ad::Var::constant(x7_all));
    }

    ad::Var r_i;
    if (intr_.has_modulator()) {
      ad::Var z_steps = ad::slice_rows(rg.ze_flat_all, 0, n_steps);
      if (!hp_.outer_grad_to_encoder) z_steps = z_steps.detach();
      ad::Var rep_col =
          ad::Var::constant(b.r_ep.reshape({n_steps, 1}));
      ad::Var r_ta_col = method_ == Method::LecoNaive
                             ? intr_.modulator().forward(z_steps, b.actions, b.prev_actions,
                                                         rep_col)
                             : intr_.modulator().forward(z_steps, b.actions, b.prev_actions);
      rg.r_ta = ad::reshape(r_ta_col, {T, B});
      if (method_ == Method::LecoNaive) {
        r_i = rg.r_ta;  // the modulator consumes r_ep directly
      } else {
        r_i = ad::add(ad::smul(ad::Var::constant(b.r_ep), 1.0 - hp_.lambda),
                      ad::smul(rg.r_ta, hp_.lambda));
      }
    } else {
      r_i = ad::Var::constant(b.r_ep);  // count-only methods
    }
    rg.r_i = r_i;
    rg.r_total = ad::add(ad::Var::constant(b.r_e), ad::smul(r_i, hp_.alpha));
    return rg;
  }

  struct InnerResult {
    std::vector<ad::Var> theta_prime;  // differentiable ascent step (empty without meta path)
    std::vector<Tensor> committed;     // values to install at commit time
    double loss = 0.0;
    double entropy_mean = 0.0;
    double grad_norm = 0.0;
  };

  bool needs_meta() const { return intr_.has_modulator() && hp_.second_order; }

  // Policy-gradient step on combined rewards. V-trace targets and advantages
  // stay connected to the reward graph; the returned theta' is the plain
  // ascent step used by the outer objective, while the committed values use
  // the adaptive optimizer on the same gradient (toggleable).
  InnerResult inner_update(const TrajectoryBatch& b, const ad::Var& r_total) {
    const int64_t T = b.T, B = b.B;
    const double inv = 1.0 / static_cast<double>(T * B);
    auto un = policy_.unroll(obs_batch_tensor({b.obs.data(), b.obs.size()}), T, B, b.dones,
                             b.init_state);
    ad::Var logp_all = ad::log_softmax_rows(un.logits);
    ad::Var logp_taken = ad::reshape(ad::select_cols(logp_all, b.actions), {T, B});
    Tensor target_logp = logp_taken.val();
    const Tensor rho = clip_ratios(b.behavior_logp, target_logp, hp_.rho_bar);
    const Tensor cs = clip_ratios(b.behavior_logp, target_logp, hp_.c_bar);
    const Tensor values = un.values.val().reshape({T + 1, B});

    auto vt = vtrace_recursion(r_total, b.dones, values, rho, cs, hp_.gamma);

    ad::Var values_var = ad::reshape(un.values, {T + 1, B});
    ad::Var pg = ad::Var::constant(Tensor::scalar(0.0));
    ad::Var vloss = ad::Var::constant(Tensor::scalar(0.0));
    for (int64_t t = 0; t < T; ++t) {
      ad::Var lp_t = ad::slice_rows(logp_taken, t, t + 1);
      pg = ad::sub(pg, ad::sum_all(ad::mul(lp_t, vt.pg_adv[static_cast<size_t>(t)])));
      ad::Var verr =
          ad::sub(vt.vs[static_cast<size_t>(t)], ad::slice_rows(values_var, t, t + 1));
      vloss = ad::add(vloss, ad::sum_all(ad::square(verr)));
    }
    ad::Var entropy = ad::sum_all(ad::entropy_rows(un.logits));
    ad::Var inner_loss =
        ad::add(ad::add(ad::smul(pg, inv), ad::smul(vloss, 0.5 * hp_.value_coef * inv)),
                ad::smul(entropy, -hp_.entropy_coef * inv));

    InnerResult res;
    res.loss = inner_loss.item();
    res.entropy_mean = entropy.item() * inv;
    if (!std::isfinite(res.loss)) throw NumericError("non-finite inner loss");

    ParamList ps = policy_.params();
    std::vector<ad::Var> vars = param_vars(ps);
    std::vector<ad::Var> gs = ad::grad(inner_loss, vars, /*create_graph=*/needs_meta());
    double norm2 = 0.0;
    for (const ad::Var& g : gs) {
      if (!g.val().all_finite())
        throw NumericError("non-finite policy gradient; aborting the step");
      const double n = g.val().l2_norm();
      norm2 += n * n;
    }
    res.grad_norm = std::sqrt(norm2);

    if (needs_meta()) {
      res.theta_prime.reserve(vars.size());
      for (size_t i = 0; i < vars.size(); ++i)
        res.theta_prime.push_back(ad::sub(vars[i], ad::smul(gs[i], hp_.eta)));
    }
    if (hp_.commit_adam) {
      res.committed = opt_policy_.plan(ps, grad_values(gs));
    } else {
      res.committed.reserve(vars.size());
      for (size_t i = 0; i < vars.size(); ++i) {
        Tensor nx(vars[i].shape());
        for (int64_t j = 0; j < nx.numel(); ++j)
          nx[j] = vars[i].val()[j] - hp_.eta * gs[i].val()[j];
        res.committed.push_back(std::move(nx));
      }
    }
    return res;
  }

  struct OuterResult {
    double loss = 0.0;
    double vq_loss = 0.0;
    double grad_norm = 0.0;
  };

  // Extrinsic-only policy gradient evaluated under theta', differentiated
  // back through the inner step into the intrinsic parameters, plus the
  // vector-quantization objective and the extrinsic value-head regression.
  OuterResult outer_update(const TrajectoryBatch& b, const InnerResult& inner,
                           const RewardGraph& rg) {
    OuterResult out;
    if (!intr_.trainable()) return out;
    const int64_t T = b.T, B = b.B;
    const double inv = 1.0 / static_cast<double>(T * B);

    ad::Var total = ad::Var::constant(Tensor::scalar(0.0));
    if (intr_.has_modulator() && hp_.second_order) {
      if (inner.theta_prime.empty())
        throw UsageError("outer update without a differentiable inner step");
      PolicyNet updated = policy_.with_params(inner.theta_prime);
      auto un2 = updated.unroll(obs_batch_tensor({b.obs.data(), b.obs.size()}), T, B, b.dones,
                                b.init_state);
      ad::Var logp2 = ad::reshape(
          ad::select_cols(ad::log_softmax_rows(un2.logits), b.actions), {T, B});

      // extrinsic value estimates from the intrinsic module
      ad::Var ve = intr_.ve_head().forward(rg.ze_flat_all);
      const Tensor ve_vals = ve.val().reshape({T + 1, B});
      const Tensor rho2 = clip_ratios(b.behavior_logp, logp2.val(), hp_.rho_bar);
      const Tensor c2 = clip_ratios(b.behavior_logp, logp2.val(), hp_.c_bar);
      auto vte = vtrace_recursion(ad::Var::constant(b.r_e), b.dones, ve_vals, rho2, c2,
                                  hp_.gamma);

      ad::Var pg = ad::Var::constant(Tensor::scalar(0.0));
      ad::Var ve_var = ad::reshape(ve, {T + 1, B});
      ad::Var ve_loss = ad::Var::constant(Tensor::scalar(0.0));
      for (int64_t t = 0; t < T; ++t) {
        ad::Var adv = ad::Var::constant(vte.pg_adv[static_cast<size_t>(t)].val());
        pg = ad::sub(pg, ad::sum_all(ad::mul(ad::slice_rows(logp2, t, t + 1), adv)));
        ad::Var verr = ad::sub(ad::Var::constant(vte.vs[static_cast<size_t>(t)].val()),
                               ad::slice_rows(ve_var, t, t + 1));
        ve_loss = ad::add(ve_loss, ad::sum_all(ad::square(verr)));
      }
      total = ad::add(ad::smul(pg, inv), ad::smul(ve_loss, 0.5 * hp_.value_coef * inv));
    }
    if (intr_.has_vq()) {
      auto obj = intr_.vq().objective(rg.x_vq_steps);
      out.vq_loss = obj.total.item();
      total = ad::add(total, obj.total);
    }
    if (method_uses_aelsh(method_)) {
      ad::Var recon = intr_.aelsh().recon_loss(rg.x7_steps);
      out.vq_loss = recon.item();
      total = ad::add(total, recon);
    }

    out.loss = total.item();
    if (!std::isfinite(out.loss)) throw NumericError("non-finite outer loss");
    ParamList ps = intr_.params();
    std::vector<ad::Var> gs = ad::grad(total, param_vars(ps));
    double norm2 = 0.0;
    for (const ad::Var& g : gs) {
      if (!g.val().all_finite())
        throw NumericError("non-finite meta-gradient; aborting the step");
      const double n = g.val().l2_norm();
      norm2 += n * n;
    }
    out.grad_norm = std::sqrt(norm2);
    std::vector<Tensor> next = opt_intr_.plan(ps, grad_values(gs));
    for (size_t i = 0; i < ps.size(); ++i) ps[i].v.n->value = next[i];
    return out;
  }

  void commit_policy(const InnerResult& inner) {
    ParamList ps = policy_.params();
    assert(ps.size() == inner.committed.size());
    for (size_t i = 0; i < ps.size(); ++i) ps[i].v.n->value = inner.committed[i];
  }

  struct EpochOut {
    UpdateReport report;
    std::vector<EpisodeStats> completed;
  };

  // One synchronous epoch: collect under the current snapshot, inner update,
  // outer update through it, then commit. Parameter leaves are only mutated
  // after every graph that captured them has been differentiated.
  EpochOut train_epoch(EnvPool& pool) {
    auto col = pool.collect(policy_, intr_.hasher(), hp_.unroll);
    RewardGraph rg = build_rewards(col.batch);
    InnerResult inner = inner_update(col.batch, rg.r_total);
    OuterResult outer = outer_update(col.batch, inner, rg);
    commit_policy(inner);
    ++epoch_;

    EpochOut out;
    out.completed = std::move(col.completed);
    UpdateReport& r = out.report;
    r.epoch = epoch_;
    r.env_step = pool.env_step();
    r.inner_loss = inner.loss;
    r.outer_loss = outer.loss;
    r.vq_loss = outer.vq_loss;
    r.eta = hp_.eta;
    r.eta_ta = hp_.eta_ta;
    r.mean_entropy = inner.entropy_mean;
    r.grad_norms["policy"] = inner.grad_norm;
    r.grad_norms["intrinsic"] = outer.grad_norm;
    const double inv = 1.0 / static_cast<double>(col.batch.T * col.batch.B);
    r.mean_r_ep = col.batch.r_ep.sum() * inv;
    r.mean_r_i = rg.r_i.val().sum() * inv;
    if (rg.r_ta.defined()) r.mean_r_ta = rg.r_ta.val().sum() * inv;
    if (!r.all_finite()) throw NumericError("non-finite update report");
    return out;
  }

 private:
  Hyper hp_;
  Method method_ = Method::NoInt;
  PolicyNet policy_;
  IntrinsicModule intr_;
  Adam opt_policy_, opt_intr_;
  int64_t epoch_ = 0;
};

}  // namespace leco
