#pragma once

// Policy/value network stack: small conv encoder over the egocentric view,
// linear torso, optional LSTM core, softmax policy head and a scalar value
// head estimating the combined extrinsic+intrinsic return.

#include <optional>
#include <vector>

#include "leco/nn.hpp"
#include "leco/obs_encode.hpp"

namespace leco {

struct PolicyConfig {
  int conv1 = 16;
  int conv2 = 32;
  int torso = 128;
  bool recurrent = false;
  int core = 256;
  int actions = kNumActions;
};

struct AgentState {
  Tensor h, c;  // empty when recurrence is disabled; zeros at episode start
  bool defined() const { return h.defined(); }
};

class PolicyNet {
 public:
  PolicyNet() = default;

  PolicyNet(const PolicyConfig& cfg, Rng& rng)
      : cfg_(cfg),
        c1_(kObsChannels, cfg.conv1, 3, 2, 1, rng),
        c2_(cfg.conv1, cfg.conv2, 3, 2, 1, rng) {
    const int64_t flat = flat_dim();
    fc_ = Linear(flat, cfg.torso, rng);
    if (cfg.recurrent) lstm_ = LstmCell(cfg.torso, cfg.core, rng);
    const int64_t head_in = cfg.recurrent ? cfg.core : cfg.torso;
    pi_ = Linear(head_in, cfg.actions, rng);
    v_ = Linear(head_in, 1, rng);
  }

  const PolicyConfig& config() const { return cfg_; }

  int64_t flat_dim() const {
    const int64_t s1 = (kViewSize + 2 - 3) / 2 + 1;  // 7 -> 4
    const int64_t s2 = (s1 + 2 - 3) / 2 + 1;         // 4 -> 2
    return s2 * s2 * cfg_.conv2;
  }

  AgentState initial_state(int64_t batch = 1) const {
    if (!cfg_.recurrent) return {};
    return {Tensor::zeros({batch, cfg_.core}), Tensor::zeros({batch, cfg_.core})};
  }

  // conv + torso features on an observation batch [n, 7, 7, 3]
  ad::Var features(const ad::Var& obs) const {
    ad::Var h = ad::relu(c1_.forward(obs));
    h = ad::relu(c2_.forward(h));
    h = ad::reshape(h, {obs.shape()[0], flat_dim()});
    return ad::relu(fc_.forward(h));
  }

  struct StepOut {
    ad::Var logits;  // [n, actions]
    ad::Var value;   // [n, 1]
    AgentState next;
  };

  StepOut forward_step(const Tensor& obs_batch, const AgentState& state) const {
    ad::NoGradGuard ng;
    ad::Var feat = features(ad::Var::constant(obs_batch));
    StepOut out;
    if (cfg_.recurrent) {
      LstmState s{ad::Var::constant(state.h), ad::Var::constant(state.c)};
      LstmState ns = lstm_.step(feat, s);
      out.logits = pi_.forward(ns.h);
      out.value = v_.forward(ns.h);
      out.next = {ns.h.val(), ns.c.val()};
    } else {
      out.logits = pi_.forward(feat);
      out.value = v_.forward(feat);
    }
    return out;
  }

  struct UnrollOut {
    ad::Var logits;  // [t*b, actions], time-major rows
    ad::Var values;  // [(t+1)*b, 1]
  };

  // Teacher-forced pass over a time-major observation batch of t+1 steps.
  // `dones` [t, b] masks the recurrent state between steps; the stored
  // initial state is replayed, so recomputed outputs match acting exactly
  // while parameters are unchanged.
  UnrollOut unroll(const Tensor& obs, int64_t t_steps, int64_t batch, const Tensor& dones,
                   const AgentState& init) const {
    ad::Var feat = features(ad::Var::constant(obs));  // [(t+1)*b, torso]
    if (!cfg_.recurrent) {
      UnrollOut out;
      out.logits = pi_.forward(ad::slice_rows(feat, 0, t_steps * batch));
      out.values = v_.forward(feat);
      return out;
    }
    LstmState s{ad::Var::constant(init.h), ad::Var::constant(init.c)};
    std::vector<ad::Var> hs;
    hs.reserve(static_cast<size_t>(t_steps) + 1);
    for (int64_t t = 0; t <= t_steps; ++t) {
      if (t > 0) {
        // reset rows whose episode finished on the previous step
        Tensor keep(Shape{batch, 1});
        for (int64_t b = 0; b < batch; ++b) keep.at(b, 0) = 1.0 - dones.at(t - 1, b);
        ad::Var mask = ad::bcast_rows(ad::Var::constant(keep), cfg_.core);
        s = {ad::mul(s.h, mask), ad::mul(s.c, mask)};
      }
      s = lstm_.step(ad::slice_rows(feat, t * batch, (t + 1) * batch), s);
      hs.push_back(s.h);
    }
    ad::Var all = ad::concat_rows(hs);
    UnrollOut out;
    out.logits = pi_.forward(ad::slice_rows(all, 0, t_steps * batch));
    out.values = v_.forward(all);
    return out;
  }

  void collect(ParamList& out, const std::string& prefix) const {
    c1_.collect(out, prefix + "/c1");
    c2_.collect(out, prefix + "/c2");
    fc_.collect(out, prefix + "/fc");
    if (cfg_.recurrent) lstm_.collect(out, prefix + "/lstm");
    pi_.collect(out, prefix + "/pi");
    v_.collect(out, prefix + "/v");
  }

  ParamList params() const {
    ParamList ps;
    collect(ps, "policy");
    return ps;
  }

  // Shallow copy with parameter Vars substituted, aligned with params()
  // order. Used to evaluate the unroll under updated parameters while the
  // graph stays connected to the originals.
  PolicyNet with_params(const std::vector<ad::Var>& vars) const {
    PolicyNet copy = *this;
    std::vector<ad::Var*> slots = copy.param_slots();
    assert(vars.size() == slots.size());
    for (size_t i = 0; i < slots.size(); ++i) *slots[i] = vars[i];
    return copy;
  }

 private:
  // mirrors collect() order
  std::vector<ad::Var*> param_slots() {
    std::vector<ad::Var*> out;
    for (ad::Var* v : c1_.var_slots()) out.push_back(v);
    for (ad::Var* v : c2_.var_slots()) out.push_back(v);
    for (ad::Var* v : fc_.var_slots()) out.push_back(v);
    if (cfg_.recurrent)
      for (ad::Var* v : lstm_.var_slots()) out.push_back(v);
    for (ad::Var* v : pi_.var_slots()) out.push_back(v);
    for (ad::Var* v : v_.var_slots()) out.push_back(v);
    return out;
  }
  PolicyConfig cfg_;
  Conv2d c1_, c2_;
  Linear fc_;
  LstmCell lstm_;
  Linear pi_, v_;
};

struct ActResult {
  Action action = Action::Done;
  double logp = 0.0;
  double value = 0.0;
  AgentState next;
};

// Batched action selection against a read-only parameter snapshot.
inline std::vector<ActResult> act_batch(const PolicyNet& net, const Tensor& obs_batch,
                                        const AgentState& state, Rng& rng,
                                        bool greedy = false) {
  auto out = net.forward_step(obs_batch, state);
  const Tensor& logits = out.logits.val();
  if (!logits.all_finite()) throw NumericError("non-finite policy logits");
  ad::NoGradGuard ng;
  Tensor logp = ad::log_softmax_rows(ad::Var::constant(logits)).val();
  const int64_t n = logits.rows(), a = logits.cols();
  std::vector<ActResult> res(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int64_t pick = 0;
    if (greedy) {
      for (int64_t j = 1; j < a; ++j)
        if (logits.at(i, j) > logits.at(i, pick)) pick = j;
    } else {
      const double u = rng.uniform();
      double acc = 0.0;
      pick = a - 1;
      for (int64_t j = 0; j < a; ++j) {
        acc += std::exp(logp.at(i, j));
        if (u < acc) {
          pick = j;
          break;
        }
      }
    }
    res[static_cast<size_t>(i)].action = static_cast<Action>(pick);
    res[static_cast<size_t>(i)].logp = logp.at(i, pick);
    res[static_cast<size_t>(i)].value = out.value.val()[i];
    if (out.next.defined()) {
      res[static_cast<size_t>(i)].next = AgentState{
          Tensor::from(std::vector<double>(out.next.h.data() + i * net.config().core,
                                           out.next.h.data() + (i + 1) * net.config().core),
                       {1, net.config().core}),
          Tensor::from(std::vector<double>(out.next.c.data() + i * net.config().core,
                                           out.next.c.data() + (i + 1) * net.config().core),
                       {1, net.config().core})};
    }
  }
  return res;
}

inline ActResult act(const PolicyNet& net, const Observation& obs, const AgentState& state,
                     Rng& rng, bool greedy = false) {
  return act_batch(net, obs_batch_tensor({&obs, 1}), state, rng, greedy)[0];
}

struct EvalOut {
  Tensor logits;     // [t*b, actions]
  Tensor values;     // [(t+1)*b]
  Tensor entropies;  // [t*b]
};

// No-grad teacher-forced evaluation of a recorded unroll.
inline EvalOut evaluate(const PolicyNet& net, const Tensor& obs, int64_t t_steps, int64_t batch,
                        const Tensor& dones, const AgentState& init) {
  if (obs.rows() != (t_steps + 1) * batch)
    throw UsageError("evaluate: observation rows do not match unroll length");
  ad::NoGradGuard ng;
  auto un = net.unroll(obs, t_steps, batch, dones, init);
  EvalOut out;
  out.logits = un.logits.val();
  out.values = un.values.val().reshape({(t_steps + 1) * batch});
  out.entropies = ad::entropy_rows(ad::Var::constant(un.logits.val()))
                      .val()
                      .reshape({t_steps * batch});
  return out;
}

}  // namespace leco
