#pragma once

// Synchronous vectorized rollout collection. A pool of independent worlds
// steps in lockstep under the current parameter snapshot; episodes reset in
// place, each with a fresh procedural seed. Each environment owns a private
// episodic count table.

#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "leco/gridworld.hpp"
#include "leco/hashing.hpp"
#include "leco/intrinsic.hpp"
#include "leco/policy.hpp"
#include "leco/vq.hpp"

namespace leco {

enum class Method {
  Leco = 0,
  VqOnly = 1,
  LecoNaive = 2,
  LecoAeLsh = 3,
  Dsc = 4,
  AeLsh = 5,
  NoInt = 6,
};

inline bool method_uses_count(Method m) { return m != Method::NoInt; }
inline bool method_uses_vq(Method m) {
  return m == Method::Leco || m == Method::VqOnly || m == Method::LecoNaive;
}
inline bool method_uses_aelsh(Method m) { return m == Method::LecoAeLsh || m == Method::AeLsh; }
inline bool method_has_modulator(Method m) {
  return m == Method::Leco || m == Method::LecoNaive || m == Method::LecoAeLsh;
}

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Leco: return "leco";
    case Method::VqOnly: return "vq_only";
    case Method::LecoNaive: return "leco_naive";
    case Method::LecoAeLsh: return "leco_ae_lsh";
    case Method::Dsc: return "dsc";
    case Method::AeLsh: return "ae_lsh";
    case Method::NoInt: return "no_int";
  }
  return "?";
}

inline Method method_from_name(const std::string& s) {
  for (int i = 0; i <= 6; ++i)
    if (s == method_name(static_cast<Method>(i))) return static_cast<Method>(i);
  throw ConfigError("unknown method '" + s + "'");
}

// Counting hash used while acting, dispatched by method.
struct StepHasher {
  Method method = Method::NoInt;
  const VqModel* vq = nullptr;
  const AeLshHasher* aelsh = nullptr;
  int dsc_w = 3, dsc_h = 3, dsc_k = 11;

  std::vector<HashCode> hash(std::span<const Observation> obs) const {
    std::vector<HashCode> out;
    if (method_uses_vq(method)) return vq->hash_batch(obs);
    out.reserve(obs.size());
    for (const Observation& o : obs) {
      if (method == Method::Dsc)
        out.push_back(hash_dsc(o, dsc_w, dsc_h, dsc_k));
      else if (method_uses_aelsh(method))
        out.push_back(aelsh->hash(o));
    }
    return out;
  }
};

struct EpisodeStats {
  double ret = 0.0;
  int length = 0;
  bool success = false;
  double new_hash_rate = 0.0;
  double mean_r_ep = 0.0;
  int64_t end_env_step = 0;
};

struct TrajectoryBatch {
  int64_t T = 0, B = 0;
  std::vector<Observation> obs;       // (T+1)*B rows, time-major
  std::vector<int64_t> actions;       // T*B
  std::vector<int64_t> prev_actions;  // T*B, -1 when the episode just began
  Tensor behavior_logp;               // [T, B]
  Tensor r_e, r_ep, dones;            // [T, B]
  AgentState init_state;
};

inline uint64_t train_world_seed(uint64_t run_seed, int64_t env, int64_t episode) {
  return derive_seed(derive_seed(run_seed, 0x747261696e000000ull),
                     (static_cast<uint64_t>(env) << 40) ^ static_cast<uint64_t>(episode));
}

inline uint64_t eval_world_seed(int64_t index) {
  return derive_seed(0x6576616c00000000ull, static_cast<uint64_t>(index));
}

class EnvPool {
 public:
  EnvPool() = default;

  EnvPool(const WorldConfig& base, int64_t batch, uint64_t run_seed, const PolicyNet& net)
      : base_(base), batch_(batch), run_seed_(run_seed),
        act_rng_(derive_seed(run_seed, 0x616374696f6e0000ull)) {
    state_ = net.initial_state(batch);
    for (int64_t e = 0; e < batch; ++e) {
      episode_idx_.push_back(0);
      WorldConfig c = base_;
      c.seed = train_world_seed(run_seed_, e, 0);
      worlds_.push_back(World::generate(c));
      obs_.push_back(worlds_.back().observe());
      prev_action_.emplace_back();
      tables_.emplace_back();
      episode_codes_.emplace_back();
      ep_return_.push_back(0.0);
      ep_len_.push_back(0);
      ep_rep_sum_.push_back(0.0);
    }
  }

  int64_t batch() const { return batch_; }
  int64_t env_step() const { return env_step_; }
  const WorldConfig& base_config() const { return base_; }
  EpisodicCountTable& table(int64_t e) { return tables_[static_cast<size_t>(e)]; }
  Rng& act_rng() { return act_rng_; }

  struct CollectOut {
    TrajectoryBatch batch;
    std::vector<EpisodeStats> completed;
  };

  CollectOut collect(const PolicyNet& net, const StepHasher& hasher, int64_t T) {
    CollectOut out;
    TrajectoryBatch& b = out.batch;
    b.T = T;
    b.B = batch_;
    b.obs.reserve(static_cast<size_t>((T + 1) * batch_));
    b.actions.resize(static_cast<size_t>(T * batch_));
    b.prev_actions.resize(static_cast<size_t>(T * batch_));
    b.behavior_logp = Tensor(Shape{T, batch_});
    b.r_e = Tensor(Shape{T, batch_});
    b.r_ep = Tensor(Shape{T, batch_});
    b.dones = Tensor(Shape{T, batch_});
    b.init_state = state_;

    std::vector<Observation> next_obs(static_cast<size_t>(batch_));
    std::vector<Transition> trans(static_cast<size_t>(batch_));
    for (int64_t t = 0; t < T; ++t) {
      for (int64_t e = 0; e < batch_; ++e) b.obs.push_back(obs_[static_cast<size_t>(e)]);
      auto acts = act_batch(net, obs_batch_tensor({&obs_[0], obs_.size()}), state_, act_rng_);
      for (int64_t e = 0; e < batch_; ++e) {
        const auto& a = acts[static_cast<size_t>(e)];
        b.actions[static_cast<size_t>(t * batch_ + e)] = static_cast<int64_t>(a.action);
        b.prev_actions[static_cast<size_t>(t * batch_ + e)] =
            prev_action_[static_cast<size_t>(e)]
                ? static_cast<int64_t>(*prev_action_[static_cast<size_t>(e)])
                : -1;
        b.behavior_logp.at(t, e) = a.logp;
        trans[static_cast<size_t>(e)] = worlds_[static_cast<size_t>(e)].step(a.action);
        next_obs[static_cast<size_t>(e)] = trans[static_cast<size_t>(e)].obs;
        b.r_e.at(t, e) = trans[static_cast<size_t>(e)].extrinsic_reward;
        b.dones.at(t, e) = trans[static_cast<size_t>(e)].done ? 1.0 : 0.0;
      }
      // episodic novelty on the successor states under the acting snapshot
      if (method_uses_count(hasher.method)) {
        auto codes = hasher.hash({next_obs.data(), next_obs.size()});
        for (int64_t e = 0; e < batch_; ++e) {
          auto [n, r] = tables_[static_cast<size_t>(e)].count_and_reward(
              codes[static_cast<size_t>(e)]);
          b.r_ep.at(t, e) = r;
          episode_codes_[static_cast<size_t>(e)].push_back(codes[static_cast<size_t>(e)]);
          ep_rep_sum_[static_cast<size_t>(e)] += r;
        }
      }
      if (state_.defined()) {
        const int64_t core = state_.h.cols();
        Tensor h(Shape{batch_, core}), c(Shape{batch_, core});
        for (int64_t e = 0; e < batch_; ++e)
          for (int64_t j = 0; j < core; ++j) {
            h.at(e, j) = acts[static_cast<size_t>(e)].next.h[j];
            c.at(e, j) = acts[static_cast<size_t>(e)].next.c[j];
          }
        state_ = {h, c};
      }
      env_step_ += batch_;
      for (int64_t e = 0; e < batch_; ++e) {
        const auto& tr = trans[static_cast<size_t>(e)];
        ep_return_[static_cast<size_t>(e)] += tr.extrinsic_reward;
        ep_len_[static_cast<size_t>(e)] += 1;
        if (tr.done) {
          EpisodeStats st;
          st.ret = ep_return_[static_cast<size_t>(e)];
          st.length = ep_len_[static_cast<size_t>(e)];
          st.success = st.ret > 0.0;
          st.end_env_step = env_step_;
          const auto& codes = episode_codes_[static_cast<size_t>(e)];
          if (!codes.empty()) {
            st.new_hash_rate = new_hash_rate({codes.data(), codes.size()});
            st.mean_r_ep = ep_rep_sum_[static_cast<size_t>(e)] / st.length;
          }
          out.completed.push_back(st);
          reset_env(e);
        } else {
          obs_[static_cast<size_t>(e)] = tr.obs;
          prev_action_[static_cast<size_t>(e)] = tr.action;
        }
      }
    }
    for (int64_t e = 0; e < batch_; ++e) b.obs.push_back(obs_[static_cast<size_t>(e)]);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["env_step"] = env_step_;
    j["act_rng"] = act_rng_.save_state();
    nlohmann::json envs = nlohmann::json::array();
    for (int64_t e = 0; e < batch_; ++e) {
      nlohmann::json je;
      je["world"] = worlds_[static_cast<size_t>(e)].to_json();
      je["episode_idx"] = episode_idx_[static_cast<size_t>(e)];
      if (prev_action_[static_cast<size_t>(e)])
        je["prev_action"] = static_cast<int>(*prev_action_[static_cast<size_t>(e)]);
      je["table"] = tables_[static_cast<size_t>(e)].to_json();
      nlohmann::json codes = nlohmann::json::array();
      for (const HashCode& c : episode_codes_[static_cast<size_t>(e)]) codes.push_back(c.v);
      je["episode_codes"] = codes;
      je["ep_return"] = ep_return_[static_cast<size_t>(e)];
      je["ep_len"] = ep_len_[static_cast<size_t>(e)];
      je["ep_rep_sum"] = ep_rep_sum_[static_cast<size_t>(e)];
      envs.push_back(je);
    }
    j["envs"] = envs;
    if (state_.defined()) {
      j["state_h"] = std::vector<double>(state_.h.data(), state_.h.data() + state_.h.numel());
      j["state_c"] = std::vector<double>(state_.c.data(), state_.c.data() + state_.c.numel());
      j["core"] = state_.h.cols();
    }
    return j;
  }

  void restore(const nlohmann::json& j) {
    env_step_ = j.at("env_step").get<int64_t>();
    act_rng_.load_state(j.at("act_rng").get<std::string>());
    const auto& envs = j.at("envs");
    for (int64_t e = 0; e < batch_; ++e) {
      const auto& je = envs.at(static_cast<size_t>(e));
      worlds_[static_cast<size_t>(e)] = World::from_json(je.at("world"));
      obs_[static_cast<size_t>(e)] = worlds_[static_cast<size_t>(e)].observe();
      episode_idx_[static_cast<size_t>(e)] = je.at("episode_idx").get<int64_t>();
      prev_action_[static_cast<size_t>(e)].reset();
      if (je.contains("prev_action"))
        prev_action_[static_cast<size_t>(e)] =
            static_cast<Action>(je.at("prev_action").get<int>());
      tables_[static_cast<size_t>(e)] = EpisodicCountTable::from_json(je.at("table"));
      episode_codes_[static_cast<size_t>(e)].clear();
      for (const auto& cv : je.at("episode_codes"))
        episode_codes_[static_cast<size_t>(e)].push_back(
            HashCode{cv.get<std::vector<int32_t>>()});
      ep_return_[static_cast<size_t>(e)] = je.at("ep_return").get<double>();
      ep_len_[static_cast<size_t>(e)] = je.at("ep_len").get<int>();
      ep_rep_sum_[static_cast<size_t>(e)] = je.at("ep_rep_sum").get<double>();
    }
    if (j.contains("state_h")) {
      const int64_t core = j.at("core").get<int64_t>();
      auto h = j.at("state_h").get<std::vector<double>>();
      auto c = j.at("state_c").get<std::vector<double>>();
      state_ = {Tensor::from(std::move(h), {batch_, core}),
                Tensor::from(std::move(c), {batch_, core})};
    }
  }

 private:
  void reset_env(int64_t e) {
    episode_idx_[static_cast<size_t>(e)] += 1;
    WorldConfig c = base_;
    c.seed = train_world_seed(run_seed_, e, episode_idx_[static_cast<size_t>(e)]);
    worlds_[static_cast<size_t>(e)] = World::generate(c);
    obs_[static_cast<size_t>(e)] = worlds_[static_cast<size_t>(e)].observe();
    prev_action_[static_cast<size_t>(e)].reset();
    tables_[static_cast<size_t>(e)].reset();
    episode_codes_[static_cast<size_t>(e)].clear();
    ep_return_[static_cast<size_t>(e)] = 0.0;
    ep_len_[static_cast<size_t>(e)] = 0;
    ep_rep_sum_[static_cast<size_t>(e)] = 0.0;
    if (state_.defined())
      for (int64_t col = 0; col < state_.h.cols(); ++col) {
        state_.h.at(e, col) = 0.0;
        state_.c.at(e, col) = 0.0;
      }
  }

  WorldConfig base_;
  int64_t batch_ = 0;
  uint64_t run_seed_ = 0;
  Rng act_rng_;
  std::vector<World> worlds_;
  std::vector<Observation> obs_;
  std::vector<std::optional<Action>> prev_action_;
  std::vector<EpisodicCountTable> tables_;
  std::vector<std::vector<HashCode>> episode_codes_;
  std::vector<double> ep_return_, ep_rep_sum_;
  std::vector<int> ep_len_;
  std::vector<int64_t> episode_idx_;
  AgentState state_;
  int64_t env_step_ = 0;
};

}  // namespace leco
