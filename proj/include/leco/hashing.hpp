#pragma once

// State hashing and exact per-episode visitation counting. The learnable
// vector-quantized hasher lives in vq.hpp; this header hosts the hash code
// and count table plus the two non-VQ baselines: DSC (downsampled cells)
// and AE-LSH (SimHash over an online autoencoder latent).

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "leco/errors.hpp"
#include "leco/nn.hpp"
#include "leco/obs_encode.hpp"

namespace leco {

struct HashCode {
  std::vector<int32_t> v;
  bool operator==(const HashCode& o) const { return v == o.v; }
};

struct HashCodeHasher {
  size_t operator()(const HashCode& h) const {
    // FNV-1a over the raw index bytes
    uint64_t x = 1469598103934665603ull;
    for (int32_t i : h.v) {
      for (int b = 0; b < 4; ++b) {
        x ^= static_cast<uint64_t>((static_cast<uint32_t>(i) >> (8 * b)) & 0xff);
        x *= 1099511628211ull;
      }
    }
    return static_cast<size_t>(x);
  }
};

// Exact per-episode visitation counts keyed by hash code.
class EpisodicCountTable {
 public:
  // Increments the count for `code` and returns the post-increment count
  // together with the episodic novelty reward 1/sqrt(N).
  std::pair<int64_t, double> count_and_reward(const HashCode& code) {
    const int64_t n = ++counts_[code];
    ++total_;
    return {n, 1.0 / std::sqrt(static_cast<double>(n))};
  }

  void reset() {
    counts_.clear();
    total_ = 0;
    ++episode_id_;
  }

  int64_t episode_id() const { return episode_id_; }
  int64_t total() const { return total_; }
  size_t distinct() const { return counts_.size(); }
  const std::unordered_map<HashCode, int64_t, HashCodeHasher>& counts() const { return counts_; }

  nlohmann::json to_json() const {
    nlohmann::json codes = nlohmann::json::array();
    for (const auto& [code, n] : counts_) codes.push_back({{"code", code.v}, {"n", n}});
    return {{"episode_id", episode_id_}, {"total", total_}, {"counts", codes}};
  }

  static EpisodicCountTable from_json(const nlohmann::json& j) {
    EpisodicCountTable t;
    t.episode_id_ = j.at("episode_id").get<int64_t>();
    t.total_ = j.at("total").get<int64_t>();
    for (const auto& e : j.at("counts")) {
      HashCode c{e.at("code").get<std::vector<int32_t>>()};
      t.counts_[c] = e.at("n").get<int64_t>();
    }
    return t;
  }

 private:
  std::unordered_map<HashCode, int64_t, HashCodeHasher> counts_;
  int64_t episode_id_ = 0;
  int64_t total_ = 0;
};

// Fraction of steps in an episode whose code had not appeared before.
inline double new_hash_rate(std::span<const HashCode> episode) {
  if (episode.empty()) throw UsageError("new_hash_rate of an empty episode");
  std::unordered_map<HashCode, int, HashCodeHasher> seen;
  int64_t fresh = 0;
  for (const HashCode& c : episode)
    if (seen[c]++ == 0) ++fresh;
  return static_cast<double>(fresh) / static_cast<double>(episode.size());
}

// Downsampled-cell hash: nearest-neighbour downsample of the view to w x h,
// per-channel intensity rescale to integers in [0, K], row-major serialize.
inline HashCode hash_dsc(const Observation& obs, int w, int h, int K) {
  HashCode code;
  code.v.reserve(static_cast<size_t>(w * h * kObsChannels));
  for (int i = 0; i < h; ++i) {
    const int src_r = i * kViewSize / h;
    for (int j = 0; j < w; ++j) {
      const int src_c = j * kViewSize / w;
      for (int c = 0; c < kObsChannels; ++c) {
        const int32_t v = obs.at(src_r, src_c, c);
        const int32_t level =
            static_cast<int32_t>(std::lround(static_cast<double>(v) * K / kChannelMax[c]));
        code.v.push_back(level);
      }
    }
  }
  return code;
}

// SimHash over a dense autoencoder latent. The projection matrix is drawn
// once per run; the autoencoder trains online on reconstruction loss.
class AeLshHasher {
 public:
  AeLshHasher() = default;
  AeLshHasher(int bits, int latent, Rng& rng)
      : bits_(bits), latent_(latent) {
    const int64_t in = kViewSize * kViewSize * kObsChannels;
    enc_ = Mlp({in, latent, latent}, rng);
    dec_ = Mlp({latent, latent, in}, rng);
    proj_ = Tensor(Shape{latent, bits});
    for (int64_t i = 0; i < proj_.numel(); ++i) proj_[i] = rng.normal();
  }

  int bits() const { return bits_; }
  int latent() const { return latent_; }
  const Tensor& projection() const { return proj_; }

  ad::Var latent_of(const ad::Var& obs_batch) const {
    const int64_t n = obs_batch.shape()[0];
    return enc_.forward(ad::reshape(obs_batch, {n, kViewSize * kViewSize * kObsChannels}));
  }

  HashCode hash_latent(const Tensor& b) const {
    HashCode code;
    code.v.resize(static_cast<size_t>(bits_));
    for (int j = 0; j < bits_; ++j) {
      double s = 0.0;
      for (int i = 0; i < latent_; ++i) s += b[i] * proj_.at(i, j);
      code.v[static_cast<size_t>(j)] = s >= 0.0 ? 1 : 0;
    }
    return code;
  }

  HashCode hash(const Observation& obs) const {
    ad::NoGradGuard ng;
    return hash_latent(latent_of(ad::Var::constant(obs_tensor(obs))).val());
  }

  // reconstruction loss for online training; mean over batch rows
  ad::Var recon_loss(const ad::Var& obs_batch) const {
    const int64_t n = obs_batch.shape()[0];
    ad::Var flat = ad::reshape(obs_batch, {n, kViewSize * kViewSize * kObsChannels});
    ad::Var rec = dec_.forward(enc_.forward(flat));
    return ad::smul(ad::sum_all(ad::square(ad::sub(rec, flat))), 0.5 / static_cast<double>(n));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    enc_.collect(out, prefix + "/enc");
    dec_.collect(out, prefix + "/dec");
  }

 private:
  int bits_ = 0, latent_ = 0;
  Mlp enc_, dec_;
  Tensor proj_;
};

// Per-episode hash memory record for offline inspection: every distinct
// code with its count and a reference to the first step that produced it.
struct HashMemoryEntry {
  HashCode code;
  int64_t count = 0;
  int64_t first_step = 0;
  std::string example_obs;
};

inline nlohmann::json hash_memory_json(const std::vector<HashMemoryEntry>& entries,
                                       int64_t episode_id) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries)
    arr.push_back({{"code", e.code.v},
                   {"count", e.count},
                   {"first_step", e.first_step},
                   {"example_obs", e.example_obs}});
  return {{"episode_id", episode_id}, {"entries", arr}};
}

}  // namespace leco
