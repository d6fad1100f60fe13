#pragma once

// Vector-quantized hashing. An encoder compresses the observation to a
// w x h grid of D-dimensional latents; each grid vector snaps to its
// nearest codebook entry and the index sequence is the hash code. The
// whole module trains on reconstruction + codebook + commitment terms with
// a straight-through gradient into the encoder.

#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "leco/hashing.hpp"
#include "leco/nn.hpp"
#include "leco/obs_encode.hpp"

namespace leco {

struct VqConfig {
  int w = 3, h = 3;   // spatial hash size
  int K = 8;          // codebook entries
  int D = 8;          // embedding dimension
  int channels = 16;  // conv width of the production encoder/decoder
  int input_hw = 12;  // observations are resized to this before encoding
};

// Nearest codebook entry per latent row, ties broken toward the smallest
// index. Returns the quantized rows and the index sequence.
inline std::pair<Tensor, std::vector<int64_t>> quantize_rows(const Tensor& ze,
                                                             const Tensor& codebook) {
  if (codebook.numel() == 0 || codebook.rows() == 0)
    throw ConfigError("quantize with an empty codebook");
  if (ze.cols() != codebook.cols())
    throw ConfigError("latent dimension " + std::to_string(ze.cols()) +
                      " does not match codebook dimension " + std::to_string(codebook.cols()));
  const int64_t n = ze.rows(), k = codebook.rows(), d = ze.cols();
  Tensor zq(ze.shape());
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int64_t arg = 0;
    for (int64_t c = 0; c < k; ++c) {
      double dist = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        const double diff = ze.at(i, j) - codebook.at(c, j);
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        arg = c;
      }
    }
    idx[static_cast<size_t>(i)] = arg;
    for (int64_t j = 0; j < d; ++j) zq.at(i, j) = codebook.at(arg, j);
  }
  return {zq, idx};
}

inline HashCode indices_to_code(const std::vector<int64_t>& idx) {
  HashCode c;
  c.v.reserve(idx.size());
  for (int64_t i : idx) c.v.push_back(static_cast<int32_t>(i));
  return c;
}

// production conv encoder: 12x12x3 -> w x h x D
class VqConvEncoder : public Net {
 public:
  VqConvEncoder(const VqConfig& cfg, Rng& rng)
      : cfg_(cfg),
        c1_(kObsChannels, cfg.channels, 3, 1, 1, rng),
        c2_(cfg.channels, cfg.channels, 4, 2, 1, rng),
        c3_(cfg.channels, cfg.channels, 4, 2, 1, rng),
        head_(cfg.channels, cfg.D, 1, 1, 0, rng),
        adapt_(cfg.h, cfg.w) {}

  ad::Var forward(const ad::Var& x) const override {
    ad::Var h = ad::relu(c1_.forward(x));
    h = ad::relu(c2_.forward(h));
    h = ad::relu(c3_.forward(h));
    if (h.shape()[1] != cfg_.h || h.shape()[2] != cfg_.w) h = adapt_.forward(h);
    return head_.forward(h);
  }

  void collect(ParamList& out, const std::string& prefix) const override {
    c1_.collect(out, prefix + "/c1");
    c2_.collect(out, prefix + "/c2");
    c3_.collect(out, prefix + "/c3");
    head_.collect(out, prefix + "/head");
  }

 private:
  VqConfig cfg_;
  Conv2d c1_, c2_, c3_, head_;
  UpsampleNearest adapt_;
};

// production decoder, roughly symmetric: w x h x D -> 12x12x3
class VqConvDecoder : public Net {
 public:
  VqConvDecoder(const VqConfig& cfg, Rng& rng)
      : c1_(cfg.D, cfg.channels, 3, 1, 1, rng),
        up1_(cfg.input_hw / 2, cfg.input_hw / 2),
        c2_(cfg.channels, cfg.channels, 3, 1, 1, rng),
        up2_(cfg.input_hw, cfg.input_hw),
        c3_(cfg.channels, cfg.channels, 3, 1, 1, rng),
        head_(cfg.channels, kObsChannels, 1, 1, 0, rng) {}

  ad::Var forward(const ad::Var& z) const override {
    ad::Var h = ad::relu(c1_.forward(z));
    h = ad::relu(c2_.forward(up1_.forward(h)));
    h = ad::relu(c3_.forward(up2_.forward(h)));
    return head_.forward(h);
  }

  void collect(ParamList& out, const std::string& prefix) const override {
    c1_.collect(out, prefix + "/c1");
    c2_.collect(out, prefix + "/c2");
    c3_.collect(out, prefix + "/c3");
    head_.collect(out, prefix + "/head");
  }

 private:
  Conv2d c1_;
  UpsampleNearest up1_;
  Conv2d c2_;
  UpsampleNearest up2_;
  Conv2d c3_;
  Conv2d head_;
};

class VqModel {
 public:
  VqModel() = default;

  // production model over gridworld observations
  VqModel(const VqConfig& cfg, Rng& rng)
      : cfg_(cfg),
        enc_(std::make_shared<VqConvEncoder>(cfg, rng)),
        dec_(std::make_shared<VqConvDecoder>(cfg, rng)),
        resize_(cfg.input_hw, cfg.input_hw) {
    init_codebook(rng);
  }

  // custom encoder/decoder, used by small test instances
  VqModel(const VqConfig& cfg, NetPtr enc, NetPtr dec, Rng& rng)
      : cfg_(cfg), enc_(std::move(enc)), dec_(std::move(dec)),
        resize_(cfg.input_hw, cfg.input_hw) {
    init_codebook(rng);
  }

  const VqConfig& config() const { return cfg_; }
  const ad::Var& codebook() const { return codebook_; }
  const Net& encoder_net() const { return *enc_; }
  const Net& decoder_net() const { return *dec_; }
  int positions() const { return cfg_.w * cfg_.h; }

  // observations -> normalized, resized encoder input (constant tensor)
  Tensor preprocess(std::span<const Observation> obs) const {
    return resize_.apply(obs_batch_tensor(obs));
  }

  // [n, ...input...] -> [n*positions, D]
  ad::Var encode_batch(const ad::Var& x) const {
    const int64_t n = x.shape()[0];
    ad::Var z = enc_->forward(x);
    if (z.numel() != n * positions() * cfg_.D)
      throw ConfigError("encoder output " + shape_str(z.shape()) + " does not match " +
                        std::to_string(positions()) + " positions x D=" + std::to_string(cfg_.D));
    return ad::reshape(z, {n * positions(), cfg_.D});
  }

  // single-observation latent grid [h, w, D]
  Tensor encode(const Observation& obs) const {
    ad::NoGradGuard ng;
    Tensor x = preprocess({&obs, 1});
    Tensor z = enc_->forward(ad::Var::constant(x)).val();
    if (!z.all_finite()) throw NumericError("non-finite encoder activations");
    return z.reshape({cfg_.h, cfg_.w, cfg_.D});
  }

  HashCode hash(const Observation& obs) const {
    Tensor z = encode(obs).reshape({positions(), cfg_.D});
    auto [zq, idx] = quantize_rows(z, codebook_.val());
    return indices_to_code(idx);
  }

  std::vector<HashCode> hash_batch(std::span<const Observation> obs) const {
    ad::NoGradGuard ng;
    Tensor x = preprocess(obs);
    Tensor z = encode_batch(ad::Var::constant(x)).val();
    if (!z.all_finite()) throw NumericError("non-finite encoder activations");
    std::vector<HashCode> out;
    const int p = positions();
    for (size_t i = 0; i < obs.size(); ++i) {
      Tensor zi = Tensor::from(
          std::vector<double>(z.data() + static_cast<int64_t>(i) * p * cfg_.D,
                              z.data() + (static_cast<int64_t>(i) + 1) * p * cfg_.D),
          {p, cfg_.D});
      auto [zq, idx] = quantize_rows(zi, codebook_.val());
      out.push_back(indices_to_code(idx));
    }
    return out;
  }

  struct Objective {
    ad::Var total, recon, codebook, commit;
    ad::Var ze;  // encoder latents [n*positions, D], shared with the modulator
    std::vector<int64_t> indices;
  };

  // Loss terms on a preprocessed input batch x [n, ...]:
  //   recon    0.5 * ||x - dec(ze + sg(zq - ze))||^2   (straight-through)
  //   codebook ||sg(ze) - zq||^2                        (moves codebook only)
  //   commit   ||ze - sg(zq)||^2                        (moves encoder only)
  // each averaged over batch rows and summed over remaining dims.
  Objective objective(const ad::Var& x) const {
    const int64_t n = x.shape()[0];
    const double inv_n = 1.0 / static_cast<double>(n);
    ad::Var ze = encode_batch(x);
    auto [zq_vals, idx] = quantize_rows(ze.val(), codebook_.val());
    ad::Var zq = ad::gather_rows(codebook_, idx);

    ad::Var st = ad::add(ze, ad::Var::constant(ad::sub(zq, ze).val()));
    ad::Var mu = dec_->forward(ad::reshape(st, {n, cfg_.h, cfg_.w, cfg_.D}));
    Objective o;
    o.recon = ad::smul(ad::sum_all(ad::square(ad::sub(x, mu))), 0.5 * inv_n);
    o.codebook = ad::smul(ad::sum_all(ad::square(ad::sub(ze.detach(), zq))), inv_n);
    o.commit = ad::smul(ad::sum_all(ad::square(ad::sub(ze, ad::Var::constant(zq_vals)))), inv_n);
    o.total = ad::add(ad::add(o.recon, o.codebook), o.commit);
    if (!o.total.val().all_finite()) throw NumericError("non-finite vq objective");
    o.ze = ze;
    o.indices = std::move(idx);
    return o;
  }

  void collect(ParamList& out, const std::string& prefix) const {
    enc_->collect(out, prefix + "/enc");
    dec_->collect(out, prefix + "/dec");
    out.push_back({prefix + "/codebook", codebook_});
  }

 private:
  void init_codebook(Rng& rng) {
    const double k = 1.0 / static_cast<double>(cfg_.K);
    codebook_ = ad::Var::leaf(Tensor::rand_uniform({cfg_.K, cfg_.D}, -k, k, rng));
  }

  VqConfig cfg_;
  NetPtr enc_, dec_;
  ad::Var codebook_;
  UpsampleNearest resize_;
};

}  // namespace leco
