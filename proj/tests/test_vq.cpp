#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "leco/gridworld.hpp"
#include "leco/vq.hpp"

using namespace leco;
namespace ad = leco::ad;

namespace {

struct IdentityNet : Net {
  ad::Var forward(const ad::Var& x) const override { return x; }
  void collect(ParamList&, const std::string&) const override {}
};

// toy instance from the gradient-contract check: two positions, K=2, D=2
struct Toy {
  VqModel model;
  ParamList params;
  Tensor x;

  explicit Toy(uint64_t seed) {
    Rng rng(seed);
    VqConfig cfg;
    cfg.w = 2;
    cfg.h = 1;
    cfg.K = 2;
    cfg.D = 2;
    auto enc = std::make_shared<Mlp>(std::vector<int64_t>{4, 4}, rng);
    auto dec = std::make_shared<Mlp>(std::vector<int64_t>{4, 4}, rng);
    model = VqModel(cfg, enc, dec, rng);
    model.collect(params, "vq");
    x = Tensor::rand_uniform({1, 4}, -1.0, 1.0, rng);
  }
};

double rel_err(const Tensor& a, const Tensor& b) {
  double num = 0, den = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-14);
}

Observation some_obs(uint64_t seed) {
  WorldConfig c;
  c.seed = seed;
  c.num_rooms = 2;
  c.room_size = 4;
  c.max_episode_steps = 200;
  return World::generate(c).observe();
}

}  // namespace

TEST(VqEncode, ZeroInputThroughZeroLinearEncoderGivesZeroGrid) {
  Rng rng(3);
  VqConfig cfg;
  cfg.w = 2;
  cfg.h = 1;
  cfg.K = 2;
  cfg.D = 2;
  auto enc = std::make_shared<Mlp>(std::vector<int64_t>{4, 4}, rng);
  auto dec = std::make_shared<Mlp>(std::vector<int64_t>{4, 4}, rng);
  VqModel m(cfg, enc, dec, rng);
  ParamList ps;
  m.collect(ps, "vq");
  for (Param& p : ps)
    if (p.name.find("enc") != std::string::npos) p.v.n->value = Tensor::zeros(p.v.shape());
  ad::Var z = m.encode_batch(ad::Var::constant(Tensor::zeros({1, 4})));
  for (int64_t i = 0; i < z.numel(); ++i) EXPECT_EQ(z.val()[i], 0.0);
}

TEST(VqEncode, DeterministicAcrossCalls) {
  Rng rng(5);
  VqConfig cfg;
  cfg.channels = 4;
  cfg.D = 4;
  VqModel m(cfg, rng);
  Observation o = some_obs(9);
  Tensor a = m.encode(o);
  Tensor b = m.encode(o);
  EXPECT_EQ(a.max_abs_diff(b), 0.0);
  EXPECT_EQ(a.shape(), (Shape{cfg.h, cfg.w, cfg.D}));
}

TEST(VqEncode, PaperScaleConfigYields3x3x64) {
  Rng rng(7);
  VqConfig cfg;
  cfg.w = 3;
  cfg.h = 3;
  cfg.K = 8;
  cfg.D = 64;
  cfg.channels = 64;
  VqModel m(cfg, rng);
  Tensor z = m.encode(some_obs(11));
  EXPECT_EQ(z.shape(), (Shape{3, 3, 64}));
  // flattened latent width feeding the modulator
  EXPECT_EQ(z.numel(), 576);
}

TEST(VqObjective, PerfectReconstructionAtCodebookEntriesIsZeroLoss) {
  Rng rng(13);
  VqConfig cfg;
  cfg.w = 2;
  cfg.h = 1;
  cfg.K = 2;
  cfg.D = 2;
  VqModel m(cfg, std::make_shared<IdentityNet>(), std::make_shared<IdentityNet>(), rng);
  // input rows equal to codebook entries: ze = x = zq, dec(st) = x
  const Tensor& cb = m.codebook().val();
  Tensor x = Tensor::from({cb.at(0, 0), cb.at(0, 1), cb.at(1, 0), cb.at(1, 1)}, {1, 4});
  auto obj = m.objective(ad::Var::constant(x));
  EXPECT_NEAR(obj.total.item(), 0.0, 1e-24);
  EXPECT_NEAR(obj.recon.item(), 0.0, 1e-24);
  EXPECT_NEAR(obj.codebook.item(), 0.0, 1e-24);
  EXPECT_NEAR(obj.commit.item(), 0.0, 1e-24);
}

TEST(VqObjective, CodebookGradientZeroAtStationaryPoint) {
  Rng rng(17);
  VqConfig cfg;
  cfg.w = 2;
  cfg.h = 1;
  cfg.K = 2;
  cfg.D = 2;
  VqModel m(cfg, std::make_shared<IdentityNet>(), std::make_shared<IdentityNet>(), rng);
  const Tensor& cb = m.codebook().val();
  Tensor x = Tensor::from({cb.at(0, 0), cb.at(0, 1), cb.at(1, 0), cb.at(1, 1)}, {1, 4});
  auto obj = m.objective(ad::Var::constant(x));
  Tensor g = ad::grad(obj.codebook, {m.codebook()})[0].val();
  for (int64_t i = 0; i < g.numel(); ++i) EXPECT_EQ(g[i], 0.0);
}

// The gradient contract of the three loss terms, checked against central
// finite differences on the toy instance. Terms whose stop-gradients freeze
// the perturbed quantity are differentiated on the frozen surrogate.
TEST(VqObjective, GradientTermsMatchFiniteDifferences) {
  Toy toy(19);
  VqModel& m = toy.model;
  ad::Var xv = ad::Var::constant(toy.x);
  const double h = 1e-6;

  auto deriv = [&](const ad::Var& term, const ad::Var& leaf) {
    return ad::grad(term, {leaf})[0].val();
  };

  // --- decoder params, reconstruction term: plain finite differences
  for (Param& p : toy.params) {
    if (p.name.find("dec") == std::string::npos) continue;
    auto obj = m.objective(xv);
    Tensor analytic = deriv(obj.recon, p.v);
    Tensor base = p.v.val().clone();
    Tensor fd(base.shape());
    for (int64_t i = 0; i < base.numel(); ++i) {
      Tensor t = base.clone();
      t[i] = base[i] + h;
      p.v.n->value = t;
      const double up = m.objective(xv).recon.item();
      t = base.clone();
      t[i] = base[i] - h;
      p.v.n->value = t;
      const double dn = m.objective(xv).recon.item();
      fd[i] = (up - dn) / (2 * h);
      p.v.n->value = base;
    }
    EXPECT_LT(rel_err(analytic, fd), 1e-4) << p.name;
  }

  // --- codebook params, codebook term: assignments stay fixed locally
  {
    auto obj = m.objective(xv);
    ad::Var cb = m.codebook();
    Tensor analytic = deriv(obj.codebook, cb);
    Tensor base = cb.val().clone();
    Tensor fd(base.shape());
    for (int64_t i = 0; i < base.numel(); ++i) {
      Tensor t = base.clone();
      t[i] = base[i] + h;
      cb.n->value = t;
      const double up = m.objective(xv).codebook.item();
      t = base.clone();
      t[i] = base[i] - h;
      cb.n->value = t;
      const double dn = m.objective(xv).codebook.item();
      fd[i] = (up - dn) / (2 * h);
      cb.n->value = base;
    }
    EXPECT_LT(rel_err(analytic, fd), 1e-4) << "codebook";
  }

  // --- encoder params, commitment term: quantized target frozen in value
  for (Param& p : toy.params) {
    if (p.name.find("enc") == std::string::npos) continue;
    auto obj = m.objective(xv);
    Tensor analytic = deriv(obj.commit, p.v);
    Tensor base = p.v.val().clone();
    Tensor fd(base.shape());
    for (int64_t i = 0; i < base.numel(); ++i) {
      Tensor t = base.clone();
      t[i] = base[i] + h;
      p.v.n->value = t;
      const double up = m.objective(xv).commit.item();
      t = base.clone();
      t[i] = base[i] - h;
      p.v.n->value = t;
      const double dn = m.objective(xv).commit.item();
      fd[i] = (up - dn) / (2 * h);
      p.v.n->value = base;
    }
    EXPECT_LT(rel_err(analytic, fd), 1e-4) << p.name;
  }

  // --- encoder params, reconstruction term through the straight-through
  // path: the correction sg(zq - ze) is frozen at the base point, and the
  // finite differences run over dec(ze(theta) + correction).
  {
    auto obj = m.objective(xv);
    const Tensor correction =
        ad::sub(ad::gather_rows(m.codebook(), obj.indices), obj.ze).val();
    auto surrogate = [&]() {
      ad::NoGradGuard ng;
      ad::Var ze = m.encode_batch(xv);
      ad::Var st = ad::add(ze, ad::Var::constant(correction));
      ad::Var mu = m.decoder_net().forward(ad::reshape(st, {1, 1, 2, 2}));
      return 0.5 * ad::sum_all(ad::square(ad::sub(xv, ad::reshape(mu, xv.shape())))).item();
    };
    for (Param& p : toy.params) {
      if (p.name.find("enc") == std::string::npos) continue;
      Tensor analytic = deriv(m.objective(xv).recon, p.v);
      Tensor base = p.v.val().clone();
      Tensor fd(base.shape());
      for (int64_t i = 0; i < base.numel(); ++i) {
        Tensor t = base.clone();
        t[i] = base[i] + h;
        p.v.n->value = t;
        const double up = surrogate();
        t = base.clone();
        t[i] = base[i] - h;
        p.v.n->value = t;
        const double dn = surrogate();
        fd[i] = (up - dn) / (2 * h);
        p.v.n->value = base;
      }
      EXPECT_LT(rel_err(analytic, fd), 1e-4) << p.name;
    }
  }
}

// Straight-through identity: the reconstruction-term encoder gradient equals
// the gradient of the explicit surrogate ze + sg(zq - ze).
TEST(VqObjective, StraightThroughMatchesExplicitSurrogate) {
  Toy toy(23);
  VqModel& m = toy.model;
  ad::Var xv = ad::Var::constant(toy.x);
  auto obj = m.objective(xv);
  const Tensor correction = ad::sub(ad::gather_rows(m.codebook(), obj.indices), obj.ze).val();

  ad::Var ze = m.encode_batch(xv);
  ad::Var st = ad::add(ze, ad::Var::constant(correction));
  ad::Var mu = m.decoder_net().forward(ad::reshape(st, {1, 1, 2, 2}));
  ad::Var recon = ad::smul(ad::sum_all(ad::square(ad::sub(xv, ad::reshape(mu, xv.shape())))), 0.5);

  for (Param& p : toy.params) {
    if (p.name.find("enc") == std::string::npos) continue;
    Tensor a = ad::grad(obj.recon, {p.v})[0].val();
    Tensor b = ad::grad(recon, {p.v})[0].val();
    EXPECT_LT(a.max_abs_diff(b), 1e-15) << p.name;
  }
}

TEST(VqHash, CapacityAndRangeOnProductionModel) {
  Rng rng(29);
  VqConfig cfg;
  cfg.channels = 4;
  cfg.D = 4;
  VqModel m(cfg, rng);
  for (uint64_t s = 0; s < 10; ++s) {
    HashCode c = m.hash(some_obs(s));
    EXPECT_EQ(c.v.size(), 9u);
    for (int32_t v : c.v) {
      EXPECT_GE(v, 0);
      EXPECT_LT(v, cfg.K);
    }
  }
}

TEST(VqHash, BatchHashMatchesSingleHash) {
  Rng rng(31);
  VqConfig cfg;
  cfg.channels = 4;
  cfg.D = 4;
  VqModel m(cfg, rng);
  std::vector<Observation> obs;
  for (uint64_t s = 0; s < 6; ++s) obs.push_back(some_obs(100 + s));
  auto codes = m.hash_batch(obs);
  for (size_t i = 0; i < obs.size(); ++i) EXPECT_TRUE(codes[i] == m.hash(obs[i]));
}
