#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "leco/autodiff.hpp"
#include "leco/nn.hpp"
#include "leco/rng.hpp"

using leco::Rng;
using leco::Shape;
using leco::Tensor;
namespace ad = leco::ad;

namespace {

// Central finite differences of a scalar function of one tensor.
Tensor fd_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
               double h = 1e-6) {
  Tensor g(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    Tensor xp = x.clone();
    Tensor xm = x.clone();
    xp[i] += h;
    xm[i] -= h;
    g[i] = (f(xp) - f(xm)) / (2.0 * h);
  }
  return g;
}

double rel_err(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

Tensor randn(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

// loss = sum(w ⊙ expr(x)) for a random fixed weighting w, so every output
// element contributes to the checked gradient.
void check_unary(const std::function<ad::Var(const ad::Var&)>& op, const Tensor& x0,
                 Rng& rng, double tol = 1e-6) {
  ad::Var probe = op(ad::Var::constant(x0));
  const Tensor w = randn(probe.shape(), rng);
  auto loss = [&](const Tensor& xt) {
    ad::NoGradGuard ng;
    return ad::dot(op(ad::Var::constant(xt)), ad::Var::constant(w)).item();
  };
  ad::Var x = ad::Var::leaf(x0);
  ad::Var l = ad::dot(op(x), ad::Var::constant(w));
  Tensor g = ad::grad(l, {x})[0].val();
  Tensor fd = fd_grad(loss, x0);
  EXPECT_LT(rel_err(g, fd), tol);
}

}  // namespace

TEST(Autodiff, ElementwiseOpsMatchFiniteDifferences) {
  Rng rng(7);
  const Tensor x = randn({4, 5}, rng);
  check_unary([](const ad::Var& v) { return ad::affine(v, 2.5, -1.0); }, x, rng);
  check_unary([](const ad::Var& v) { return ad::tanh_op(v); }, x, rng);
  check_unary([](const ad::Var& v) { return ad::sigmoid(v); }, x, rng);
  check_unary([](const ad::Var& v) { return ad::exp_op(v); }, x, rng);
  check_unary([](const ad::Var& v) { return ad::square(v); }, x, rng);
  check_unary([](const ad::Var& v) { return ad::mul(v, ad::tanh_op(v)); }, x, rng);

  Tensor xp = x.clone();
  for (int64_t i = 0; i < xp.numel(); ++i) xp[i] = std::abs(xp[i]) + 0.5;
  check_unary([](const ad::Var& v) { return ad::log_op(v); }, xp, rng);
}

TEST(Autodiff, ReluGradientUsesLocalMask) {
  Rng rng(3);
  Tensor x = randn({3, 4}, rng);
  // keep away from the kink so central differences are valid
  for (int64_t i = 0; i < x.numel(); ++i)
    if (std::abs(x[i]) < 0.1) x[i] = 0.2;
  check_unary([](const ad::Var& v) { return ad::relu(v); }, x, rng);
}

TEST(Autodiff, BinaryOpsMatchFiniteDifferences) {
  Rng rng(11);
  const Tensor a0 = randn({3, 4}, rng);
  Tensor b0 = randn({3, 4}, rng);
  for (int64_t i = 0; i < b0.numel(); ++i) b0[i] += (b0[i] >= 0 ? 1.5 : -1.5);
  const Tensor w = randn({3, 4}, rng);

  for (int which = 0; which < 2; ++which) {
    auto build = [&](const ad::Var& a, const ad::Var& b) {
      ad::Var sum = ad::add(ad::mul(a, b), ad::sub(a, ad::div(a, b)));
      return ad::dot(sum, ad::Var::constant(w));
    };
    auto loss = [&](const Tensor& t) {
      ad::NoGradGuard ng;
      ad::Var a = ad::Var::constant(which == 0 ? t : a0);
      ad::Var b = ad::Var::constant(which == 0 ? b0 : t);
      return build(a, b).item();
    };
    ad::Var a = ad::Var::leaf(a0);
    ad::Var b = ad::Var::leaf(b0);
    ad::Var l = build(a, b);
    auto gs = ad::grad(l, {a, b});
    Tensor fd = fd_grad(loss, which == 0 ? a0 : b0);
    EXPECT_LT(rel_err(gs[static_cast<size_t>(which)].val(), fd), 1e-6) << "arg " << which;
  }
}

TEST(Autodiff, MatmulAllTransposeVariants) {
  Rng rng(13);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      Tensor a0 = ta ? randn({4, 3}, rng) : randn({3, 4}, rng);
      Tensor b0 = tb ? randn({5, 4}, rng) : randn({4, 5}, rng);
      Tensor w = randn({3, 5}, rng);
      auto loss_a = [&](const Tensor& t) {
        ad::NoGradGuard ng;
        return ad::dot(ad::matmul(ad::Var::constant(t), ad::Var::constant(b0), ta, tb),
                       ad::Var::constant(w))
            .item();
      };
      auto loss_b = [&](const Tensor& t) {
        ad::NoGradGuard ng;
        return ad::dot(ad::matmul(ad::Var::constant(a0), ad::Var::constant(t), ta, tb),
                       ad::Var::constant(w))
            .item();
      };
      ad::Var a = ad::Var::leaf(a0);
      ad::Var b = ad::Var::leaf(b0);
      ad::Var l = ad::dot(ad::matmul(a, b, ta, tb), ad::Var::constant(w));
      auto gs = ad::grad(l, {a, b});
      EXPECT_LT(rel_err(gs[0].val(), fd_grad(loss_a, a0)), 1e-6) << ta << tb;
      EXPECT_LT(rel_err(gs[1].val(), fd_grad(loss_b, b0)), 1e-6) << ta << tb;
    }
  }
}

TEST(Autodiff, ReductionsBroadcastsIndexing) {
  Rng rng(17);
  const Tensor x = randn({4, 6}, rng);
  check_unary([](const ad::Var& v) { return ad::sum_rows(v); }, x, rng);
  check_unary([](const ad::Var& v) { return ad::sum_cols(v); }, x, rng);
  check_unary([](const ad::Var& v) { return ad::bcast_rows(ad::sum_rows(v), 6); }, x, rng);
  check_unary([](const ad::Var& v) { return ad::slice_cols(v, 1, 4); }, x, rng);
  check_unary([](const ad::Var& v) { return ad::slice_rows(v, 1, 3); }, x, rng);
  check_unary([](const ad::Var& v) { return ad::concat_cols(v, ad::square(v)); }, x, rng);
  check_unary([](const ad::Var& v) { return ad::reshape(v, {6, 4}); }, x, rng);

  const std::vector<int64_t> sel{2, -1, 0, 5};
  check_unary([&](const ad::Var& v) { return ad::select_cols(v, sel); }, x, rng);

  const std::vector<int64_t> ridx{1, 1, -1, 3, 0};
  check_unary([&](const ad::Var& v) { return ad::gather_rows(v, ridx); }, x, rng);
}

TEST(Autodiff, GradAccumulatesOverReusedSubexpressions) {
  Rng rng(19);
  const Tensor x0 = randn({3, 3}, rng);
  auto build = [](const ad::Var& x) {
    ad::Var t = ad::tanh_op(x);
    return ad::add(ad::sum_all(ad::mul(t, t)), ad::sum_all(ad::mul(t, x)));
  };
  auto loss = [&](const Tensor& t) {
    ad::NoGradGuard ng;
    return build(ad::Var::constant(t)).item();
  };
  ad::Var x = ad::Var::leaf(x0);
  Tensor g = ad::grad(build(x), {x})[0].val();
  EXPECT_LT(rel_err(g, fd_grad(loss, x0)), 1e-6);
}

TEST(Autodiff, LogSoftmaxAndEntropy) {
  Rng rng(23);
  const Tensor x = randn({5, 7}, rng, 3.0);
  check_unary([](const ad::Var& v) { return ad::log_softmax_rows(v); }, x, rng, 1e-5);

  // softmax rows sum to one
  ad::Var p = ad::softmax_rows(ad::Var::constant(x));
  for (int64_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < 7; ++j) s += p.val().at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }

  // uniform logits have entropy log(n)
  ad::Var e = ad::entropy_rows(ad::Var::constant(Tensor::full({2, 7}, 0.42)));
  EXPECT_NEAR(e.val()[0], std::log(7.0), 1e-12);
}

TEST(Autodiff, SecondOrderGradMatchesFiniteDifferencesOfFirstGrad) {
  Rng rng(29);
  const Tensor x0 = randn({3, 2}, rng);
  const Tensor r = randn({3, 2}, rng);

  auto first_grad = [&](const Tensor& xt) {
    ad::Var x = ad::Var::leaf(xt);
    ad::Var y = ad::sum_all(ad::square(ad::tanh_op(x)));
    return ad::grad(y, {x})[0].val();
  };
  // phi(x) = <r, d/dx sum(tanh(x)^2)>
  auto phi = [&](const Tensor& xt) {
    Tensor g = first_grad(xt);
    double s = 0.0;
    for (int64_t i = 0; i < g.numel(); ++i) s += g[i] * r[i];
    return s;
  };

  ad::Var x = ad::Var::leaf(x0);
  ad::Var y = ad::sum_all(ad::square(ad::tanh_op(x)));
  ad::Var g = ad::grad(y, {x}, /*create_graph=*/true)[0];
  ad::Var s = ad::dot(g, ad::Var::constant(r));
  Tensor gg = ad::grad(s, {x})[0].val();
  EXPECT_LT(rel_err(gg, fd_grad(phi, x0, 1e-5)), 1e-5);
}

// Differentiate an objective through a gradient-ascent parameter update,
// the exact structure the meta-update relies on.
TEST(Autodiff, GradThroughInnerUpdateStep) {
  Rng rng(31);
  const Tensor th0 = randn({2, 2}, rng);
  const Tensor w0 = randn({2, 2}, rng);
  const double eta = 0.37;

  // inner J(theta, w) = sum(tanh(theta) ⊙ w), update theta' = theta + eta dJ/dtheta,
  // outer L(theta') = sum(theta'^2); checked against finite differences in w.
  auto outer_of = [&](const Tensor& wt) {
    ad::Var th = ad::Var::leaf(th0);
    ad::Var w = ad::Var::leaf(wt);
    ad::Var j = ad::sum_all(ad::mul(ad::tanh_op(th), w));
    ad::Var g = ad::grad(j, {th}, true)[0];
    ad::Var thp = ad::add(th, ad::smul(g, eta));
    return ad::sum_all(ad::square(thp));
  };

  ad::Var w = ad::Var::leaf(w0);
  ad::Var th = ad::Var::leaf(th0);
  ad::Var j = ad::sum_all(ad::mul(ad::tanh_op(th), w));
  ad::Var g = ad::grad(j, {th}, true)[0];
  ad::Var thp = ad::add(th, ad::smul(g, eta));
  ad::Var outer = ad::sum_all(ad::square(thp));
  Tensor gw = ad::grad(outer, {w})[0].val();

  auto loss = [&](const Tensor& wt) { return outer_of(wt).item(); };
  EXPECT_LT(rel_err(gw, fd_grad(loss, w0, 1e-6)), 1e-6);

  // eta = 0 removes the only path, so the gradient must vanish exactly
  ad::Var thp0 = ad::add(th, ad::smul(g, 0.0));
  Tensor gz = ad::grad(ad::sum_all(ad::square(thp0)), {w})[0].val();
  for (int64_t i = 0; i < gz.numel(); ++i) EXPECT_EQ(gz[i], 0.0);
}

TEST(Autodiff, NoGradModeProducesConstants) {
  ad::NoGradGuard ng;
  ad::Var x = ad::Var::leaf(Tensor::full({2, 2}, 1.0));
  ad::Var y = ad::tanh_op(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, ConstantRootYieldsZeroGrads) {
  ad::Var x = ad::Var::leaf(Tensor::full({2}, 3.0));
  ad::Var y = ad::Var::constant(Tensor::scalar(5.0));
  Tensor g = ad::grad(y, {x})[0].val();
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.0);
}

TEST(NN, LinearAndMlpGradients) {
  Rng rng(41);
  leco::Mlp net({3, 5, 2}, rng);
  leco::ParamList ps;
  net.collect(ps, "mlp");
  ASSERT_EQ(ps.size(), 4u);

  const Tensor x = randn({4, 3}, rng);
  const Tensor w = randn({4, 2}, rng);
  auto loss_value = [&]() {
    return ad::dot(net.forward(ad::Var::constant(x)), ad::Var::constant(w)).item();
  };
  ad::Var l = ad::dot(net.forward(ad::Var::constant(x)), ad::Var::constant(w));
  auto gs = ad::grad(l, leco::param_vars(ps));
  for (size_t pi = 0; pi < ps.size(); ++pi) {
    const Tensor base = ps[pi].v.val().clone();
    Tensor fd(base.shape());
    const double h = 1e-6;
    for (int64_t i = 0; i < base.numel(); ++i) {
      Tensor t = base.clone();
      t[i] = base[i] + h;
      ps[pi].v.n->value = t;
      const double up = loss_value();
      t = base.clone();
      t[i] = base[i] - h;
      ps[pi].v.n->value = t;
      const double dn = loss_value();
      fd[i] = (up - dn) / (2.0 * h);
      ps[pi].v.n->value = base;
    }
    EXPECT_LT(rel_err(gs[pi].val(), fd), 1e-5) << ps[pi].name;
  }
}

TEST(NN, ConvMatchesDirectConvolution) {
  Rng rng(43);
  leco::Conv2d conv(2, 3, 3, 2, 1, rng);
  const Tensor x = randn({2, 5, 5, 2}, rng);
  ad::Var y = conv.forward(ad::Var::constant(x));
  ASSERT_EQ(y.shape(), (Shape{2, 3, 3, 3}));

  leco::ParamList ps;
  conv.collect(ps, "conv");
  const Tensor& w = ps[0].v.val();
  const Tensor& b = ps[1].v.val();

  // direct nested-loop convolution oracle
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 3; ++j)
        for (int64_t co = 0; co < 3; ++co) {
          double s = b[co];
          for (int64_t ki = 0; ki < 3; ++ki)
            for (int64_t kj = 0; kj < 3; ++kj) {
              const int64_t hi = i * 2 - 1 + ki;
              const int64_t wi = j * 2 - 1 + kj;
              if (hi < 0 || hi >= 5 || wi < 0 || wi >= 5) continue;
              for (int64_t c = 0; c < 2; ++c)
                s += x[((n * 5 + hi) * 5 + wi) * 2 + c] *
                     w.at((ki * 3 + kj) * 2 + c, co);
            }
          const double got = y.val()[((n * 3 + i) * 3 + j) * 3 + co];
          EXPECT_NEAR(got, s, 1e-12);
        }
}

TEST(NN, ConvGradientMatchesFiniteDifferences) {
  Rng rng(47);
  leco::Conv2d conv(2, 2, 3, 1, 1, rng);
  const Tensor x0 = randn({1, 4, 4, 2}, rng);
  ad::Var probe = conv.forward(ad::Var::constant(x0));
  const Tensor w = randn(probe.shape(), rng);
  auto loss = [&](const Tensor& t) {
    ad::NoGradGuard ng;
    return ad::dot(conv.forward(ad::Var::constant(t)), ad::Var::constant(w)).item();
  };
  ad::Var x = ad::Var::leaf(x0);
  Tensor g = ad::grad(ad::dot(conv.forward(x), ad::Var::constant(w)), {x})[0].val();
  EXPECT_LT(rel_err(g, fd_grad(loss, x0)), 1e-6);
}

TEST(NN, LstmStepGradientMatchesFiniteDifferences) {
  Rng rng(53);
  leco::LstmCell cell(3, 4, rng);
  const Tensor x0 = randn({2, 3}, rng);
  const Tensor w = randn({2, 4}, rng);
  auto loss = [&](const Tensor& t) {
    ad::NoGradGuard ng;
    auto s = cell.zero_state(2);
    auto s2 = cell.step(ad::Var::constant(t), s);
    auto s3 = cell.step(ad::Var::constant(t), s2);
    return ad::dot(s3.h, ad::Var::constant(w)).item();
  };
  ad::Var x = ad::Var::leaf(x0);
  auto s = cell.zero_state(2);
  auto s2 = cell.step(x, s);
  auto s3 = cell.step(x, s2);
  Tensor g = ad::grad(ad::dot(s3.h, ad::Var::constant(w)), {x})[0].val();
  EXPECT_LT(rel_err(g, fd_grad(loss, x0)), 1e-5);
}

TEST(NN, AdamDescendsQuadratic)
{
  Rng rng(59);
  leco::ParamList ps;
  ps.push_back({"x", ad::Var::leaf(Tensor::full({4}, 5.0))});
  leco::Adam opt(0.1);
  for (int i = 0; i < 2000; ++i) {
    ad::Var l = ad::sum_all(ad::square(ps[0].v));
    auto g = ad::grad(l, {ps[0].v});
    opt.step(ps, leco::grad_values(g));
  }
  for (int64_t i = 0; i < 4; ++i) EXPECT_NEAR(ps[0].v.val()[i], 0.0, 1e-3);
}
