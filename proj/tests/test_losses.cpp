#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lvae/losses.hpp"

using namespace lvae;

namespace {

Var c(Tape& t, double v) { return t.constant(Tensor::scalar(v)); }

Var rows(Tape& t, Shape s, std::vector<double> v) { return t.constant(Tensor(std::move(s), std::move(v))); }

}  // namespace

TEST(Recon, Examples) {
  Tape t;
  Var x = rows(t, {2, 2}, {0.3, 0.7, 0.1, 0.9});
  EXPECT_DOUBLE_EQ(recon_mse(x, x).value().item(), 0.0);
  EXPECT_DOUBLE_EQ(recon_mse(rows(t, {1, 2}, {1, 0}), rows(t, {1, 2}, {0, 0})).value().item(), 1.0);
  // per-sample sums 4 and 2
  EXPECT_DOUBLE_EQ(recon_mse(rows(t, {2, 2}, {2, 0, 1, 1}), rows(t, {2, 2}, {0, 0, 0, 0})).value().item(), 3.0);
  EXPECT_THROW(recon_mse(rows(t, {1, 2}, {0, 0}), rows(t, {2, 1}, {0, 0})), ShapeError);
}

TEST(Kl, ClosedFormExamples) {
  Tape t;
  EXPECT_DOUBLE_EQ(kl_gauss(rows(t, {1, 1}, {0}), rows(t, {1, 1}, {0})).value().item(), 0.0);
  EXPECT_DOUBLE_EQ(kl_gauss(rows(t, {1, 1}, {1}), rows(t, {1, 1}, {0})).value().item(), 0.5);
  EXPECT_NEAR(kl_gauss(rows(t, {1, 1}, {0}), rows(t, {1, 1}, {1})).value().item(), 0.359141, 1e-6);
}

TEST(Kl, SumsDimensionsAndAveragesBatch) {
  Tape t;
  // Two samples: KL 0.5 + 0.5 for the first, 0 for the second.
  Var mu = rows(t, {2, 2}, {1, 1, 0, 0});
  Var lv = rows(t, {2, 2}, {0, 0, 0, 0});
  EXPECT_DOUBLE_EQ(kl_gauss(mu, lv).value().item(), 0.5);
}

TEST(BetaVae, Examples) {
  Tape t;
  EXPECT_DOUBLE_EQ(beta_vae_loss(c(t, 4), c(t, 1), 1.0).report.total, 5.0);
  EXPECT_DOUBLE_EQ(beta_vae_loss(c(t, 4), c(t, 1), 2.0).report.total, 6.0);
  EXPECT_DOUBLE_EQ(beta_vae_loss(c(t, 4), c(t, 1), 0.0).report.total, 4.0);
  EXPECT_THROW(beta_vae_loss(c(t, 4), c(t, 1), -1.0), std::invalid_argument);
}

TEST(Lvae, Examples) {
  Tape t;
  EXPECT_DOUBLE_EQ(lvae_loss(c(t, 4), c(t, 1), c(t, 0.0), c(t, 0.0)).report.total, 7.0);
  // sigma0 = sqrt(2) -> s0 = ln(2)/2
  EXPECT_NEAR(lvae_loss(c(t, 4), c(t, 1), c(t, 0.5 * std::log(2.0)), c(t, 0.0)).report.total, 6.0, 1e-12);
}

TEST(Lvae, InitializationIdentity) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  for (int i = 0; i < 50; ++i) {
    Tape t;
    const double r = u(rng), k = u(rng);
    EXPECT_EQ(lvae_loss(c(t, r), c(t, k), c(t, 0), c(t, 0)).report.total,
              beta_vae_loss(c(t, r), c(t, k), 1.0).report.total + 2.0);
  }
}

TEST(Lvae, StationaryPointInSigma) {
  // d total / d sigma0 = -2 recon / sigma0^3 + 2 sigma0 vanishes at recon^(1/4).
  for (double recon : {16.0, 3.0, 81.0}) {
    const double s0 = std::log(std::pow(recon, 0.25));
    Tape t;
    Var a = t.leaf(Tensor::scalar(s0));
    Gradients g = t.backward(lvae_loss(c(t, recon), c(t, 2.0), a, c(t, 0.0)).total);
    EXPECT_NEAR(g.grad(a)[0], 0.0, 1e-12);
  }
}

TEST(Lvae, GradientInSigmaMatchesFiniteDifferences) {
  for (auto reg : {WeightRegularizer::squared, WeightRegularizer::log}) {
    MultiFunction f = [reg](Tape& t, std::span<const Var> v) {
      return lvae_loss(c(t, 12.5), c(t, 3.25), v[0], v[1], reg).total;
    };
    EXPECT_LT(finite_difference_check(f, {Tensor::scalar(0.3), Tensor::scalar(-0.4)}, 1e-5), 1e-6);
  }
}

TEST(SigmaVae, UnitSigmaIsHalfRecon) {
  Tape t;
  Var x = rows(t, {2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  Var xb = rows(t, {2, 3}, {0.0, 0.4, 0.3, 0.9, 0.5, 0.1});
  const double recon = recon_mse(x, xb).value().item();
  EXPECT_DOUBLE_EQ(sigma_vae_loss(x, xb, c(t, 0.0), c(t, 0.0)).report.total, 0.5 * recon);
  EXPECT_DOUBLE_EQ(sigma_vae_loss(x, x, c(t, 1.25), c(t, 0.0)).report.total, 1.25);
}

TEST(SigmaVae, StationaryAtMleVariance) {
  // sigma_d^2 = SSE / D with SSE the batch-mean per-sample sum.
  Tape t;
  Var x = rows(t, {2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  Var xb = rows(t, {2, 3}, {0.0, 0.4, 0.3, 0.9, 0.5, 0.1});
  const double sse = recon_mse(x, xb).value().item();
  Var ls = t.leaf(Tensor::scalar(0.5 * std::log(sse / 3.0)));
  Gradients g = t.backward(sigma_vae_loss(x, xb, c(t, 0.0), ls).total);
  EXPECT_NEAR(g.grad(ls)[0], 0.0, 1e-12);
}

TEST(Controller, Defaults) {
  const auto a = ControllerState::control_vae();
  EXPECT_EQ(a.kl_set, 18.0);
  EXPECT_EQ(a.k_p, 0.01);
  EXPECT_EQ(a.k_i, -0.001);
  EXPECT_EQ(a.beta_current, 0.0);
  const auto d = ControllerState::dynamic_vae();
  EXPECT_EQ(d.kl_set, 18.0);
  EXPECT_EQ(d.k_i, -0.005);
  EXPECT_EQ(d.beta_current, 150.0);
}

TEST(Controller, ZeroErrorFixedPoint) {
  for (auto s : {ControllerState::control_vae(), ControllerState::dynamic_vae()}) {
    for (int i = 0; i < 100; ++i) {
      s = controller_step(s, 18.0);
      EXPECT_EQ(s.integral, 0.0);
      EXPECT_DOUBLE_EQ(s.beta_current, s.k_p / 2.0 + s.beta_floor);
    }
  }
}

TEST(Controller, ClampAndDirection) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> kl(0.0, 500.0);
  auto s = ControllerState::control_vae();
  for (int i = 0; i < 5000; ++i) {
    s = controller_step(s, kl(rng));
    ASSERT_GE(s.beta_current, s.beta_min);
    ASSERT_LE(s.beta_current, s.beta_max);
  }
  // KL persistently above the set point raises beta; below lowers it.
  auto up = ControllerState::control_vae();
  for (int i = 0; i < 100; ++i) up = controller_step(up, 30.0);
  EXPECT_GT(up.beta_current, 1.0);
  auto down = ControllerState::dynamic_vae();
  for (int i = 0; i < 100; ++i) down = controller_step(down, 5.0);
  EXPECT_LT(down.beta_current, 150.0);
  EXPECT_THROW(controller_step(up, std::nan("")), std::invalid_argument);
}

TEST(Controller, Deterministic) {
  auto a = ControllerState::dynamic_vae(), b = a;
  for (double k : {3.0, 40.0, 18.0, 0.5}) {
    a = controller_step(a, k);
    b = controller_step(b, k);
  }
  EXPECT_EQ(a.beta_current, b.beta_current);
  EXPECT_EQ(a.integral, b.integral);
}

TEST(EffectiveBeta, PerRegime) {
  EXPECT_EQ(effective_beta(LossWeights::make(Regime::vae, 7.0)), 1.0);
  EXPECT_EQ(effective_beta(LossWeights::make(Regime::beta_vae, 4.0)), 4.0);
  auto l = LossWeights::make(Regime::l_vae);
  EXPECT_EQ(effective_beta(l), 1.0);
  // Stationary sigmas of frozen recon 16 and kl 4: sigma_i = L_i^(1/4).
  l.s0 = Tensor::scalar(std::log(2.0));
  l.s1 = Tensor::scalar(0.25 * std::log(4.0));
  EXPECT_NEAR(effective_beta(l), 2.0, 1e-12);
  EXPECT_EQ(effective_beta(LossWeights::make(Regime::dynamic_vae)), 150.0);
}

TEST(Regime, NamesRoundTrip) {
  for (auto r : {Regime::vae, Regime::beta_vae, Regime::l_vae, Regime::sigma_vae, Regime::control_vae,
                 Regime::dynamic_vae})
    EXPECT_EQ(parse_regime(regime_name(r)), r);
  EXPECT_THROW(parse_regime("gamma-vae"), std::invalid_argument);
}

TEST(Properties, CommonScalingKeepsGradientDirection) {
  // Fixed-beta objective: scaling both terms by k scales the gradient by k.
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor mu0({3, 2}), lv0({3, 2});
  for (auto& v : mu0.data()) v = u(rng);
  for (auto& v : lv0.data()) v = u(rng);
  auto grad = [&](double k) {
    Tape t;
    Var mu = t.leaf(mu0), lv = t.leaf(lv0);
    Var recon = scale(sum(square(mu)), k);
    Var kl = scale(kl_gauss(mu, lv), k);
    Gradients g = t.backward(beta_vae_loss(recon, kl, 3.0).total);
    return std::make_pair(g.grad(mu), g.grad(lv));
  };
  const auto g1 = grad(1.0), g5 = grad(5.0);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(g5.first[i], 5.0 * g1.first[i], 1e-12);
    EXPECT_NEAR(g5.second[i], 5.0 * g1.second[i], 1e-12);
  }
}
