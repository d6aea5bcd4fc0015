#pragma once

// Training objectives: VAE, beta-VAE, L-VAE (learned term weights),
// sigma-VAE and the PI-controlled beta of ControlVAE / DynamicVAE.
//
// All reconstruction terms are per-sample sums of squared error averaged
// over the batch, and the KL term is the closed form against N(0, I),
// likewise summed over latent dimensions and averaged over the batch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "lvae/tensor.hpp"

namespace lvae {

enum class Regime : std::uint32_t { vae = 0, beta_vae, l_vae, sigma_vae, control_vae, dynamic_vae };

inline const char* regime_name(Regime r) {
  switch (r) {
    case Regime::vae: return "vae";
    case Regime::beta_vae: return "beta-vae";
    case Regime::l_vae: return "l-vae";
    case Regime::sigma_vae: return "sigma-vae";
    case Regime::control_vae: return "control-vae";
    case Regime::dynamic_vae: return "dynamic-vae";
  }
  return "?";
}

inline Regime parse_regime(const std::string& s) {
  for (auto r : {Regime::vae, Regime::beta_vae, Regime::l_vae, Regime::sigma_vae, Regime::control_vae,
                 Regime::dynamic_vae})
    if (s == regime_name(r)) return r;
  throw std::invalid_argument("unknown regime '" + s + "'");
}

// Squared: sigma_0^2 + sigma_1^2 (the L-VAE objective).
// Log: log sigma_0 + log sigma_1 (homoscedastic weighting), kept for ablations.
enum class WeightRegularizer : std::uint32_t { squared = 0, log = 1 };

struct ControllerState {
  double kl_set = 18.0;
  double k_p = 0.01;
  double k_i = -0.001;
  double integral = 0.0;
  double beta_min = 0.0;
  double beta_max = 200.0;
  double beta_floor = 0.0;
  double beta_current = 0.0;

  static ControllerState control_vae() { return {}; }

  static ControllerState dynamic_vae() {
    ControllerState s;
    s.k_i = -0.005;
    s.beta_floor = 150.0;
    s.beta_current = 150.0;
    return s;
  }
};

struct LossWeights {
  Regime regime = Regime::vae;
  double beta = 1.0;
  Tensor s0 = Tensor::scalar(0.0);  // log sigma_0
  Tensor s1 = Tensor::scalar(0.0);  // log sigma_1
  Tensor log_decoder_sigma = Tensor::scalar(0.0);
  ControllerState controller;
  WeightRegularizer regularizer = WeightRegularizer::squared;

  static LossWeights make(Regime r, double beta = 1.0) {
    LossWeights w;
    w.regime = r;
    w.beta = r == Regime::vae ? 1.0 : beta;
    if (r == Regime::control_vae) w.controller = ControllerState::control_vae();
    if (r == Regime::dynamic_vae) w.controller = ControllerState::dynamic_vae();
    return w;
  }

  double sigma0() const { return std::exp(s0.item()); }
  double sigma1() const { return std::exp(s1.item()); }
  double decoder_sigma() const { return std::exp(log_decoder_sigma.item()); }

  // The scalars that take part in optimization for the active regime.
  std::vector<Tensor*> learnables() {
    if (regime == Regime::l_vae) return {&s0, &s1};
    if (regime == Regime::sigma_vae) return {&log_decoder_sigma};
    return {};
  }
};

struct LossReport {
  double total = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double effective_beta = 1.0;
  double regularizer = 0.0;
};

struct RegimeLoss {
  Var total;
  LossReport report;
};

inline Var recon_mse(const Var& x, const Var& xbar) {
  if (x.shape() != xbar.shape())
    throw ShapeError("recon_mse: shape mismatch " + to_string(x.shape()) + " vs " + to_string(xbar.shape()));
  const double batch = static_cast<double>(x.shape()[0]);
  return scale(sum(square(sub(x, xbar))), 1.0 / batch);
}

inline Var kl_gauss(const Var& mu, const Var& logvar) {
  if (mu.shape() != logvar.shape())
    throw ShapeError("kl_gauss: shape mismatch " + to_string(mu.shape()) + " vs " + to_string(logvar.shape()));
  const double batch = static_cast<double>(mu.shape()[0]);
  Var inner = sub(add_scalar(add(square(mu), exp(logvar)), -1.0), logvar);
  return scale(sum(inner), 0.5 / batch);
}

inline RegimeLoss beta_vae_loss(const Var& recon, const Var& kl, double beta) {
  if (beta < 0.0) throw std::invalid_argument("beta_vae_loss: beta must be >= 0");
  Var total = add(recon, scale(kl, beta));
  return {total, {total.value().item(), recon.value().item(), kl.value().item(), beta, 0.0}};
}

inline double effective_beta(const LossWeights& w) {
  switch (w.regime) {
    case Regime::vae: return 1.0;
    case Regime::beta_vae: return w.beta;
    case Regime::l_vae: return std::exp(2.0 * (w.s0.item() - w.s1.item()));
    case Regime::sigma_vae: return 1.0;
    case Regime::control_vae:
    case Regime::dynamic_vae: return w.controller.beta_current;
  }
  return 1.0;
}

// total = recon / sigma_0^2 + kl / sigma_1^2 + reg, sigma_i = exp(s_i).
inline RegimeLoss lvae_loss(const Var& recon, const Var& kl, const Var& s0, const Var& s1,
                            WeightRegularizer reg = WeightRegularizer::squared) {
  Var w0 = exp(scale(s0, -2.0));
  Var w1 = exp(scale(s1, -2.0));
  Var weighted = add(mul(recon, w0), mul(kl, w1));
  Var r = reg == WeightRegularizer::squared ? add(exp(scale(s0, 2.0)), exp(scale(s1, 2.0))) : add(s0, s1);
  Var total = add(weighted, r);
  LossReport rep{total.value().item(), recon.value().item(), kl.value().item(),
                 std::exp(2.0 * (s0.value().item() - s1.value().item())), r.value().item()};
  return {total, rep};
}

// total = SSE / (2 sigma_d^2) + D log sigma_d + kl, one shared decoder sigma.
inline RegimeLoss sigma_vae_loss(const Var& x, const Var& xbar, const Var& kl, const Var& log_sigma) {
  Var sse = recon_mse(x, xbar);
  const double d = static_cast<double>(x.value().numel() / x.shape()[0]);
  Var nll = mul(sse, scale(exp(scale(log_sigma, -2.0)), 0.5));
  Var norm = scale(log_sigma, d);
  Var total = add(add(nll, norm), kl);
  return {total, {total.value().item(), sse.value().item(), kl.value().item(), 1.0, norm.value().item()}};
}

// PI update with a logistic proportional term:
//   e = kl_set - kl, I += e, beta = k_p / (1 + exp(e)) + k_i * I + floor
// clamped to [beta_min, beta_max]. k_i is negative, so a KL below the
// set point lowers beta. The floor is the initial beta (0 for ControlVAE,
// 150 for DynamicVAE, which then decays from there).
inline ControllerState controller_step(ControllerState s, double kl_observed) {
  if (!std::isfinite(kl_observed)) throw std::invalid_argument("controller_step: non-finite KL");
  const double e = s.kl_set - kl_observed;
  s.integral += e;
  // 1 / (1 + exp(e)) without overflow for large |e|
  const double logistic = e >= 0.0 ? std::exp(-e) / (1.0 + std::exp(-e)) : 1.0 / (1.0 + std::exp(e));
  const double b = s.k_p * logistic + s.k_i * s.integral + s.beta_floor;
  s.beta_current = std::clamp(b, s.beta_min, s.beta_max);
  return s;
}

}  // namespace lvae
