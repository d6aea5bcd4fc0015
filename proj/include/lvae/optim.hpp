#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lvae/tensor.hpp"

namespace lvae {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;
};

// Bias-corrected Adam, applied in place. Moments are created lazily on the
// first step so the state mirrors whatever parameter list is passed.
inline void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state, double lr) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape() != grads[i].shape() || state.m[i].shape() != grads[i].shape())
      throw ShapeError("adam_step: parameter " + std::to_string(i) + " shape " + to_string(params[i]->shape()) +
                       " vs gradient " + to_string(grads[i].shape()));

  state.t += 1;
  const auto& c = state.config;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

// Linear warm-up from warm_start_lr to peak_lr over [0, ramp_iters], then
// cosine annealing from peak_lr to final_lr over [ramp_iters, total_iters].
struct LrSchedule {
  double warm_start_lr = 1e-5;
  double peak_lr = 1e-4;
  double final_lr = 1e-6;
  std::int64_t ramp_iters = 150000;
  std::int64_t total_iters = 300000;

  // Desk-scale variant: same anchors, ramp over the first half.
  static LrSchedule scaled(std::int64_t total, double start = 1e-5, double peak = 1e-4, double final = 1e-6) {
    return {start, peak, final, total / 2, total};
  }
};

inline double lr_at(const LrSchedule& s, std::int64_t iter) {
  if (iter < 0 || iter > s.total_iters)
    throw std::out_of_range("lr_at: iteration " + std::to_string(iter) + " outside [0, " +
                            std::to_string(s.total_iters) + "]");
  if (s.ramp_iters < 0 || s.ramp_iters > s.total_iters) throw std::invalid_argument("lr_at: bad ramp length");
  if (iter <= s.ramp_iters) {
    if (s.ramp_iters == 0) return s.peak_lr;
    const double f = static_cast<double>(iter) / static_cast<double>(s.ramp_iters);
    return s.warm_start_lr + (s.peak_lr - s.warm_start_lr) * f;
  }
  const double span = static_cast<double>(s.total_iters - s.ramp_iters);
  const double f = static_cast<double>(iter - s.ramp_iters) / span;
  return s.final_lr + 0.5 * (s.peak_lr - s.final_lr) * (1.0 + std::cos(std::numbers::pi * f));
}

}  // namespace lvae
