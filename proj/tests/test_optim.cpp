#include <gtest/gtest.h>

#include <cmath>

#include "lvae/optim.hpp"

using namespace lvae;

namespace {

void step(Tensor& p, const Tensor& g, AdamState& s, double lr) {
  std::vector<Tensor*> ps{&p};
  std::vector<Tensor> gs{g};
  adam_step(ps, gs, s, lr);
}

}  // namespace

TEST(Adam, FirstStepMagnitudeIsLr) {
  Tensor p = Tensor::scalar(0.0);
  AdamState s;
  step(p, Tensor::scalar(1.0), s, 0.1);
  EXPECT_NEAR(p[0], -0.1, 1e-8);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor p = Tensor::vector({1.5, -2.0});
  AdamState s;
  for (int i = 0; i < 50; ++i) step(p, Tensor::vector({0.0, 0.0}), s, 0.1);
  EXPECT_EQ(p, Tensor::vector({1.5, -2.0}));
}

TEST(Adam, ConstantGradientSaturatesToLrSign) {
  Tensor p = Tensor::vector({0.0, 0.0});
  AdamState s;
  double last0 = 0, last1 = 0;
  for (int i = 0; i < 5000; ++i) {
    const double b0 = p[0], b1 = p[1];
    step(p, Tensor::vector({0.3, -7.0}), s, 0.01);
    last0 = p[0] - b0;
    last1 = p[1] - b1;
  }
  EXPECT_NEAR(last0, -0.01, 1e-6);
  EXPECT_NEAR(last1, 0.01, 1e-6);
}

TEST(Adam, ConvergesOnQuadratic) {
  Tensor x = Tensor::scalar(1.0);
  AdamState s;
  int reached = -1;
  for (int i = 0; i < 2000; ++i) {
    step(x, Tensor::scalar(2.0 * x[0]), s, 0.01);
    if (std::abs(x[0]) < 1e-3) {
      reached = i;
      break;
    }
  }
  EXPECT_GE(reached, 0) << "final x " << x[0];
}

TEST(Adam, ShapeAndArgumentErrors) {
  Tensor p({2, 2});
  AdamState s;
  EXPECT_THROW(step(p, Tensor({4}), s, 0.1), ShapeError);
  EXPECT_THROW(step(p, Tensor({2, 2}), s, 0.0), std::invalid_argument);
  std::vector<Tensor*> ps{&p};
  std::vector<Tensor> none;
  EXPECT_THROW(adam_step(ps, none, s, 0.1), ShapeError);
}

TEST(Adam, Deterministic) {
  auto run = [] {
    Tensor p = Tensor::vector({0.2, -0.4, 0.9});
    AdamState s;
    for (int i = 0; i < 200; ++i) step(p, Tensor::vector({p[0] * p[1], std::sin(p[2]), p[0] - 1.0}), s, 0.003);
    return p;
  };
  EXPECT_EQ(run(), run());
}

TEST(Schedule, Anchors) {
  const LrSchedule s;
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 1e-5);
  EXPECT_DOUBLE_EQ(lr_at(s, s.ramp_iters), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(s, s.total_iters), 1e-6);
  EXPECT_THROW(lr_at(s, -1), std::out_of_range);
  EXPECT_THROW(lr_at(s, s.total_iters + 1), std::out_of_range);
}

TEST(Schedule, MonotoneOnEachPhase) {
  for (const LrSchedule s : {LrSchedule{}, LrSchedule::scaled(1000), LrSchedule{1e-4, 1e-3, 1e-6, 10, 37}}) {
    for (std::int64_t i = 1; i <= s.ramp_iters; ++i) EXPECT_GE(lr_at(s, i), lr_at(s, i - 1));
    for (std::int64_t i = s.ramp_iters + 1; i <= s.total_iters; ++i) EXPECT_LE(lr_at(s, i), lr_at(s, i - 1));
  }
}

TEST(Schedule, ScaledKeepsAnchors) {
  const auto s = LrSchedule::scaled(20000);
  EXPECT_EQ(s.ramp_iters, 10000);
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 1e-5);
  EXPECT_DOUBLE_EQ(lr_at(s, 10000), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at(s, 20000), 1e-6);
}
