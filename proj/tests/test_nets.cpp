#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lvae/nets.hpp"

using namespace lvae;

namespace {

Tensor uniform(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace

TEST(Mlp, EncoderWidthIsTwiceLatent) {
  const VaeModel m = build_mlp(5, {16, 16, 1}, 32, 1);
  EXPECT_EQ(m.encoder_output_width(), 10u);
  EXPECT_EQ(m.decoder_output_width(), 256u);
  Tape t;
  BoundModel bm(t, m, false);
  EncoderOutput e = bm.encode(t.constant(uniform({3, 256}, 2)));
  EXPECT_EQ(e.mu.shape(), (Shape{3, 5}));
  EXPECT_EQ(e.logvar.shape(), (Shape{3, 5}));
}

TEST(Mlp, ParameterCountForHiddenEight) {
  const VaeModel m = build_mlp(5, {16, 16, 1}, 8, 1);
  std::size_t enc = 0;
  for (std::size_t i = 0; i < m.params.size(); ++i)
    if (m.names[i].rfind("enc.", 0) == 0) enc += m.params[i].numel();
  EXPECT_EQ(enc, (256u * 8 + 8) + (8 * 8 + 8) + (8 * 10 + 10));
  EXPECT_EQ(m.parameter_count(), enc + (5u * 8 + 8) + (8 * 8 + 8) + (8 * 256 + 256));
}

TEST(Mlp, TinyImageDecoderInUnitInterval) {
  const VaeModel m = build_mlp(1, {1, 1, 1}, 4, 3);
  const Tensor out = decode_values(m, Tensor({2, 1}, std::vector<double>{-3.0, 5.0}));
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  for (double v : out.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Mlp, SameSeedSameParameters) {
  const VaeModel a = build_mlp(5, {16, 16, 1}, 16, 42), b = build_mlp(5, {16, 16, 1}, 16, 42),
                 c = build_mlp(5, {16, 16, 1}, 16, 43);
  EXPECT_EQ(a.params, b.params);
  EXPECT_NE(a.params, c.params);
}

TEST(Cnn, SixtyFourByThreeShapes) {
  const VaeModel m = build_cnn(7, {64, 64, 3}, 1);
  EXPECT_EQ(m.encoder_output_width(), 14u);
  EXPECT_EQ(m.decoder_output_width(), 64u * 64 * 3);
  const Tensor zero({1, 64 * 64 * 3}, 0.0);
  const Tensor mu = encode_mean(m, zero);
  EXPECT_EQ(mu.shape(), (Shape{1, 7}));
  const Tensor rec = decode_values(m, mu);
  EXPECT_EQ(rec.shape(), zero.shape());
  for (double v : rec.data()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Cnn, RejectsUnsupportedSize) {
  EXPECT_THROW(build_cnn(5, {16, 16, 1}, 0), std::invalid_argument);
  EXPECT_THROW(build_cnn(5, {64, 32, 1}, 0), std::invalid_argument);
}

TEST(Reparameterize, UnitGaussianAndVanishingVariance) {
  Tape t;
  Rng rng(0);
  EncoderOutput e{t.constant(Tensor({1, 1}, 0.0)), t.constant(Tensor({1, 1}, 0.0))};
  GaussianLatent g = reparameterize(e, rng);
  EXPECT_DOUBLE_EQ(g.z.value()[0], g.epsilon[0]);

  EncoderOutput tight{t.constant(Tensor({1, 4}, 0.7)), t.constant(Tensor({1, 4}, -12.0))};
  GaussianLatent h = reparameterize(tight, rng);
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_LE(std::abs(h.z.value()[i] - 0.7), std::exp(-6.0) * std::abs(h.epsilon[i]) + 1e-15);
}

TEST(Reparameterize, KnownEpsilon) {
  // z = mu + exp(logvar/2) * eps with mu=0, logvar=0, eps=1.5.
  Tape t;
  Var z = add(t.constant(Tensor({1, 1}, 0.0)),
              mul(exp(scale(t.constant(Tensor({1, 1}, 0.0)), 0.5)), t.constant(Tensor({1, 1}, 1.5))));
  EXPECT_DOUBLE_EQ(z.value()[0], 1.5);
}

TEST(Reparameterize, MonteCarloMoments) {
  const std::size_t n = 100000;
  Tape t;
  Rng rng(17);
  EncoderOutput e{t.constant(Tensor({n, 1}, 2.0)), t.constant(Tensor({n, 1}, std::log(4.0)))};
  GaussianLatent g = reparameterize(e, rng);
  double m = 0, v = 0;
  for (double z : g.z.value().data()) m += z;
  m /= n;
  for (double z : g.z.value().data()) v += (z - m) * (z - m);
  const double sd = std::sqrt(v / (n - 1));
  EXPECT_NEAR(m, 2.0, 3 * 2.0 / std::sqrt(double(n)));
  EXPECT_NEAR(sd, 2.0, 3 * 2.0 / std::sqrt(2.0 * n));
}

TEST(Decode, WidthMismatch) {
  const VaeModel m = build_mlp(5, {16, 16, 1}, 8, 0);
  EXPECT_THROW(decode_values(m, Tensor({2, 4})), ShapeError);
  EXPECT_THROW(encode_mean(m, Tensor({2, 255})), ShapeError);
}

TEST(Decode, RoundTripShapeAndRange) {
  const VaeModel m = build_mlp(5, {16, 16, 1}, 16, 5);
  const Tensor x = uniform({4, 256}, 6);
  const Tensor r = decode_values(m, encode_mean(m, x));
  EXPECT_EQ(r.shape(), x.shape());
  Rng rng(3);
  std::normal_distribution<double> n(0.0, 3.0);
  Tensor z({8, 5});
  for (auto& v : z.data()) v = n(rng);
  const Tensor out = decode_values(m, z);
  for (double v : out.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Decode, TraversalSweepGivesOneImagePerStep) {
  const VaeModel m = build_mlp(5, {16, 16, 1}, 16, 5);
  Tensor z({9, 5}, 0.0);
  for (std::size_t s = 0; s < 9; ++s) z[s * 5 + 2] = -4.0 + s;
  EXPECT_EQ(decode_values(m, z).shape(), (Shape{9, 256}));
}

TEST(Pipeline, LogvarIsClamped) {
  VaeModel m = build_mlp(2, {2, 2, 1}, 4, 1);
  // Push the logvar bias far outside the clamp range.
  for (std::size_t i = 0; i < m.params.size(); ++i)
    if (m.names[i] == "enc.fc3.bias") {
      m.params[i][2] = 100.0;
      m.params[i][3] = -100.0;
    }
  Tape t;
  BoundModel bm(t, m, false);
  EncoderOutput e = bm.encode(t.constant(Tensor({1, 4}, 0.5)));
  EXPECT_DOUBLE_EQ(e.logvar.value()[0], logvar_max);
  EXPECT_DOUBLE_EQ(e.logvar.value()[1], logvar_min);
}

TEST(Pipeline, FullForwardGradientsMatchFiniteDifferences) {
  const VaeModel m = build_mlp(2, {4, 4, 1}, 6, 21);
  const Tensor x = uniform({3, 16}, 22);
  Tensor eps({3, 2});
  Rng rng(23);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : eps.data()) v = n(rng);
  MultiFunction f = [&](Tape& t, std::span<const Var> v) {
    BoundModel bm(m, std::vector<Var>(v.begin(), v.end()));
    EncoderOutput e = bm.encode(t.constant(x));
    Var z = add(e.mu, mul(exp(scale(e.logvar, 0.5)), t.constant(eps)));
    return sum(square(sub(bm.decode(z), t.constant(x))));
  };
  EXPECT_LT(finite_difference_check(f, m.params, 1e-5), 1e-4);
}

TEST(Pipeline, CnnGradientsMatchFiniteDifferencesOnSubset) {
  // Small tensors only (biases and the like), checked through the whole
  // pipeline; every parameter would take minutes.
  const VaeModel m = build_cnn(2, {64, 64, 1}, 31);
  const Tensor x = uniform({1, 64 * 64}, 32);
  std::vector<std::size_t> pick;
  for (std::size_t i = 0; i < m.params.size(); ++i)
    if (m.params[i].numel() <= 40) pick.push_back(i);
  ASSERT_FALSE(pick.empty());
  std::vector<Tensor> pts;
  for (auto i : pick) pts.push_back(m.params[i]);
  MultiFunction f = [&](Tape& t, std::span<const Var> v) {
    std::vector<Var> all;
    for (std::size_t i = 0, k = 0; i < m.params.size(); ++i)
      all.push_back(k < pick.size() && pick[k] == i ? v[k++] : t.constant(m.params[i]));
    BoundModel bm(m, all);
    EncoderOutput e = bm.encode(t.constant(x));
    return sum(square(sub(bm.decode(e.mu), t.constant(x))));
  };
  EXPECT_LT(finite_difference_check(f, pts, 1e-5), 1e-4);
}
