#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "lvae/data.hpp"

using namespace lvae;
namespace fs = std::filesystem;

namespace {

const FactorDataset& full() {
  static const FactorDataset ds = generate_minidsprites();
  return ds;
}

std::size_t row_of(const FactorDataset& ds, std::array<std::uint32_t, 5> f) {
  std::size_t r = 0;
  for (std::size_t k = 0; k < 5; ++k) r = r * ds.spec.cardinalities[k] + f[k];
  return r;
}

std::vector<std::uint8_t> image_of(const FactorDataset& ds, std::size_t r) {
  auto s = ds.image(r);
  return {s.begin(), s.end()};
}

fs::path tmp(const std::string& name) {
  auto p = fs::temp_directory_path() / ("lvae_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Generator, FullGridSizeAndFactors) {
  const auto& ds = full();
  EXPECT_EQ(ds.size(), 6144u);
  EXPECT_EQ(ds.spec, FactorSpec::minidsprites());
  EXPECT_TRUE(ds.notes.empty());
  std::set<std::vector<std::uint32_t>> seen;
  for (std::size_t i = 0; i < ds.size(); ++i)
    seen.insert({ds.factors.begin() + i * 5, ds.factors.begin() + (i + 1) * 5});
  EXPECT_EQ(seen.size(), ds.size());  // exhaustive and duplicate-free
}

TEST(Generator, EveryImageHasForegroundAndIsReproducible) {
  const auto again = generate_minidsprites();
  EXPECT_EQ(again.images, full().images);
  for (std::size_t i = 0; i < full().size(); ++i) {
    auto img = full().image(i);
    EXPECT_TRUE(std::any_of(img.begin(), img.end(), [](auto p) { return p == 255; })) << "row " << i;
  }
}

TEST(Generator, SquareQuarterTurnSymmetry) {
  const auto& ds = full();
  for (std::uint32_t scale = 0; scale < 4; ++scale)
    for (std::uint32_t o = 0; o < 2; ++o)
      EXPECT_EQ(image_of(ds, row_of(ds, {0, scale, o, 3, 4})), image_of(ds, row_of(ds, {0, scale, o + 2, 3, 4})))
          << "scale " << scale << " orientation " << o;
}

TEST(Generator, TranslationConsistent) {
  const auto& ds = full();
  const std::size_t S = ds.width;
  for (std::uint32_t shape = 0; shape < 3; ++shape)
    for (std::uint32_t x = 0; x + 1 < 8; ++x) {
      const auto a = image_of(ds, row_of(ds, {shape, 2, 1, x, 5}));
      const auto b = image_of(ds, row_of(ds, {shape, 2, 1, x + 1, 5}));
      for (std::size_t py = 0; py < S; ++py) {
        EXPECT_EQ(b[py * S], 0);
        for (std::size_t px = 0; px + 1 < S; ++px) ASSERT_EQ(a[py * S + px], b[py * S + px + 1]);
      }
    }
}

TEST(Generator, ScaleGrowsArea) {
  const auto& ds = full();
  for (std::uint32_t shape = 0; shape < 3; ++shape) {
    auto area = [&](std::uint32_t s) {
      const auto img = image_of(ds, row_of(ds, {shape, s, 0, 3, 3}));
      return std::count(img.begin(), img.end(), 255);
    };
    for (std::uint32_t s = 0; s + 1 < 4; ++s) EXPECT_LE(area(s), area(s + 1)) << "shape " << shape;
    EXPECT_LT(area(0), area(3)) << "shape " << shape;
  }
}

TEST(Generator, ShrinksPositionGridWhenItCannotFit) {
  GeneratorOptions o;
  o.spec.cardinalities = {3, 4, 8, 16, 16};
  const auto ds = generate_minidsprites(o);
  EXPECT_LT(ds.spec.cardinalities[3], 16u);
  EXPECT_EQ(ds.spec.cardinalities[3], ds.spec.cardinalities[4]);
  EXPECT_EQ(ds.notes.size(), 2u);
  EXPECT_EQ(ds.size(), ds.spec.combinations());
  // Nothing is clipped: ink is the same at every position.
  const auto n = ds.spec.cardinalities[3];
  for (std::size_t i = 0; i < ds.size(); i += n * n) {
    auto ink = [&](std::size_t r) {
      auto img = ds.image(r);
      return std::count(img.begin(), img.end(), 255);
    };
    for (std::size_t p = 1; p < n * n; ++p) ASSERT_EQ(ink(i + p), ink(i)) << "row " << i + p;
  }
}

TEST(Generator, SubsampleIsSeeded) {
  GeneratorOptions o;
  o.subsample = 300;
  o.seed = 4;
  const auto a = generate_minidsprites(o), b = generate_minidsprites(o);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 300u);
  o.seed = 5;
  EXPECT_NE(generate_minidsprites(o).factors, a.factors);
}

TEST(Batch, ChannelMajorScaledPixels) {
  FactorDataset ds;
  ds.height = 1;
  ds.width = 2;
  ds.channels = 3;
  ds.spec = {{"f"}, {1}};
  ds.images = {0, 51, 102, 153, 204, 255};  // HWC: pixel0 rgb, pixel1 rgb
  ds.factors = {0};
  const std::size_t idx[] = {0};
  const Tensor t = to_batch(ds, idx);
  EXPECT_EQ(t.shape(), (Shape{1, 6}));
  const double want[] = {0.0, 153 / 255.0, 51 / 255.0, 204 / 255.0, 102 / 255.0, 1.0};
  for (int i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(t[i], want[i]);
}

TEST(Split, DefaultSizes) {
  const auto s = split(6144, {}, 0);
  EXPECT_EQ(s.train.size(), 5222u);
  EXPECT_EQ(s.val.size(), 461u);
  EXPECT_EQ(s.test.size(), 461u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 6144u);
}

TEST(Split, SeededAndDegenerate) {
  EXPECT_EQ(split(500, {}, 3).train, split(500, {}, 3).train);
  EXPECT_NE(split(500, {}, 3).train, split(500, {}, 4).train);
  const auto s = split(10, {1.0, 0.0, 0.0}, 1);
  EXPECT_EQ(s.train.size(), 10u);
  EXPECT_TRUE(s.val.empty() && s.test.empty());
  EXPECT_THROW(split(5, {}, 0), std::invalid_argument);
  EXPECT_THROW(split(100, {0.5, 0.2, 0.2}, 0), std::invalid_argument);
}

TEST(FixedFactor, PairsShareTheFactor) {
  const auto& ds = full();
  Rng rng(1);
  for (std::size_t k = 0; k < 5; ++k)
    for (auto [i, j] : sample_fixed_factor_batch(ds, k, 200, rng))
      EXPECT_EQ(ds.factors[i * 5 + k], ds.factors[j * 5 + k]);
  EXPECT_THROW(sample_fixed_factor_batch(ds, 5, 10, rng), std::out_of_range);
}

TEST(FixedFactor, CardinalityOneFactorAnyPair) {
  GeneratorOptions o;
  o.spec.cardinalities = {1, 2, 4, 3, 3};
  const auto ds = generate_minidsprites(o);
  Rng rng(2);
  std::set<std::size_t> seconds;
  for (auto [i, j] : sample_fixed_factor_batch(ds, 0, 2000, rng)) seconds.insert(j);
  EXPECT_EQ(seconds.size(), ds.size());
}

TEST(FixedFactor, OtherFactorsUniformChiSquare) {
  const auto& ds = full();
  Rng rng(3);
  const auto pairs = sample_fixed_factor_batch(ds, 1, 10000, rng);
  // Partner's posX (8 values) should be uniform.
  std::vector<double> count(8, 0.0);
  for (auto [i, j] : pairs) count[ds.factors[j * 5 + 3]] += 1.0;
  double chi = 0.0;
  for (double c : count) chi += (c - 1250.0) * (c - 1250.0) / 1250.0;
  EXPECT_LT(chi, 18.475);  // chi-square 7 dof, p = 0.01
}

TEST(Fds, RoundTripIsByteExact) {
  const auto dir = tmp("rt");
  GeneratorOptions o;
  o.subsample = 200;
  const auto ds = generate_minidsprites(o);
  save_fds(ds, dir / "a.fds");
  const auto back = load_fds(dir / "a.fds");
  EXPECT_EQ(back, ds);
  save_fds(back, dir / "b.fds");
  EXPECT_EQ(detail::read_file(dir / "a.fds"), detail::read_file(dir / "b.fds"));
}

TEST(Fds, DistinctErrors) {
  GeneratorOptions o;
  o.subsample = 20;
  const auto bytes = encode_fds(generate_minidsprites(o));
  auto kind_of = [](std::vector<std::uint8_t> b) {
    try {
      decode_fds(b);
    } catch (const FdsError& e) {
      return static_cast<int>(e.kind());
    }
    return -1;
  };
  auto magic = bytes;
  std::copy_n("XXXX", 4, magic.begin());
  EXPECT_EQ(kind_of(magic), static_cast<int>(FdsError::Kind::bad_magic));
  auto version = bytes;
  version[4] = 9;
  EXPECT_EQ(kind_of(version), static_cast<int>(FdsError::Kind::version_mismatch));
  auto trunc = bytes;
  trunc.resize(bytes.size() - 10);
  EXPECT_EQ(kind_of(trunc), static_cast<int>(FdsError::Kind::truncated));
  EXPECT_EQ(kind_of({bytes.begin(), bytes.begin() + 6}), static_cast<int>(FdsError::Kind::truncated));
  auto corrupt = bytes;
  corrupt[bytes.size() / 2] ^= 1;
  EXPECT_EQ(kind_of(corrupt), static_cast<int>(FdsError::Kind::checksum));
  EXPECT_THROW(load_fds("/nonexistent/dir/x.fds"), FdsError);
}
