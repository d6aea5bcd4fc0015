#pragma once

// Factor-labelled image datasets: the procedural mini-dSprites generator,
// train/val/test splits, fixed-factor pair sampling and the FDS container.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lvae/rng.hpp"
#include "lvae/tensor.hpp"

namespace lvae {

struct FactorSpec {
  std::vector<std::string> names;
  std::vector<std::uint32_t> cardinalities;

  std::size_t size() const { return names.size(); }

  std::size_t combinations() const {
    std::size_t n = 1;
    for (auto c : cardinalities) n *= c;
    return n;
  }

  void validate() const {
    if (names.empty()) throw std::invalid_argument("factor spec: at least one factor required");
    if (names.size() != cardinalities.size()) throw std::invalid_argument("factor spec: names/cardinalities differ");
    for (auto c : cardinalities)
      if (c == 0) throw std::invalid_argument("factor spec: cardinality must be positive");
  }

  static FactorSpec minidsprites() {
    return {{"shape", "scale", "orientation", "posX", "posY"}, {3, 4, 8, 8, 8}};
  }

  bool operator==(const FactorSpec&) const = default;
};

// Read-only view of an N x K factor index table.
struct FactorTableView {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::span<const std::uint32_t> values;

  std::uint32_t at(std::size_t r, std::size_t k) const { return values[r * cols + k]; }
};

struct FactorDataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> images;    // N x H x W x C
  std::vector<std::uint32_t> factors;  // N x K
  FactorSpec spec;
  std::vector<std::string> notes;      // generator adjustments, not serialized

  std::size_t size() const { return spec.size() ? factors.size() / spec.size() : 0; }
  std::size_t pixels() const { return height * width * channels; }

  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span<const std::uint8_t>(images).subspan(i * pixels(), pixels());
  }

  FactorTableView table() const { return {size(), spec.size(), factors}; }

  bool operator==(const FactorDataset& o) const {
    return height == o.height && width == o.width && channels == o.channels && images == o.images &&
           factors == o.factors && spec == o.spec;
  }
};

// Pixel values scaled to [0, 1], laid out (batch, C * H * W) channel-major.
inline Tensor to_batch(const FactorDataset& ds, std::span<const std::size_t> indices) {
  const std::size_t H = ds.height, W = ds.width, C = ds.channels, D = ds.pixels();
  Tensor out({indices.size(), D});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto img = ds.image(indices[b]);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < C; ++c)
          out[b * D + (c * H + y) * W + x] = static_cast<double>(img[(y * W + x) * C + c]) / 255.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Procedural mini-dSprites.

enum class Sprite { square = 0, ellipse = 1, heart = 2 };

namespace detail {

inline bool sprite_contains(Sprite s, double u, double v) {
  switch (s) {
    case Sprite::square: return std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
    case Sprite::ellipse: return u * u + 4.0 * v * v <= 1.0;
    case Sprite::heart: {
      // (x^2 + y^2 - 1)^3 - x^2 y^3 <= 0, bounding box fitted to [-1, 1]^2, lobes up.
      const double x = 1.139 * u;
      const double y = 0.118 - 1.118 * v;
      const double r = x * x + y * y - 1.0;
      return r * r * r - x * x * y * y * y <= 0.0;
    }
  }
  return false;
}

}  // namespace detail

struct GeneratorOptions {
  std::size_t image_size = 16;
  FactorSpec spec = FactorSpec::minidsprites();
  std::uint64_t seed = 0;
  std::size_t subsample = 0;  // 0 = full grid
};

// Factors, in order: shape (<= 3), scale, orientation, posX, posY.
// Sprites are binary (0/255). Half-extents span [0.09375, 0.1875] of the
// image side; positions lie on a one-pixel grid centred in the image.
// Orientations cover [0, 2 pi); when their count is a multiple of four,
// quarter turns are applied exactly so four-fold symmetric sprites repeat
// bit-for-bit. A position grid that would push sprites off-canvas is
// shrunk, which shows in the stored cardinalities and in `notes`.
inline FactorDataset generate_minidsprites(const GeneratorOptions& opt = {}) {
  const std::size_t S = opt.image_size;
  if (S < 8) throw std::invalid_argument("generate_minidsprites: image_size must be >= 8");
  FactorSpec spec = opt.spec;
  spec.validate();
  if (spec.size() != 5) throw std::invalid_argument("generate_minidsprites: expected 5 factors");
  if (spec.cardinalities[0] > 3) throw std::invalid_argument("generate_minidsprites: at most 3 shapes");

  FactorDataset ds;
  ds.height = ds.width = S;
  ds.channels = 1;

  const double side = static_cast<double>(S);
  const std::uint32_t n_scale = spec.cardinalities[1];
  auto half_extent = [&](std::uint32_t s) {
    const double t = n_scale > 1 ? static_cast<double>(s) / (n_scale - 1) : 1.0;
    return side * (0.09375 + 0.09375 * t);
  };
  const double radius = half_extent(n_scale - 1) * std::numbers::sqrt2;
  const auto fit = static_cast<std::uint32_t>(std::max(0.0, std::floor(side - 2.0 * radius)) + 1.0);
  for (std::size_t axis : {3u, 4u}) {
    if (spec.cardinalities[axis] > fit) {
      ds.notes.push_back(spec.names[axis] + " grid shrunk from " + std::to_string(spec.cardinalities[axis]) +
                         " to " + std::to_string(fit) + " positions to stay inside the canvas");
      spec.cardinalities[axis] = fit;
    }
  }
  ds.spec = spec;

  const std::uint32_t n_orient = spec.cardinalities[2];
  const bool exact_quarters = n_orient % 4 == 0;
  auto origin = [&](std::uint32_t n) { return (side - static_cast<double>(n - 1)) / 2.0; };
  const double x0 = origin(spec.cardinalities[3]);
  const double y0 = origin(spec.cardinalities[4]);

  std::vector<std::size_t> rows(spec.combinations());
  std::iota(rows.begin(), rows.end(), 0);
  if (opt.subsample > 0 && opt.subsample < rows.size()) {
    Rng rng = make_rng(opt.seed, Stream::data);
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(opt.subsample);
    std::sort(rows.begin(), rows.end());
  }

  const std::size_t K = spec.size();
  ds.images.assign(rows.size() * S * S, 0);
  ds.factors.resize(rows.size() * K);
  for (std::size_t n = 0; n < rows.size(); ++n) {
    std::array<std::uint32_t, 5> f{};
    std::size_t r = rows[n];
    for (std::size_t k = K; k-- > 0;) {
      f[k] = static_cast<std::uint32_t>(r % spec.cardinalities[k]);
      r /= spec.cardinalities[k];
    }
    std::copy(f.begin(), f.end(), ds.factors.begin() + static_cast<std::ptrdiff_t>(n * K));

    const auto shape = static_cast<Sprite>(f[0]);
    const double e = half_extent(f[1]);
    std::uint32_t quarters = 0, residual = f[2];
    if (exact_quarters) {
      quarters = f[2] / (n_orient / 4);
      residual = f[2] % (n_orient / 4);
    }
    const double angle = 2.0 * std::numbers::pi * residual / n_orient;
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double cx = x0 + f[3], cy = y0 + f[4];
    std::uint8_t* img = ds.images.data() + n * S * S;
    for (std::size_t py = 0; py < S; ++py)
      for (std::size_t px = 0; px < S; ++px) {
        const double dx = static_cast<double>(px) + 0.5 - cx;
        const double dy = static_cast<double>(py) + 0.5 - cy;
        // rotate by -angle, then undo the quarter turns exactly
        double u = (ca * dx + sa * dy) / e;
        double v = (-sa * dx + ca * dy) / e;
        for (std::uint32_t q = 0; q < quarters; ++q) {
          const double t = u;
          u = v;
          v = -t;
        }
        if (detail::sprite_contains(shape, u, v)) img[py * S + px] = 255;
      }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits.

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct SplitRatios {
  double train = 0.85;
  double val = 0.075;
  double test = 0.075;
};

// Train takes floor(N * train); the remainder is divided between val and
// test in proportion, val rounding half up.
inline SplitIndices split(std::size_t n, SplitRatios r, std::uint64_t seed) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9)
    throw std::invalid_argument("split: ratios must be non-negative and sum to 1");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, Stream::split);
  std::shuffle(idx.begin(), idx.end(), rng);

  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * r.train + 1e-9));
  const std::size_t rest = n - n_train;
  std::size_t n_val = 0;
  if (r.val + r.test > 0)
    n_val = static_cast<std::size_t>(std::floor(static_cast<double>(rest) * r.val / (r.val + r.test) + 0.5));
  const std::size_t n_test = rest - n_val;
  if ((r.train > 0 && n_train == 0) || (r.val > 0 && n_val == 0) || (r.test > 0 && n_test == 0))
    throw std::invalid_argument("split: dataset of " + std::to_string(n) + " rows leaves an empty split");

  SplitIndices s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
               idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  return s;
}

inline SplitIndices split(const FactorDataset& ds, SplitRatios r, std::uint64_t seed) {
  return split(ds.size(), r, seed);
}

// ---------------------------------------------------------------------------
// Fixed-factor sampling.

// Rows grouped by the value of each factor.
class FactorIndex {
 public:
  explicit FactorIndex(FactorTableView t) : table_(t), buckets_(t.cols) {
    for (std::size_t k = 0; k < t.cols; ++k) {
      std::uint32_t maxv = 0;
      for (std::size_t r = 0; r < t.rows; ++r) maxv = std::max(maxv, t.at(r, k));
      buckets_[k].resize(t.rows ? maxv + 1 : 0);
      for (std::size_t r = 0; r < t.rows; ++r) buckets_[k][t.at(r, k)].push_back(r);
    }
  }

  const FactorTableView& table() const { return table_; }
  std::size_t factors() const { return table_.cols; }
  std::size_t rows() const { return table_.rows; }

  const std::vector<std::size_t>& rows_with(std::size_t k, std::uint32_t value) const {
    return buckets_.at(k).at(value);
  }

  // Number of distinct values observed for factor k.
  std::size_t distinct(std::size_t k) const {
    std::size_t n = 0;
    for (const auto& b : buckets_.at(k)) n += b.empty() ? 0 : 1;
    return n;
  }

  // First row uniform, second uniform among rows sharing factor k with it.
  std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(std::size_t k, std::size_t count, Rng& rng) const {
    if (k >= table_.cols)
      throw std::out_of_range("sample_fixed_factor_batch: factor " + std::to_string(k) + " out of range");
    if (table_.rows == 0) throw std::invalid_argument("sample_fixed_factor_batch: empty table");
    std::uniform_int_distribution<std::size_t> pick(0, table_.rows - 1);
    std::vector<std::pair<std::size_t, std::size_t>> out;
    out.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
      const std::size_t i = pick(rng);
      const auto& same = buckets_[k][table_.at(i, k)];
      std::uniform_int_distribution<std::size_t> p2(0, same.size() - 1);
      out.emplace_back(i, same[p2(rng)]);
    }
    return out;
  }

  // `count` rows that all share one value of factor k, the value itself
  // chosen by a uniformly drawn anchor row.
  std::vector<std::size_t> sample_group(std::size_t k, std::size_t count, Rng& rng) const {
    std::uniform_int_distribution<std::size_t> pick(0, table_.rows - 1);
    const auto& same = buckets_.at(k)[table_.at(pick(rng), k)];
    std::uniform_int_distribution<std::size_t> p2(0, same.size() - 1);
    std::vector<std::size_t> out(count);
    for (auto& r : out) r = same[p2(rng)];
    return out;
  }

 private:
  FactorTableView table_;
  std::vector<std::vector<std::vector<std::size_t>>> buckets_;
};

inline std::vector<std::pair<std::size_t, std::size_t>> sample_fixed_factor_batch(const FactorDataset& ds,
                                                                                  std::size_t factor_k,
                                                                                  std::size_t batch, Rng& rng) {
  if (factor_k >= ds.spec.size())
    throw std::out_of_range("sample_fixed_factor_batch: factor " + std::to_string(factor_k) + " out of range");
  return FactorIndex(ds.table()).sample_pairs(factor_k, batch, rng);
}

// ---------------------------------------------------------------------------
// FDS container, little-endian:
//   "FDS1" | u32 version | u32 N, H, W, C, K |
//   K x (u32 cardinality, u16 name length, name bytes) |
//   N*H*W*C u8 pixels | N*K u32 factors | u32 CRC32 of everything before it

inline constexpr std::uint32_t fds_version = 1;

class FdsError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, truncated, checksum, invalid };
  FdsError(Kind k, const std::string& what) : std::runtime_error(what), kind_(k) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put(bits, 8);
  }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void str(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  using Fail = std::function<void(const std::string&)>;
  ByteReader(std::span<const std::uint8_t> b, Fail on_truncated) : b_(b), fail_(std::move(on_truncated)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() {
    std::uint64_t bits = get(8);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(std::size_t n) {
    auto s = bytes(n);
    return std::string(s.begin(), s.end());
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) {
    if (b_.size() - pos_ < n) fail_("need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_));
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> b_;
  Fail fail_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> b) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks
  std::size_t off = 0;
  while (off < b.size()) {
    const std::size_t n = std::min<std::size_t>(b.size() - off, 1u << 30);
    c = ::crc32(c, b.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_fds(const FactorDataset& ds) {
  const std::size_t N = ds.size(), K = ds.spec.size();
  if (ds.images.size() != N * ds.pixels()) throw FdsError(FdsError::Kind::invalid, "fds: image payload size mismatch");
  detail::ByteWriter w;
  w.str("FDS1");
  w.u32(fds_version);
  for (std::size_t v : {N, ds.height, ds.width, ds.channels, K}) w.u32(static_cast<std::uint32_t>(v));
  for (std::size_t k = 0; k < K; ++k) {
    const auto& name = ds.spec.names[k];
    if (name.size() > 0xffff) throw FdsError(FdsError::Kind::invalid, "fds: factor name too long");
    w.u32(ds.spec.cardinalities[k]);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.str(name);
  }
  w.bytes(ds.images);
  for (auto f : ds.factors) w.u32(f);
  const std::uint32_t crc = detail::crc32_of(w.buffer());
  w.u32(crc);
  return std::move(w.buffer());
}

inline FactorDataset decode_fds(std::span<const std::uint8_t> bytes) {
  using K = FdsError::Kind;
  detail::ByteReader r(bytes, [](const std::string& m) { throw FdsError(K::truncated, "fds: truncated file: " + m); });
  if (r.str(4) != "FDS1") throw FdsError(K::bad_magic, "fds: bad magic");
  const std::uint32_t version = r.u32();
  if (version != fds_version)
    throw FdsError(K::version_mismatch, "fds: unsupported version " + std::to_string(version));
  FactorDataset ds;
  const std::size_t N = r.u32();
  ds.height = r.u32();
  ds.width = r.u32();
  ds.channels = r.u32();
  const std::size_t nf = r.u32();
  for (std::size_t k = 0; k < nf; ++k) {
    ds.spec.cardinalities.push_back(r.u32());
    const std::uint16_t len = r.u16();
    ds.spec.names.push_back(r.str(len));
  }
  const std::size_t payload = N * ds.height * ds.width * ds.channels;
  if (r.remaining() < payload + N * nf * 4 + 4)
    throw FdsError(K::truncated, "fds: truncated file: payload of " + std::to_string(payload) + " bytes missing");
  auto img = r.bytes(payload);
  ds.images.assign(img.begin(), img.end());
  ds.factors.resize(N * nf);
  for (auto& f : ds.factors) f = r.u32();
  const std::size_t body = r.position();
  const std::uint32_t stored = r.u32();
  if (detail::crc32_of(bytes.first(body)) != stored) throw FdsError(K::checksum, "fds: checksum mismatch");
  if (r.remaining() != 0) throw FdsError(K::invalid, "fds: trailing bytes after checksum");
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < nf; ++k)
      if (ds.factors[n * nf + k] >= ds.spec.cardinalities[k])
        throw FdsError(K::invalid, "fds: factor value out of range at row " + std::to_string(n));
  return ds;
}

inline void save_fds(const FactorDataset& ds, const std::filesystem::path& path) {
  detail::write_file(path, encode_fds(ds));
}

inline FactorDataset load_fds(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = detail::read_file(path);
  } catch (const std::runtime_error& e) {
    throw FdsError(FdsError::Kind::io, e.what());
  }
  return decode_fds(bytes);
}

}  // namespace lvae
