#pragma once

// Checkpoint file (.lvae), little-endian:
//   "LVAE" | u32 version | u32 arch | u32 H, W, C | u32 latent | u32 hidden |
//   u32 regime | u32 regularizer | f64 beta | f64 s0 | f64 s1 |
//   f64 log_decoder_sigma | 8 x f64 controller state |
//   u64 iteration | u32 tensor count |
//   per tensor: u32 rank, rank x u32 extents, f64 values (declaration order) |
//   u32 CRC32 of everything before it

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "lvae/data.hpp"
#include "lvae/losses.hpp"
#include "lvae/nets.hpp"

namespace lvae {

inline constexpr std::uint32_t checkpoint_version = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, truncated, checksum, invalid };
  CheckpointError(Kind k, const std::string& what) : std::runtime_error(what), kind_(k) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct Checkpoint {
  VaeModel model;
  LossWeights weights;
  std::uint64_t iteration = 0;
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  const VaeModel& m = c.model;
  const LossWeights& w = c.weights;
  detail::ByteWriter out;
  out.str("LVAE");
  out.u32(checkpoint_version);
  out.u32(static_cast<std::uint32_t>(m.arch));
  for (std::size_t v : {m.dims.height, m.dims.width, m.dims.channels, m.latent, m.hidden})
    out.u32(static_cast<std::uint32_t>(v));
  out.u32(static_cast<std::uint32_t>(w.regime));
  out.u32(static_cast<std::uint32_t>(w.regularizer));
  out.f64(w.beta);
  out.f64(w.s0.item());
  out.f64(w.s1.item());
  out.f64(w.log_decoder_sigma.item());
  const auto& k = w.controller;
  for (double v : {k.kl_set, k.k_p, k.k_i, k.integral, k.beta_min, k.beta_max, k.beta_floor, k.beta_current})
    out.f64(v);
  out.u64(c.iteration);
  out.u32(static_cast<std::uint32_t>(m.params.size()));
  for (const Tensor& t : m.params) {
    out.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) out.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) out.f64(v);
  }
  out.u32(detail::crc32_of(out.buffer()));
  return std::move(out.buffer());
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  using K = CheckpointError::Kind;
  detail::ByteReader in(bytes, [](const std::string& m) { throw CheckpointError(K::truncated, "checkpoint truncated: " + m); });
  if (in.str(4) != "LVAE") throw CheckpointError(K::bad_magic, "checkpoint: bad magic");
  const std::uint32_t version = in.u32();
  if (version != checkpoint_version)
    throw CheckpointError(K::version_mismatch, "checkpoint: unsupported version " + std::to_string(version));
  if (bytes.size() < 12) throw CheckpointError(K::truncated, "checkpoint truncated: no checksum");
  {
    detail::ByteReader tail(bytes.subspan(bytes.size() - 4), [](const std::string&) {});
    const std::uint32_t stored = tail.u32();
    if (stored != detail::crc32_of(bytes.first(bytes.size() - 4)))
      throw CheckpointError(K::checksum, "checkpoint: checksum mismatch");
  }
  const std::uint32_t arch = in.u32();
  if (arch > 1) throw CheckpointError(K::invalid, "checkpoint: unknown architecture tag " + std::to_string(arch));
  ImageDims dims;
  dims.height = in.u32();
  dims.width = in.u32();
  dims.channels = in.u32();
  const std::size_t latent = in.u32();
  const std::size_t hidden = in.u32();

  Checkpoint c;
  // Rebuild the layer graph, then overwrite its parameters.
  c.model = static_cast<Arch>(arch) == Arch::mlp ? build_mlp(latent, dims, hidden, 0) : build_cnn(latent, dims, 0);
  const std::uint32_t regime = in.u32();
  if (regime > static_cast<std::uint32_t>(Regime::dynamic_vae))
    throw CheckpointError(K::invalid, "checkpoint: unknown regime tag " + std::to_string(regime));
  c.weights.regime = static_cast<Regime>(regime);
  const std::uint32_t reg = in.u32();
  if (reg > 1) throw CheckpointError(K::invalid, "checkpoint: unknown regularizer tag");
  c.weights.regularizer = static_cast<WeightRegularizer>(reg);
  c.weights.beta = in.f64();
  c.weights.s0 = Tensor::scalar(in.f64());
  c.weights.s1 = Tensor::scalar(in.f64());
  c.weights.log_decoder_sigma = Tensor::scalar(in.f64());
  auto& k = c.weights.controller;
  for (double* v : {&k.kl_set, &k.k_p, &k.k_i, &k.integral, &k.beta_min, &k.beta_max, &k.beta_floor, &k.beta_current})
    *v = in.f64();
  c.iteration = in.u64();
  const std::uint32_t count = in.u32();
  if (count != c.model.params.size())
    throw CheckpointError(K::invalid, "checkpoint: expected " + std::to_string(c.model.params.size()) + " tensors, found " +
                          std::to_string(count));
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t rank = in.u32();
    Shape s(rank);
    for (auto& d : s) d = in.u32();
    if (s != c.model.params[i].shape())
      throw CheckpointError(K::invalid, "checkpoint: tensor " + c.model.names[i] + " has shape " + to_string(s) + ", expected " +
                            to_string(c.model.params[i].shape()));
    for (auto& v : c.model.params[i].data()) v = in.f64();
  }
  in.u32();  // checksum, verified above
  if (in.remaining() != 0) throw CheckpointError(K::invalid, "checkpoint: trailing bytes");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = detail::read_file(path);
  } catch (const std::runtime_error& e) {
    throw CheckpointError(CheckpointError::Kind::io, e.what());
  }
  return decode_checkpoint(bytes);
}

}  // namespace lvae
