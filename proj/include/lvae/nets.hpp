#pragma once

// Encoder/decoder stacks (MLP and 64x64 CNN) and the Gaussian latent.
//
// Pixel vectors are flattened channel-major (C, H, W) for both
// architectures; for single-channel data this equals row-major H x W.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lvae/rng.hpp"
#include "lvae/tensor.hpp"

namespace lvae {

enum class Arch : std::uint32_t { mlp = 0, cnn = 1 };

inline const char* arch_name(Arch a) { return a == Arch::mlp ? "mlp" : "cnn"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "mlp") return Arch::mlp;
  if (s == "cnn") return Arch::cnn;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

struct ImageDims {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;

  std::size_t pixels() const { return height * width * channels; }
  bool operator==(const ImageDims&) const = default;
};

enum class LayerKind : std::uint32_t { dense, conv, conv_transpose, reshape };
enum class Activation : std::uint32_t { none, relu, sigmoid };

struct Layer {
  LayerKind kind = LayerKind::dense;
  std::size_t weight = 0;  // index into VaeModel::params
  std::size_t bias = 0;
  ConvAttrs conv;
  Activation act = Activation::none;
  Shape per_sample;  // reshape target, batch dimension excluded
};

struct VaeModel {
  Arch arch = Arch::mlp;
  std::size_t latent = 0;
  ImageDims dims;
  std::size_t hidden = 0;  // MLP width; unused by the CNN stack

  std::vector<std::string> names;  // declaration order
  std::vector<Tensor> params;
  std::vector<Layer> encoder;
  std::vector<Layer> decoder;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
  }

  std::size_t encoder_output_width() const {
    for (auto it = encoder.rbegin(); it != encoder.rend(); ++it)
      if (it->kind == LayerKind::dense) return params[it->weight].dim(1);
    return 0;
  }

  std::size_t decoder_output_width() const {
    for (auto it = decoder.rbegin(); it != decoder.rend(); ++it) {
      if (it->kind == LayerKind::dense) return params[it->weight].dim(1);
      if (it->kind == LayerKind::reshape) return numel_of(it->per_sample);
    }
    return 0;
  }
};

namespace detail {

class ModelBuilder {
 public:
  ModelBuilder(VaeModel& m, std::uint64_t seed) : m_(m), rng_(make_rng(seed, Stream::init)) {}

  // He-uniform bound before relu, unit-gain bound otherwise; zero bias.
  std::size_t add_param(const std::string& name, Shape shape, double fan_in, bool relu_follows) {
    Tensor t(std::move(shape));
    if (fan_in > 0.0) {
      const double bound = std::sqrt((relu_follows ? 6.0 : 3.0) / fan_in);
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& v : t.data()) v = u(rng_);
    }
    m_.names.push_back(name);
    m_.params.push_back(std::move(t));
    return m_.params.size() - 1;
  }

  Layer dense(const std::string& prefix, std::size_t in, std::size_t out, Activation act) {
    Layer l;
    l.kind = LayerKind::dense;
    l.act = act;
    l.weight = add_param(prefix + ".weight", {in, out}, static_cast<double>(in), act == Activation::relu);
    l.bias = add_param(prefix + ".bias", {out}, 0.0, false);
    return l;
  }

  Layer conv(const std::string& prefix, std::size_t in, std::size_t out, std::size_t k, ConvAttrs a,
             Activation act) {
    Layer l;
    l.kind = LayerKind::conv;
    l.conv = a;
    l.act = act;
    l.weight = add_param(prefix + ".weight", {out, in, k, k}, static_cast<double>(in * k * k), act == Activation::relu);
    l.bias = add_param(prefix + ".bias", {out}, 0.0, false);
    return l;
  }

  Layer conv_t(const std::string& prefix, std::size_t in, std::size_t out, std::size_t k, ConvAttrs a,
               Activation act) {
    Layer l;
    l.kind = LayerKind::conv_transpose;
    l.conv = a;
    l.act = act;
    const double fan_in = static_cast<double>(in * k * k) / static_cast<double>(a.stride * a.stride);
    l.weight = add_param(prefix + ".weight", {in, out, k, k}, fan_in, act == Activation::relu);
    l.bias = add_param(prefix + ".bias", {out}, 0.0, false);
    return l;
  }

  static Layer reshape(Shape per_sample) {
    Layer l;
    l.kind = LayerKind::reshape;
    l.per_sample = std::move(per_sample);
    return l;
  }

 private:
  VaeModel& m_;
  Rng rng_;
};

}  // namespace detail

inline VaeModel build_mlp(std::size_t latent_dim, ImageDims dims, std::size_t hidden, std::uint64_t seed) {
  if (latent_dim < 1) throw std::invalid_argument("build_mlp: latent_dim must be >= 1");
  if (dims.height < 1 || dims.width < 1 || dims.channels < 1 || hidden < 1)
    throw std::invalid_argument("build_mlp: dimensions must be positive");
  VaeModel m;
  m.arch = Arch::mlp;
  m.latent = latent_dim;
  m.dims = dims;
  m.hidden = hidden;
  detail::ModelBuilder b(m, seed);
  const std::size_t d = dims.pixels();
  m.encoder.push_back(b.dense("enc.fc1", d, hidden, Activation::relu));
  m.encoder.push_back(b.dense("enc.fc2", hidden, hidden, Activation::relu));
  m.encoder.push_back(b.dense("enc.fc3", hidden, 2 * latent_dim, Activation::none));
  m.decoder.push_back(b.dense("dec.fc1", latent_dim, hidden, Activation::relu));
  m.decoder.push_back(b.dense("dec.fc2", hidden, hidden, Activation::relu));
  m.decoder.push_back(b.dense("dec.fc3", hidden, d, Activation::sigmoid));
  return m;
}

// 64x64 only. Encoder: four k4/s2/p1 convs (32, 32, 64, 64 channels) take
// 64 -> 4, a k4/s1/p0 conv (32 channels) takes 4 -> 1, then FC(2L).
// Decoder: FC(256) viewed as 256x1x1, then six k4/s2/p1 transposed convs
// (64, 64, 32, 32, C, C channels) take 1 -> 64.
inline VaeModel build_cnn(std::size_t latent_dim, ImageDims dims, std::uint64_t seed) {
  if (latent_dim < 1) throw std::invalid_argument("build_cnn: latent_dim must be >= 1");
  if (dims.height != 64 || dims.width != 64 || dims.channels < 1)
    throw std::invalid_argument("build_cnn: unsupported image size " + std::to_string(dims.height) + "x" +
                                std::to_string(dims.width) + " (the stack requires 64x64)");
  VaeModel m;
  m.arch = Arch::cnn;
  m.latent = latent_dim;
  m.dims = dims;
  detail::ModelBuilder b(m, seed);
  const std::size_t C = dims.channels;
  const ConvAttrs down{2, 1};
  m.encoder.push_back(detail::ModelBuilder::reshape({C, 64, 64}));
  m.encoder.push_back(b.conv("enc.conv1", C, 32, 4, down, Activation::relu));
  m.encoder.push_back(b.conv("enc.conv2", 32, 32, 4, down, Activation::relu));
  m.encoder.push_back(b.conv("enc.conv3", 32, 64, 4, down, Activation::relu));
  m.encoder.push_back(b.conv("enc.conv4", 64, 64, 4, down, Activation::relu));
  m.encoder.push_back(b.conv("enc.conv5", 64, 32, 4, ConvAttrs{1, 0}, Activation::relu));
  m.encoder.push_back(detail::ModelBuilder::reshape({32}));
  m.encoder.push_back(b.dense("enc.fc", 32, 2 * latent_dim, Activation::none));

  m.decoder.push_back(b.dense("dec.fc", latent_dim, 256, Activation::relu));
  m.decoder.push_back(detail::ModelBuilder::reshape({256, 1, 1}));
  const std::size_t chans[] = {256, 64, 64, 32, 32, C, C};
  for (std::size_t i = 0; i < 6; ++i)
    m.decoder.push_back(b.conv_t("dec.convt" + std::to_string(i + 1), chans[i], chans[i + 1], 4, down,
                                 i == 5 ? Activation::sigmoid : Activation::relu));
  m.decoder.push_back(detail::ModelBuilder::reshape({C * 64 * 64}));
  return m;
}

struct EncoderOutput {
  Var mu;      // (batch, L)
  Var logvar;  // (batch, L), clamped to [logvar_min, logvar_max]
};

struct GaussianLatent {
  Var z;
  Tensor epsilon;
  Var mu;
  Var logvar;
};

inline constexpr double logvar_min = -12.0;
inline constexpr double logvar_max = 12.0;

// Model parameters placed on a tape, tracked for training or constant for
// evaluation.
class BoundModel {
 public:
  BoundModel(Tape& tape, const VaeModel& model, bool track) : tape_(&tape), model_(&model) {
    vars_.reserve(model.params.size());
    for (const auto& p : model.params) vars_.push_back(track ? tape.leaf(p) : tape.constant(p));
  }

  // Binds caller-owned variables (one per model parameter, same order).
  BoundModel(const VaeModel& model, std::vector<Var> vars) : model_(&model), vars_(std::move(vars)) {
    if (vars_.size() != model.params.size())
      throw ShapeError("BoundModel: " + std::to_string(vars_.size()) + " variables for " +
                       std::to_string(model.params.size()) + " parameters");
    if (vars_.empty()) throw ShapeError("BoundModel: model has no parameters");
    tape_ = &vars_.front().tape();
    for (std::size_t i = 0; i < vars_.size(); ++i)
      if (vars_[i].shape() != model.params[i].shape())
        throw ShapeError("BoundModel: variable " + std::to_string(i) + " has shape " + to_string(vars_[i].shape()) +
                         ", parameter " + model.names[i] + " is " + to_string(model.params[i].shape()));
  }

  const VaeModel& model() const { return *model_; }
  const std::vector<Var>& vars() const { return vars_; }
  Tape& tape() const { return *tape_; }

  EncoderOutput encode(const Var& x) const {
    const auto& s = x.shape();
    if (s.size() != 2 || s[1] != model_->dims.pixels())
      throw ShapeError("encode: expected (batch, " + std::to_string(model_->dims.pixels()) + "), got " +
                       to_string(s));
    Var h = run(model_->encoder, x);
    const std::size_t L = model_->latent;
    return {slice(h, 1, 0, L), clamp(slice(h, 1, L, 2 * L), logvar_min, logvar_max)};
  }

  Var decode(const Var& z) const {
    const auto& s = z.shape();
    if (s.size() != 2 || s[1] != model_->latent)
      throw ShapeError("decode: latent width " + (s.size() == 2 ? std::to_string(s[1]) : to_string(s)) +
                       " does not match model latent " + std::to_string(model_->latent));
    return run(model_->decoder, z);
  }

 private:
  Var run(const std::vector<Layer>& layers, Var h) const {
    for (const Layer& l : layers) {
      const std::size_t batch = h.shape()[0];
      switch (l.kind) {
        case LayerKind::dense:
          h = add(matmul(h, vars_[l.weight]), vars_[l.bias]);
          break;
        case LayerKind::conv:
          h = conv2d(h, vars_[l.weight], &vars_[l.bias], l.conv);
          break;
        case LayerKind::conv_transpose:
          h = conv_transpose2d(h, vars_[l.weight], &vars_[l.bias], l.conv);
          break;
        case LayerKind::reshape: {
          Shape s{batch};
          s.insert(s.end(), l.per_sample.begin(), l.per_sample.end());
          h = reshape(h, std::move(s));
          break;
        }
      }
      if (l.act == Activation::relu) h = relu(h);
      if (l.act == Activation::sigmoid) h = sigmoid(h);
    }
    return h;
  }

  Tape* tape_;
  const VaeModel* model_;
  std::vector<Var> vars_;
};

inline GaussianLatent reparameterize(const EncoderOutput& enc, Rng& rng) {
  Tape& t = enc.mu.tape();
  Tensor eps(enc.mu.shape());
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& e : eps.data()) e = n(rng);
  Var std_dev = exp(scale(enc.logvar, 0.5));
  Var z = add(enc.mu, mul(std_dev, t.constant(eps)));
  return {z, std::move(eps), enc.mu, enc.logvar};
}

// Evaluation helpers: untracked passes returning plain tensors.
inline Tensor encode_mean(const VaeModel& m, const Tensor& x) {
  Tape t;
  BoundModel bm(t, m, false);
  return bm.encode(t.constant(x)).mu.value();
}

inline Tensor decode_values(const VaeModel& m, const Tensor& z) {
  Tape t;
  BoundModel bm(t, m, false);
  return bm.decode(t.constant(z)).value();
}

}  // namespace lvae
