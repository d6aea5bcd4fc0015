#pragma once

// Experiment harness: the seeded training loop, checkpoint evaluation,
// beta sweeps, latent traversals and the fixed-beta ablation, together with
// their CSV and image outputs.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lvae/checkpoint.hpp"
#include "lvae/data.hpp"
#include "lvae/losses.hpp"
#include "lvae/metrics.hpp"
#include "lvae/nets.hpp"
#include "lvae/optim.hpp"
#include "lvae/rng.hpp"
#include "lvae/tensor.hpp"

namespace lvae {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  Regime regime = Regime::vae;
  double beta = 1.0;
  Arch arch = Arch::mlp;
  std::size_t latent = 5;
  std::size_t hidden = 256;
  std::string data_path;           // empty: generate from `generator`
  GeneratorOptions generator;
  std::size_t batch = 64;
  std::int64_t iters = 20000;
  double lr_start = 1e-5;
  double lr_peak = 1e-4;
  double lr_final = 1e-6;
  std::int64_t ramp_iters = -1;    // negative: half of iters
  std::uint64_t seed = 0;
  MetricConfig metrics;
  std::int64_t log_every = 100;
  std::int64_t eval_interval = 1000;
  std::filesystem::path out_dir;   // empty: keep everything in memory
  WeightRegularizer regularizer = WeightRegularizer::squared;
  std::optional<double> kl_set, k_p, k_i, beta_init;

  LrSchedule schedule() const {
    return {lr_start, lr_peak, lr_final, ramp_iters < 0 ? iters / 2 : ramp_iters, iters};
  }

  LossWeights initial_weights() const {
    LossWeights w = LossWeights::make(regime, beta);
    w.regularizer = regularizer;
    auto& c = w.controller;
    if (kl_set) c.kl_set = *kl_set;
    if (k_p) c.k_p = *k_p;
    if (k_i) c.k_i = *k_i;
    if (beta_init) c.beta_floor = c.beta_current = *beta_init;
    return w;
  }

  void validate() const {
    if (latent == 0) throw std::invalid_argument("config: latent must be positive");
    if (batch == 0) throw std::invalid_argument("config: batch must be positive");
    if (iters <= 0) throw std::invalid_argument("config: iters must be positive");
    if (log_every <= 0 || eval_interval <= 0) throw std::invalid_argument("config: intervals must be positive");
    if (beta < 0.0) throw std::invalid_argument("config: beta must be >= 0");
    if (ramp_iters > iters) throw std::invalid_argument("config: ramp-iters exceeds iters");
    if (!(lr_start > 0 && lr_peak > 0 && lr_final > 0)) throw std::invalid_argument("config: learning rates must be positive");
  }
};

inline FactorDataset load_dataset(const RunConfig& cfg) {
  if (cfg.data_path.empty()) return generate_minidsprites(cfg.generator);
  return load_fds(cfg.data_path);
}

inline VaeModel build_model(const RunConfig& cfg, ImageDims dims) {
  const std::uint64_t s = derive_seed(cfg.seed, Stream::init);
  return cfg.arch == Arch::mlp ? build_mlp(cfg.latent, dims, cfg.hidden, s) : build_cnn(cfg.latent, dims, s);
}

// ---------------------------------------------------------------------------
// Training log.

struct TrainLogRow {
  std::int64_t iteration = 0;
  double lr = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double total = 0.0;
  double sigma0 = 1.0;
  double sigma1 = 1.0;
  double effective_beta = 1.0;
  std::optional<double> val_betavae;
};

struct TrainLog {
  bool has_sigma = false;
  std::vector<TrainLogRow> rows;
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string train_log_csv(const TrainLog& log) {
  std::ostringstream o;
  o << "iteration,lr,recon,kl,total," << (log.has_sigma ? "sigma0,sigma1," : "") << "effective_beta,val_betavae\n";
  for (const auto& r : log.rows) {
    o << r.iteration << ',' << format_double(r.lr) << ',' << format_double(r.recon) << ',' << format_double(r.kl)
      << ',' << format_double(r.total) << ',';
    if (log.has_sigma) o << format_double(r.sigma0) << ',' << format_double(r.sigma1) << ',';
    o << format_double(r.effective_beta) << ',' << (r.val_betavae ? format_double(*r.val_betavae) : "") << '\n';
  }
  return o.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline TrainLog parse_train_log(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("train log: empty");
  const auto header = split_csv_line(line);
  TrainLog log;
  log.has_sigma = header.size() == 9;
  const std::size_t expect = log.has_sigma ? 9 : 7;
  if (header.size() != expect || header.front() != "iteration" || header.back() != "val_betavae")
    throw std::runtime_error("train log: unexpected header '" + line + "'");
  while (std::getline(in, line)) {
    auto c = split_csv_line(line);
    if (c.size() != expect) throw std::runtime_error("train log: bad row '" + line + "'");
    TrainLogRow r;
    std::size_t i = 0;
    r.iteration = std::stoll(c[i++]);
    r.lr = std::stod(c[i++]);
    r.recon = std::stod(c[i++]);
    r.kl = std::stod(c[i++]);
    r.total = std::stod(c[i++]);
    if (log.has_sigma) {
      r.sigma0 = std::stod(c[i++]);
      r.sigma1 = std::stod(c[i++]);
    }
    r.effective_beta = std::stod(c[i++]);
    if (!c[i].empty()) r.val_betavae = std::stod(c[i]);
    log.rows.push_back(r);
  }
  return log;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------
// Training.

struct StepLoss {
  RegimeLoss loss;
  std::vector<Var> learnable_vars;
};

// Builds the regime objective on `tape` for a batch already encoded and
// decoded; learnable loss weights become tape leaves.
inline StepLoss regime_objective(Tape& tape, const Var& x, const Var& xbar, const EncoderOutput& enc,
                                 LossWeights& w) {
  Var recon = recon_mse(x, xbar);
  Var kl = kl_gauss(enc.mu, enc.logvar);
  switch (w.regime) {
    case Regime::vae: return {beta_vae_loss(recon, kl, 1.0), {}};
    case Regime::beta_vae: return {beta_vae_loss(recon, kl, w.beta), {}};
    case Regime::control_vae:
    case Regime::dynamic_vae: return {beta_vae_loss(recon, kl, w.controller.beta_current), {}};
    case Regime::l_vae: {
      Var s0 = tape.leaf(w.s0), s1 = tape.leaf(w.s1);
      return {lvae_loss(recon, kl, s0, s1, w.regularizer), {s0, s1}};
    }
    case Regime::sigma_vae: {
      Var ls = tape.leaf(w.log_decoder_sigma);
      return {sigma_vae_loss(x, xbar, kl, ls), {ls}};
    }
  }
  throw std::logic_error("unknown regime");
}

struct TrainResult {
  VaeModel model;
  LossWeights weights;
  TrainLog log;
  SplitIndices splits;
  std::int64_t best_iteration = -1;
  double best_score = -1.0;
  Checkpoint best;
};

inline double validation_betavae(const VaeModel& m, const FactorDataset& ds, const SplitIndices& s,
                                 const RunConfig& cfg) {
  MetricConfig mc = cfg.metrics;
  mc.seed = derive_seed(cfg.seed, Stream::validation);
  return betavae_score(encode_dataset(m, ds, s.val), mc);
}

inline TrainResult train(const RunConfig& cfg, const FactorDataset& ds, std::ostream* progress = nullptr) {
  cfg.validate();
  if (ds.size() == 0) throw std::invalid_argument("train: empty dataset");
  const ImageDims dims{ds.height, ds.width, ds.channels};
  TrainResult res;
  res.splits = split(ds, {}, cfg.seed);
  res.model = build_model(cfg, dims);
  res.weights = cfg.initial_weights();
  res.log.has_sigma = cfg.regime == Regime::l_vae;
  const LrSchedule sched = cfg.schedule();
  AdamState adam;
  Rng batch_rng = make_rng(cfg.seed, Stream::batches);
  Rng noise_rng = make_rng(cfg.seed, Stream::noise);
  const auto& train_rows = res.splits.train;
  std::uniform_int_distribution<std::size_t> pick(0, train_rows.size() - 1);
  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

  std::vector<std::size_t> batch(cfg.batch);
  for (std::int64_t it = 0; it <= cfg.iters; ++it) {
    for (auto& b : batch) b = train_rows[pick(batch_rng)];
    Tape tape;
    BoundModel bm(tape, res.model, true);
    Var x = tape.constant(to_batch(ds, batch));
    EncoderOutput enc = bm.encode(x);
    GaussianLatent lat = reparameterize(enc, noise_rng);
    Var xbar = bm.decode(lat.z);
    const double beta_used = effective_beta(res.weights);
    StepLoss step = regime_objective(tape, x, xbar, enc, res.weights);
    const LossReport& rep = step.loss.report;
    const double lr = lr_at(sched, it);

    if (!std::isfinite(rep.total)) {
      std::ostringstream msg;
      msg << "non-finite loss at iteration " << it << " (recon " << rep.recon << ", kl " << rep.kl << ", sigma0 "
          << res.weights.sigma0() << ", sigma1 " << res.weights.sigma1() << ", decoder sigma "
          << res.weights.decoder_sigma() << "); batch rows:";
      for (auto b : batch) msg << ' ' << b;
      throw TrainingError(msg.str());
    }

    const bool evaluate_now = (it > 0 && it % cfg.eval_interval == 0) || it == cfg.iters;
    if (it % cfg.log_every == 0 || evaluate_now) {
      TrainLogRow row{it, lr, rep.recon, rep.kl, rep.total, res.weights.sigma0(), res.weights.sigma1(),
                      beta_used, std::nullopt};
      if (evaluate_now) {
        const double score = validation_betavae(res.model, ds, res.splits, cfg);
        row.val_betavae = score;
        Checkpoint ck{res.model, res.weights, static_cast<std::uint64_t>(it)};
        if (score > res.best_score) {
          res.best_score = score;
          res.best_iteration = it;
          res.best = ck;
        }
        if (!cfg.out_dir.empty()) save_checkpoint(ck, cfg.out_dir / ("ckpt_" + std::to_string(it) + ".lvae"));
      }
      res.log.rows.push_back(row);
      if (progress)
        *progress << regime_name(cfg.regime) << " it " << it << " recon " << rep.recon << " kl " << rep.kl
                  << " beta " << beta_used
                  << (row.val_betavae ? " val_betavae " + format_double(*row.val_betavae) : std::string()) << '\n';
    }
    if (it == cfg.iters) break;

    Gradients g = tape.backward(step.loss.total);
    std::vector<Tensor*> params;
    std::vector<Tensor> grads;
    for (std::size_t i = 0; i < res.model.params.size(); ++i) {
      params.push_back(&res.model.params[i]);
      grads.push_back(g.grad(bm.vars()[i]));
    }
    auto learn = res.weights.learnables();
    for (std::size_t i = 0; i < learn.size(); ++i) {
      params.push_back(learn[i]);
      grads.push_back(g.grad(step.learnable_vars[i]));
    }
    adam_step(params, grads, adam, lr);
    if (cfg.regime == Regime::control_vae || cfg.regime == Regime::dynamic_vae)
      res.weights.controller = controller_step(res.weights.controller, rep.kl);
  }

  if (!cfg.out_dir.empty()) {
    write_text(cfg.out_dir / "train_log.csv", train_log_csv(res.log));
    save_checkpoint(res.best, cfg.out_dir / "ckpt_best.lvae");
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalRow {
  Regime regime = Regime::vae;
  double parameter = 1.0;  // effective beta
  MetricReport report;
};

inline std::string metrics_csv_header() { return std::string("regime,parameter,") + metric_csv_header(); }

inline std::string metrics_csv_row(const EvalRow& r) {
  return std::string(regime_name(r.regime)) + "," + format_double(r.parameter) + "," + metric_csv_values(r.report);
}

inline EvalRow evaluate(const Checkpoint& ck, const FactorDataset& ds, const RunConfig& cfg) {
  const auto& d = ck.model.dims;
  if (d.height != ds.height || d.width != ds.width || d.channels != ds.channels)
    throw std::invalid_argument("evaluate: checkpoint expects " + std::to_string(d.height) + "x" +
                                std::to_string(d.width) + "x" + std::to_string(d.channels) + " images, dataset has " +
                                std::to_string(ds.height) + "x" + std::to_string(ds.width) + "x" +
                                std::to_string(ds.channels));
  const SplitIndices s = split(ds, {}, cfg.seed);
  MetricConfig mc = cfg.metrics;
  mc.seed = derive_seed(cfg.seed, Stream::metrics);
  return {ck.weights.regime, effective_beta(ck.weights), evaluate_all(ck.model, ds, s.test, mc)};
}

// ---------------------------------------------------------------------------
// Sweep.

struct SweepGrid {
  std::vector<double> betas{0.5, 1.0, 2.0, 4.0};
  std::vector<std::size_t> batches{64};
  std::vector<double> lrs{1e-4};  // peak learning rates
  std::vector<std::int64_t> iters{20000};
  std::vector<std::uint64_t> seeds{0};
};

struct SweepRow {
  double beta = 0.0;
  std::size_t batch = 0;
  double lr = 0.0;
  std::int64_t iters = 0;
  std::uint64_t seed = 0;
  double recon = std::nan("");
  double betavae_score = std::nan("");
  std::string error;  // empty on success
};

inline const char* sweep_csv_header() { return "beta,batch,lr,iters,seed,recon,betavae_score"; }

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream o;
  o << sweep_csv_header() << '\n';
  for (const auto& r : rows)
    o << format_double(r.beta) << ',' << r.batch << ',' << format_double(r.lr) << ',' << r.iters << ',' << r.seed
      << ',' << format_double(r.recon) << ',' << format_double(r.betavae_score) << '\n';
  return o.str();
}

inline std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != sweep_csv_header()) throw std::runtime_error("sweep csv: bad header");
  std::vector<SweepRow> rows;
  while (std::getline(in, line)) {
    auto c = split_csv_line(line);
    if (c.size() != 7) throw std::runtime_error("sweep csv: bad row '" + line + "'");
    SweepRow r;
    r.beta = std::stod(c[0]);
    r.batch = std::stoull(c[1]);
    r.lr = std::stod(c[2]);
    r.iters = std::stoll(c[3]);
    r.seed = std::stoull(c[4]);
    r.recon = std::stod(c[5]);
    r.betavae_score = std::stod(c[6]);
    rows.push_back(r);
  }
  return rows;
}

// Trains every grid point with the base config, scoring the final model on
// the test split. A failing point keeps NaN scores and the run continues;
// failures are also listed in sweep_errors.txt.
inline std::vector<SweepRow> sweep(const RunConfig& base, const SweepGrid& grid, const FactorDataset& ds,
                                   std::ostream* progress = nullptr) {
  if (grid.betas.empty() || grid.batches.empty() || grid.lrs.empty() || grid.iters.empty() || grid.seeds.empty())
    throw std::invalid_argument("sweep: every grid axis needs at least one value");
  std::vector<SweepRow> rows;
  std::string errors;
  for (double beta : grid.betas)
    for (std::size_t batch : grid.batches)
      for (double lr : grid.lrs)
        for (std::int64_t iters : grid.iters)
          for (std::uint64_t seed : grid.seeds) {
            SweepRow row;
            row.beta = beta;
            row.batch = batch;
            row.lr = lr;
            row.iters = iters;
            row.seed = seed;
            RunConfig cfg = base;
            cfg.beta = beta;
            cfg.batch = batch;
            cfg.lr_peak = lr;
            cfg.iters = iters;
            cfg.seed = seed;
            if (cfg.ramp_iters > iters) cfg.ramp_iters = -1;
            if (!base.out_dir.empty()) {
              char name[160];
              std::snprintf(name, sizeof name, "run_beta%g_bs%zu_lr%g_it%lld_seed%llu", beta, batch, lr,
                            static_cast<long long>(iters), static_cast<unsigned long long>(seed));
              cfg.out_dir = base.out_dir / name;
            }
            try {
              TrainResult tr = train(cfg, ds, progress);
              MetricConfig mc = cfg.metrics;
              mc.seed = derive_seed(seed, Stream::metrics);
              row.recon = reconstruction_error(tr.model, ds, tr.splits.test);
              row.betavae_score = betavae_score(encode_dataset(tr.model, ds, tr.splits.test), mc);
            } catch (const std::exception& e) {
              row.error = e.what();
              errors += "beta=" + format_double(beta) +
                        " batch=" + std::to_string(batch) + " lr=" + format_double(lr) +
                        " iters=" + std::to_string(iters) + " seed=" + std::to_string(seed) + ": " + e.what() + "\n";
            }
            rows.push_back(row);
          }
  if (!base.out_dir.empty()) {
    write_text(base.out_dir / "sweep.csv", sweep_csv(rows));
    if (!errors.empty()) write_text(base.out_dir / "sweep_errors.txt", errors);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Latent traversal.

struct ImageGrid {
  std::size_t rows = 0, cols = 0;
  std::size_t tile_height = 0, tile_width = 0, channels = 1;
  std::vector<std::uint8_t> pixels;  // (rows*tile_h) x (cols*tile_w) x channels

  std::size_t height() const { return rows * tile_height; }
  std::size_t width() const { return cols * tile_width; }

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width() + x) * channels + c];
  }

  // Tile (r, c) as a tile_h x tile_w x channels block.
  std::vector<std::uint8_t> tile(std::size_t r, std::size_t c) const {
    std::vector<std::uint8_t> out;
    for (std::size_t y = 0; y < tile_height; ++y)
      for (std::size_t x = 0; x < tile_width; ++x)
        for (std::size_t ch = 0; ch < channels; ++ch)
          out.push_back(at(r * tile_height + y, c * tile_width + x, ch));
    return out;
  }
};

// Binary PGM (P5) for one channel, PPM (P6) for three.
inline std::vector<std::uint8_t> encode_pnm(const ImageGrid& g) {
  if (g.channels != 1 && g.channels != 3) throw std::invalid_argument("encode_pnm: need 1 or 3 channels");
  std::string head = (g.channels == 1 ? "P5\n" : "P6\n") + std::to_string(g.width()) + " " +
                     std::to_string(g.height()) + "\n255\n";
  std::vector<std::uint8_t> out(head.begin(), head.end());
  out.insert(out.end(), g.pixels.begin(), g.pixels.end());
  return out;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// One row per sample, one column per step of dimension `dim` across
// [lo, hi]; other coordinates stay at the encoder mean.
inline ImageGrid traverse(const VaeModel& m, const FactorDataset& ds, std::span<const std::size_t> samples,
                          std::size_t dim, double lo, double hi, std::size_t steps) {
  if (dim >= m.latent)
    throw std::out_of_range("traverse: dimension " + std::to_string(dim) + " out of range for latent size " +
                            std::to_string(m.latent));
  if (steps == 0) throw std::invalid_argument("traverse: steps must be positive");
  if (samples.empty()) throw std::invalid_argument("traverse: no samples");
  for (auto s : samples)
    if (s >= ds.size()) throw std::out_of_range("traverse: sample index " + std::to_string(s) + " out of range");
  const std::size_t H = ds.height, W = ds.width, C = ds.channels, L = m.latent;
  const Tensor mu = encode_mean(m, to_batch(ds, samples));
  Tensor z({samples.size() * steps, L});
  for (std::size_t r = 0; r < samples.size(); ++r)
    for (std::size_t c = 0; c < steps; ++c) {
      const double v = steps == 1 ? lo : lo + (hi - lo) * static_cast<double>(c) / static_cast<double>(steps - 1);
      for (std::size_t j = 0; j < L; ++j) z[(r * steps + c) * L + j] = j == dim ? v : mu[r * L + j];
    }
  const Tensor img = decode_values(m, z);
  ImageGrid g{samples.size(), steps, H, W, C, {}};
  g.pixels.assign(g.height() * g.width() * C, 0);
  const std::size_t D = H * W * C;
  for (std::size_t r = 0; r < samples.size(); ++r)
    for (std::size_t c = 0; c < steps; ++c)
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x)
            g.pixels[((r * H + y) * g.width() + c * W + x) * C + ch] =
                to_byte(img[(r * steps + c) * D + (ch * H + y) * W + x]);
  return g;
}

inline std::filesystem::path write_traversal(const ImageGrid& g, const std::filesystem::path& dir, std::size_t dim) {
  std::filesystem::create_directories(dir);
  const auto path = dir / ("traverse_dim" + std::to_string(dim) + (g.channels == 1 ? ".pgm" : ".ppm"));
  detail::write_file(path, encode_pnm(g));
  return path;
}

// ---------------------------------------------------------------------------
// Ablation: L-VAE against a fixed-beta model trained at the learned ratio.

struct AblationRow {
  std::string model;
  EvalRow eval;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows, const RunConfig& cfg) {
  std::ostringstream o;
  o << "model,dataset,arch,latent,batch,iters,seed," << metrics_csv_header() << '\n';
  const std::string dataset = cfg.data_path.empty() ? "minidsprites" : cfg.data_path;
  for (const auto& r : rows)
    o << r.model << ',' << dataset << ',' << arch_name(cfg.arch) << ',' << cfg.latent << ',' << cfg.batch << ','
      << cfg.iters << ',' << cfg.seed << ',' << metrics_csv_row(r.eval) << '\n';
  return o.str();
}

inline std::vector<AblationRow> ablation(const Checkpoint& lvae_ck, const FactorDataset& ds, RunConfig cfg,
                                         std::ostream* progress = nullptr) {
  if (lvae_ck.weights.regime != Regime::l_vae)
    throw std::invalid_argument(std::string("ablate: checkpoint regime is ") + regime_name(lvae_ck.weights.regime) +
                                ", expected l-vae");
  const double beta_hat = effective_beta(lvae_ck.weights);
  std::vector<AblationRow> rows;
  rows.push_back({"l-vae", evaluate(lvae_ck, ds, cfg)});
  cfg.regime = Regime::beta_vae;
  cfg.beta = beta_hat;
  cfg.arch = lvae_ck.model.arch;
  cfg.latent = lvae_ck.model.latent;
  cfg.hidden = lvae_ck.model.hidden;
  const std::filesystem::path out = cfg.out_dir;
  if (!out.empty()) cfg.out_dir = out / "fixed_beta";
  TrainResult tr = train(cfg, ds, progress);
  rows.push_back({"beta-vae", evaluate(tr.best, ds, cfg)});
  if (!out.empty()) write_text(out / "ablation.csv", ablation_csv(rows, cfg));
  return rows;
}

}  // namespace lvae
