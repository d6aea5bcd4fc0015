// lvae: command-line front end for data generation, training, evaluation,
// beta sweeps, latent traversals and the fixed-beta ablation.

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "lvae/lvae.hpp"

namespace {

struct Flags {
  lvae::RunConfig cfg;
  std::string regime = "vae";
  std::string arch = "mlp";
  std::string regularizer = "squared";
  std::string out = "out";
  double kl_set = 0, kp = 0, ki = 0, beta_init = 0;
  std::size_t votes = 800;
  bool quiet = false;
};

void add_run_flags(CLI::App* app, Flags& f) {
  auto& c = f.cfg;
  app->add_option("--regime", f.regime, "vae|beta-vae|l-vae|sigma-vae|control-vae|dynamic-vae")
      ->check(CLI::IsMember({"vae", "beta-vae", "l-vae", "sigma-vae", "control-vae", "dynamic-vae"}));
  app->add_option("--beta", c.beta, "KL weight for beta-vae");
  app->add_option("--arch", f.arch, "mlp|cnn")->check(CLI::IsMember({"mlp", "cnn"}));
  app->add_option("--latent", c.latent, "latent dimensions");
  app->add_option("--hidden", c.hidden, "MLP hidden width");
  app->add_option("--data", c.data_path, "FDS dataset (default: generate mini-dSprites)");
  app->add_option("--size", c.generator.image_size, "side of generated images when --data is absent");
  app->add_option("--batch", c.batch, "batch size");
  app->add_option("--iters", c.iters, "training iterations");
  app->add_option("--seed", c.seed, "root seed");
  app->add_option("--out", f.out, "output directory");
  app->add_option("--kl-set", f.kl_set, "controller KL set point");
  app->add_option("--kp", f.kp, "controller proportional gain");
  app->add_option("--ki", f.ki, "controller integral gain");
  app->add_option("--beta-init", f.beta_init, "controller initial beta (also its floor)");
  app->add_option("--lr-start", c.lr_start, "learning rate at iteration 0");
  app->add_option("--lr-peak", c.lr_peak, "learning rate at the end of the ramp");
  app->add_option("--lr-final", c.lr_final, "learning rate at the last iteration");
  app->add_option("--ramp-iters", c.ramp_iters, "warm-up length (default: half of --iters)");
  app->add_option("--eval-interval", c.eval_interval, "iterations between validation scores");
  app->add_option("--log-every", c.log_every, "iterations between log rows");
  app->add_option("--regularizer", f.regularizer, "l-vae weight regularizer: squared|log")
      ->check(CLI::IsMember({"squared", "log"}));
  app->add_option("--votes", f.votes, "training votes for the beta-VAE and FactorVAE scores");
  app->add_flag("--quiet", f.quiet, "suppress progress lines");
}

// Copies the string flags and any explicitly given controller flags into cfg.
lvae::RunConfig finish(CLI::App* app, Flags& f) {
  auto c = f.cfg;
  c.regime = lvae::parse_regime(f.regime);
  c.arch = lvae::parse_arch(f.arch);
  c.regularizer = f.regularizer == "log" ? lvae::WeightRegularizer::log : lvae::WeightRegularizer::squared;
  c.out_dir = f.out;
  c.metrics.betavae_votes = c.metrics.factorvae_votes = f.votes;
  if (app->count("--kl-set")) c.kl_set = f.kl_set;
  if (app->count("--kp")) c.k_p = f.kp;
  if (app->count("--ki")) c.k_i = f.ki;
  if (app->count("--beta-init")) c.beta_init = f.beta_init;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"L-VAE experiment tool"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write the procedural mini-dSprites dataset as FDS");
  lvae::GeneratorOptions gopt;
  std::string gen_out = "out";
  gen->add_option("--size", gopt.image_size, "image side in pixels");
  gen->add_option("--seed", gopt.seed, "subsampling seed");
  gen->add_option("--subsample", gopt.subsample, "keep this many random rows (0 = all)");
  gen->add_option("--out", gen_out, "output directory");

  Flags train_f, eval_f, sweep_f, trav_f, abl_f;
  auto* train = app.add_subcommand("train", "train one model");
  add_run_flags(train, train_f);

  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint on the test split");
  add_run_flags(evaluate, eval_f);
  std::string eval_ckpt;
  evaluate->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();

  auto* sweep = app.add_subcommand("sweep", "train a grid of models and write sweep.csv");
  add_run_flags(sweep, sweep_f);
  lvae::SweepGrid grid;
  sweep->add_option("--betas", grid.betas, "beta grid")->delimiter(',');
  sweep->add_option("--batches", grid.batches, "batch-size grid")->delimiter(',');
  sweep->add_option("--lrs", grid.lrs, "peak learning-rate grid")->delimiter(',');
  sweep->add_option("--iters-grid", grid.iters, "iteration grid")->delimiter(',');
  sweep->add_option("--seeds", grid.seeds, "seed list")->delimiter(',');

  auto* traverse = app.add_subcommand("traverse", "decode sweeps of one latent coordinate");
  add_run_flags(traverse, trav_f);
  std::string trav_ckpt;
  std::size_t dim = 0, steps = 9;
  double lo = -2.0, hi = 2.0;
  std::vector<std::size_t> samples{0, 1, 2, 3};
  traverse->add_option("--ckpt", trav_ckpt, "checkpoint file")->required();
  traverse->add_option("--dim", dim, "latent dimension to sweep");
  traverse->add_option("--lo", lo, "sweep start");
  traverse->add_option("--hi", hi, "sweep end");
  traverse->add_option("--steps", steps, "number of columns");
  traverse->add_option("--samples", samples, "dataset rows, one grid row each")->delimiter(',');

  auto* ablate = app.add_subcommand("ablate", "compare an l-vae checkpoint with beta-vae at its learned ratio");
  add_run_flags(ablate, abl_f);
  std::string abl_ckpt;
  ablate->add_option("--ckpt", abl_ckpt, "l-vae checkpoint file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto ds = lvae::generate_minidsprites(gopt);
      const auto path = std::filesystem::path(gen_out) / ("minidsprites" + std::to_string(gopt.image_size) + ".fds");
      std::filesystem::create_directories(gen_out);
      lvae::save_fds(ds, path);
      for (const auto& n : ds.notes) std::cerr << "note: " << n << '\n';
      std::cout << path.string() << ": " << ds.size() << " images\n";
    } else if (*train) {
      const auto cfg = finish(train, train_f);
      const auto ds = lvae::load_dataset(cfg);
      const auto res = lvae::train(cfg, ds, train_f.quiet ? nullptr : &std::cerr);
      std::cout << "best validation beta-VAE score " << res.best_score << " at iteration " << res.best_iteration
                << "; effective beta " << lvae::effective_beta(res.weights) << '\n'
                << (cfg.out_dir / "train_log.csv").string() << '\n';
    } else if (*evaluate) {
      const auto cfg = finish(evaluate, eval_f);
      const auto ds = lvae::load_dataset(cfg);
      const auto row = lvae::evaluate(lvae::load_checkpoint(eval_ckpt), ds, cfg);
      const std::string text = lvae::metrics_csv_header() + "\n" + lvae::metrics_csv_row(row) + "\n";
      lvae::write_text(cfg.out_dir / "metrics.csv", text);
      std::cout << text;
    } else if (*sweep) {
      const auto cfg = finish(sweep, sweep_f);
      const auto ds = lvae::load_dataset(cfg);
      const auto rows = lvae::sweep(cfg, grid, ds, sweep_f.quiet ? nullptr : &std::cerr);
      std::cout << lvae::sweep_csv(rows);
      for (const auto& r : rows)
        if (!r.error.empty()) std::cerr << "failed: beta " << r.beta << " seed " << r.seed << ": " << r.error << '\n';
    } else if (*traverse) {
      const auto cfg = finish(traverse, trav_f);
      const auto ds = lvae::load_dataset(cfg);
      const auto ck = lvae::load_checkpoint(trav_ckpt);
      const auto g = lvae::traverse(ck.model, ds, samples, dim, lo, hi, steps);
      std::cout << lvae::write_traversal(g, cfg.out_dir, dim).string() << '\n';
    } else if (*ablate) {
      const auto cfg = finish(ablate, abl_f);
      const auto ds = lvae::load_dataset(cfg);
      const auto rows = lvae::ablation(lvae::load_checkpoint(abl_ckpt), ds, cfg, abl_f.quiet ? nullptr : &std::cerr);
      std::cout << lvae::ablation_csv(rows, cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
