// farcast: generate optimizer trajectories, train linear farcasters and
// evaluate them.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <fmt/core.h>

#include "CLI11.hpp"
#include "farcast/dataio.hpp"
#include "farcast/eval.hpp"
#include "farcast/farcaster.hpp"
#include "farcast/pipeline.hpp"

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitPartial = 3;

struct UsageError : farcast::Error {
  using farcast::Error::Error;
};

struct RunOptions {
  std::string config_path;
  std::string preset_name;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 0;
  std::string output;
};

void add_run_options(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--config", o.config_path, "Run configuration (JSON)");
  cmd->add_option("--preset", o.preset_name, "Named configuration, e.g. syn1-gd");
  cmd->add_option("--seed", o.seed, "Master seed (overrides the config)");
  cmd->add_option("--jobs", o.jobs, "Worker threads (0 = all cores)");
  cmd->add_option("--output", o.output, "Output directory (overrides the config)");
}

farcast::RunConfig resolve_config(const RunOptions& o) {
  if (o.config_path.empty() == o.preset_name.empty()) {
    throw UsageError("exactly one of --config or --preset is required");
  }
  farcast::RunConfig cfg =
      o.config_path.empty() ? farcast::preset(o.preset_name) : farcast::load_config(o.config_path);
  if (o.seed) cfg.master_seed = *o.seed;
  if (!o.output.empty()) cfg.output = o.output;
  if (cfg.models.empty()) throw UsageError("the configuration lists no models");
  return cfg;
}

// Short machine-readable tag for the error line.
const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const farcast::DivergenceError*>(&e)) return "divergence";
  if (dynamic_cast<const farcast::ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const farcast::FormatError*>(&e)) return "format";
  if (dynamic_cast<const farcast::NumericError*>(&e)) return "numeric";
  return "failure";
}

void print_reports(const std::vector<farcast::EvalReport>& reports) {
  for (const auto& r : reports) {
    std::string line = fmt::format("{:<10}", r.model);
    for (std::size_t c = 0; c < r.checkpoints.size(); ++c) {
      line += fmt::format("  t={}: {:.4g}", r.checkpoints[c], r.mse_mean[c]);
      if (r.mse_std[c]) line += fmt::format(" ({:.2g})", *r.mse_std[c]);
    }
    fmt::print("{}\n", line);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Long-horizon optimizer weight forecasting with linear farcasters"};
  app.require_subcommand(1);

  RunOptions gen_opts, train_opts, eval_opts;
  auto* gen = app.add_subcommand("generate", "Generate synthetic optimizer trajectories");
  add_run_options(gen, gen_opts);

  auto* trn = app.add_subcommand("train", "Train every configured farcaster for every trial");
  add_run_options(trn, train_opts);

  bool export_predictions = false;
  auto* evl = app.add_subcommand("evaluate", "Checkpoint MSE report for trained farcasters");
  add_run_options(evl, eval_opts);
  evl->add_flag("--export-predictions", export_predictions,
                "Write per-sequence prediction CSVs for the first trial");

  std::string model_dir, traj_dir, pred_out;
  farcast::Index pred_offset = 0;
  auto* prd = app.add_subcommand("predict", "Forecast one trajectory with a trained model");
  prd->add_option("--model", model_dir, "Model directory")->required();
  prd->add_option("--trajectory", traj_dir, "Trajectory directory or manifest.json")->required();
  prd->add_option("--offset", pred_offset, "First trajectory step of the input window");
  prd->add_option("--output", pred_out, "Output CSV (stdout when omitted)");

  farcast::Index prop_n = 20, prop_m = 180, prop_dim = 3;
  std::size_t prop_trials = 100;
  std::uint64_t prop_seed = 2024;
  double prop_c_bound = 1.05, prop_perturb = 0.0;
  auto* prop = app.add_subcommand("verify-prop1", "Check the closed-form farcaster on affine updates");
  prop->add_option("--n", prop_n, "Index of the last observed step (input has n+1 steps)");
  prop->add_option("--m", prop_m, "Forecast horizon");
  prop->add_option("--trials", prop_trials, "Random schedules");
  prop->add_option("--seed", prop_seed, "Seed");
  prop->add_option("--dim", prop_dim, "Coordinates per trajectory");
  prop->add_option("--c-bound", prop_c_bound, "Bound on |c_i|");
  prop->add_option("--perturb-b", prop_perturb, "Offset added to b*[0] (fault injection)");

  std::uint64_t flops_m = 0, flops_d = 0;
  bool last_only = false;
  auto* flp = app.add_subcommand("flops", "FLOPs of iterative updates versus one farcast");
  flp->add_option("--m", flops_m, "Number of future steps")->required();
  flp->add_option("--d", flops_d, "Parameter dimension")->required();
  flp->add_flag("--last-only", last_only, "Only the m-th step is forecast");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = resolve_config(gen_opts);
      const auto summary = farcast::generate(cfg, gen_opts.jobs);
      fmt::print("generated {} trajectories in {}\n", summary.written.size(),
                 (cfg.output / "data").string());
      for (const auto& f : summary.failures) {
        fmt::print(stderr, "error: divergence: {}: {}\n", farcast::trajectory_id(f.index), f.message);
      }
      return summary.failures.empty() ? 0 : kExitPartial;
    }
    if (trn->parsed()) {
      const auto cfg = resolve_config(train_opts);
      const auto summary = farcast::train_models(cfg, train_opts.jobs);
      fmt::print("trained {} models in {}\n", summary.models_written, (cfg.output / "models").string());
      return 0;
    }
    if (evl->parsed()) {
      const auto cfg = resolve_config(eval_opts);
      const auto reports = farcast::evaluate_models(cfg, {export_predictions, eval_opts.jobs});
      print_reports(reports);
      fmt::print("report written to {}\n", (cfg.output / "report.csv").string());
      return 0;
    }
    if (prd->parsed()) {
      const auto model = farcast::load_model(model_dir);
      const auto traj = farcast::import_external(traj_dir);
      const auto w = farcast::window(traj, pred_offset, model.n_in, model.m_out);
      const std::string csv = farcast::prediction_csv(model, w);
      if (pred_out.empty()) {
        std::cout << csv;
      } else {
        std::ofstream out(pred_out, std::ios::binary | std::ios::trunc);
        out << csv;
        if (!out) throw farcast::FormatError(fmt::format("cannot write {}", pred_out));
      }
      return 0;
    }
    if (prop->parsed()) {
      const auto s = farcast::verify_prop1(prop_n, prop_m, prop_trials, prop_seed, prop_dim,
                                           prop_c_bound, prop_perturb);
      fmt::print("verify-prop1 n={} m={} trials={} max_abs_error={:.3e} tolerance={:.0e} {}\n", prop_n,
                 prop_m, s.trials, s.max_error, farcast::kProp1Tolerance, s.passed ? "PASS" : "FAIL");
      return s.passed ? 0 : kExitFailure;
    }
    if (flp->parsed()) {
      const auto iterative = farcast::flops_iterative(flops_m, flops_d);
      const auto farcast_flops = farcast::flops_farcast(flops_m, flops_d, last_only);
      fmt::print("iterative_flops={}\nfarcast_flops={}\nspeedup={}\n", iterative, farcast_flops,
                 static_cast<double>(iterative) / static_cast<double>(farcast_flops));
      return 0;
    }
  } catch (const UsageError& e) {
    fmt::print(stderr, "error: usage: {}\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}: {}\n", error_kind(e), e.what());
    return kExitFailure;
  }
  return kExitUsage;
}
