#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "farcast/common.hpp"
#include "farcast/dataio.hpp"
#include "farcast/eval.hpp"
#include "farcast/farcaster.hpp"
#include "farcast/trajgen.hpp"
#include "json.hpp"

namespace farcast {

inline constexpr int kConfigSchemaVersion = 1;

struct ModelSpec {
  std::string name;
  ColumnSelector selector;
  bool augment_loss = false;
  TrainConfig train;
};

/// Everything needed to reproduce an experiment from its master seed.
struct RunConfig {
  std::string experiment;
  std::uint64_t master_seed = 0;
  // Seeds inside `problem` and `optimizer` are replaced per trajectory.
  ProblemSpec problem;
  OptimizerConfig optimizer;
  std::size_t num_trajectories = 200;
  Index window_offset = 0;
  Index n_in = 21;
  Index m_out = 180;
  // The split seed is replaced per trial.
  SplitSpec split;
  std::vector<ModelSpec> models;
  std::vector<Index> checkpoints{40, 80, 160, 200};
  std::size_t trials = 5;
  std::filesystem::path output = "runs/out";

  void validate() const;
};

/// Named configurations: syn1-gd, syn1-sgd, syn2-sgd, syn2-adam, each
/// optionally suffixed with -two-step (inputs {w0, w1}) or -loss
/// (loss-augmented LFD-2).
RunConfig preset(std::string_view name);
std::vector<std::string> preset_names();

nlohmann::json to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

// Seed streams.
std::uint64_t trajectory_seed(std::uint64_t master_seed, std::size_t index);
std::uint64_t trial_seed(std::uint64_t master_seed, std::size_t trial);
std::string trajectory_id(std::size_t index);

/// Runs fn(0..count-1) on at most `jobs` threads (0 = hardware concurrency).
/// Rethrows the first exception after all workers finish.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn);

struct GenerationFailure {
  std::size_t index = 0;
  std::string message;
};

struct GenerateSummary {
  std::vector<std::string> written;
  std::vector<GenerationFailure> failures;
};

/// Writes <output>/data/<id>/ per trajectory plus <output>/run.json and
/// <output>/data/generation.json. A diverging trajectory is recorded as a
/// failure and generation continues.
GenerateSummary generate(const RunConfig& cfg, std::size_t jobs = 0);

/// Loads the successfully generated trajectories listed in generation.json.
std::vector<Trajectory> load_generated(const RunConfig& cfg);

/// The per-trial split of the generated trajectories.
Partition trial_partition(const RunConfig& cfg, std::size_t trial, std::size_t count);

struct TrainSummary {
  std::size_t models_written = 0;
  std::vector<std::filesystem::path> model_dirs;
};

/// Trains every configured model for every trial; writes
/// <output>/models/trial_<t>/<name>/{model.json,params.f64le,curve.csv}.
TrainSummary train_models(const RunConfig& cfg, std::size_t jobs = 0);

struct EvaluateOptions {
  bool export_predictions = false;
  std::size_t jobs = 0;
};

/// Writes <output>/report.csv, report.json and timing.json; returns the reports.
std::vector<EvalReport> evaluate_models(const RunConfig& cfg, const EvaluateOptions& options = {});

struct Prop1Summary {
  double max_error = 0.0;
  std::size_t trials = 0;
  bool passed = false;
};

inline constexpr double kProp1Tolerance = 1e-10;

/// Random scalar affine schedules (|c| <= c_bound), simulated and checked
/// against the closed-form map. `perturb_b` is added to b*[0] for fault injection.
Prop1Summary verify_prop1(Index n, Index m, std::size_t trials, std::uint64_t seed,
                          Index dim = 3, double c_bound = 1.05, double perturb_b = 0.0);

}  // namespace farcast
