#include "farcast/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <random>
#include <thread>

#include <fmt/core.h>

#include "farcast/closedform.hpp"

namespace farcast {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::uint64_t kTrialStream = 0x747269616CULL;  // "trial"

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw FormatError(fmt::format("cannot write {}", path.string()));
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("missing {}", path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("malformed {}: {}", path.string(), e.what()));
  }
}

ModelSpec model_spec(const ColumnSelector& selector, bool augment_loss = false) {
  ModelSpec spec;
  spec.selector = selector;
  spec.augment_loss = augment_loss;
  spec.name = std::string(selector.model_name()) + (augment_loss ? "+loss" : "");
  return spec;
}

json train_to_json(const TrainConfig& t) {
  return {{"beta", t.beta},
          {"learning_rate", t.learning_rate},
          {"max_epochs", t.max_epochs},
          {"patience", t.patience},
          {"init", to_string(t.init)},
          {"penalize_boundary", t.penalize_boundary},
          {"lr_decay_factor", t.lr_decay_factor},
          {"lr_decay_patience", t.lr_decay_patience},
          {"min_learning_rate", t.min_learning_rate}};
}

TrainConfig train_from_json(const json& j, TrainConfig t) {
  t.beta = j.value("beta", t.beta);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.max_epochs = j.value("max_epochs", t.max_epochs);
  t.patience = j.value("patience", t.patience);
  if (j.contains("init")) t.init = parse_init_kind(j.at("init").get<std::string>());
  t.penalize_boundary = j.value("penalize_boundary", t.penalize_boundary);
  t.lr_decay_factor = j.value("lr_decay_factor", t.lr_decay_factor);
  t.lr_decay_patience = j.value("lr_decay_patience", t.lr_decay_patience);
  t.min_learning_rate = j.value("min_learning_rate", t.min_learning_rate);
  return t;
}

fs::path data_dir(const RunConfig& cfg) { return cfg.output / "data"; }
fs::path trial_dir(const RunConfig& cfg, std::size_t t) {
  return cfg.output / "models" / fmt::format("trial_{}", t);
}

std::vector<FarcastWindow> windows_of(const std::vector<Trajectory>& trajs,
                                      const std::vector<std::size_t>& indices, const RunConfig& cfg) {
  std::vector<FarcastWindow> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(window(trajs[i], cfg.window_offset, cfg.n_in, cfg.m_out));
  return out;
}

std::string curve_csv(const TrainResult& r) {
  std::string out = "epoch,train_loss,dev_pred_loss\n";
  for (const auto& p : r.curve) {
    out += fmt::format("{},{},{}\n", p.epoch, format_double(p.train_loss),
                       std::isnan(p.dev_pred_loss) ? std::string{} : format_double(p.dev_pred_loss));
  }
  return out;
}

}  // namespace

void RunConfig::validate() const {
  if (num_trajectories == 0) throw Error("config: num_trajectories must be positive");
  if (split.total() != num_trajectories) {
    throw Error(fmt::format("config: split {}/{}/{} does not sum to num_trajectories {}", split.train,
                            split.dev, split.test, num_trajectories));
  }
  if (n_in < 1 || m_out < 1) throw Error("config: window needs n_in >= 1 and m_out >= 1");
  if (window_offset + n_in + m_out > static_cast<Index>(optimizer.num_steps) + 1) {
    throw Error(fmt::format("config: window offset {} + {} + {} exceeds trajectory length {}",
                            window_offset, n_in, m_out, optimizer.num_steps + 1));
  }
  for (Index c : checkpoints) {
    const Index first = window_offset + n_in;
    if (c < first || c >= first + m_out) {
      throw Error(fmt::format("config: checkpoint {} outside predicted steps [{}, {})", c, first,
                              first + m_out));
    }
  }
  if (trials == 0) throw Error("config: trials must be positive");
  std::vector<std::string> names;
  for (const auto& m : models) {
    if (m.name.empty()) throw Error("config: model name must not be empty");
    if (std::find(names.begin(), names.end(), m.name) != names.end()) {
      throw Error(fmt::format("config: duplicate model name '{}'", m.name));
    }
    names.push_back(m.name);
    m.train.validate();
    if (m.augment_loss && !optimizer.record_losses) {
      throw Error(fmt::format("config: model '{}' needs recorded losses", m.name));
    }
  }
  optimizer.validate();
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const char* base : {"syn1-gd", "syn1-sgd", "syn2-sgd", "syn2-adam"}) {
    for (const char* suffix : {"", "-two-step", "-loss"}) out.push_back(std::string(base) + suffix);
  }
  return out;
}

RunConfig preset(std::string_view name) {
  RunConfig cfg;
  cfg.experiment = std::string(name);
  cfg.master_seed = 2024;
  cfg.output = fs::path("runs") / std::string(name);

  std::string_view base = name;
  enum class Variant { Standard, TwoStep, Loss } variant = Variant::Standard;
  if (base.ends_with("-two-step")) {
    variant = Variant::TwoStep;
    base.remove_suffix(std::string_view("-two-step").size());
  } else if (base.ends_with("-loss")) {
    variant = Variant::Loss;
    base.remove_suffix(std::string_view("-loss").size());
  }

  OptimizerConfig& opt = cfg.optimizer;
  opt.num_steps = 200;
  if (base == "syn1-gd") {
    cfg.problem = {ProblemKind::Syn1LeastSquares, 100, 3, 0};
    opt.kind = OptimizerKind::GD;
    opt.hessian_scale = 0.01;
  } else if (base == "syn1-sgd") {
    cfg.problem = {ProblemKind::Syn1LeastSquares, 100, 3, 0};
    opt.kind = OptimizerKind::SGD;
    opt.learning_rate = 0.001;
    opt.batch_size = 8;
  } else if (base == "syn2-sgd") {
    cfg.problem = {ProblemKind::Syn2Mlp, 100, 1, 0};
    opt.kind = OptimizerKind::SGD;
    opt.learning_rate = 0.002;
    opt.batch_size = 64;
  } else if (base == "syn2-adam") {
    cfg.problem = {ProblemKind::Syn2Mlp, 100, 1, 0};
    opt.kind = OptimizerKind::Adam;
    opt.learning_rate = 0.005;
    opt.batch_size = 64;
  } else {
    throw Error(fmt::format("unknown preset '{}'", name));
  }

  switch (variant) {
    case Variant::Standard:
      cfg.models = {model_spec(ColumnSelector::all()), model_spec(ColumnSelector::random_k(4, 0)),
                    model_spec(ColumnSelector::last()), model_spec(ColumnSelector::first_last())};
      break;
    case Variant::TwoStep:
      cfg.n_in = 2;
      cfg.m_out = 199;
      cfg.models = {model_spec(ColumnSelector::first_last())};
      break;
    case Variant::Loss:
      cfg.models = {model_spec(ColumnSelector::first_last(), true)};
      break;
  }
  return cfg;
}

json to_json(const RunConfig& cfg) {
  const OptimizerConfig& o = cfg.optimizer;
  json models = json::array();
  for (const auto& m : cfg.models) {
    models.push_back({{"name", m.name},
                      {"selector",
                       {{"kind", to_string(m.selector.kind)}, {"k", m.selector.k}, {"seed", m.selector.seed}}},
                      {"augment_loss", m.augment_loss},
                      {"train", train_to_json(m.train)}});
  }
  return {
      {"schema_version", kConfigSchemaVersion},
      {"experiment", cfg.experiment},
      {"master_seed", cfg.master_seed},
      {"problem",
       {{"kind", to_string(cfg.problem.kind)},
        {"num_samples", cfg.problem.num_samples},
        {"feature_dim", cfg.problem.feature_dim}}},
      {"optimizer",
       {{"kind", to_string(o.kind)},
        {"learning_rate", o.learning_rate},
        {"hessian_scale", o.hessian_scale ? json(*o.hessian_scale) : json(nullptr)},
        {"batch_size", o.batch_size ? json(*o.batch_size) : json(nullptr)},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"epsilon", o.epsilon},
        {"weight_decay", o.weight_decay},
        {"num_steps", o.num_steps},
        {"record_losses", o.record_losses}}},
      {"num_trajectories", cfg.num_trajectories},
      {"window", {{"offset", cfg.window_offset}, {"n_in", cfg.n_in}, {"m_out", cfg.m_out}}},
      {"split", {{"train", cfg.split.train}, {"dev", cfg.split.dev}, {"test", cfg.split.test}}},
      {"models", models},
      {"checkpoints", cfg.checkpoints},
      {"trials", cfg.trials},
      {"output", cfg.output.string()},
  };
}

RunConfig config_from_json(const json& j) {
  try {
    if (!j.is_object()) throw FormatError("config must be a JSON object");
    if (!j.contains("schema_version")) throw FormatError("config is missing 'schema_version'");
    const int version = j.at("schema_version").get<int>();
    if (version != kConfigSchemaVersion) {
      throw FormatError(fmt::format("unsupported config schema_version {}", version));
    }
    // A preset supplies defaults; explicit keys override it.
    RunConfig cfg = j.contains("preset") ? preset(j.at("preset").get<std::string>()) : RunConfig{};
    cfg.experiment = j.value("experiment", cfg.experiment);
    cfg.master_seed = j.value("master_seed", cfg.master_seed);
    if (j.contains("problem")) {
      const json& p = j.at("problem");
      if (p.contains("kind")) cfg.problem.kind = parse_problem_kind(p.at("kind").get<std::string>());
      cfg.problem.num_samples = p.value("num_samples", cfg.problem.num_samples);
      cfg.problem.feature_dim = p.value("feature_dim", cfg.problem.feature_dim);
    }
    if (j.contains("optimizer")) {
      const json& o = j.at("optimizer");
      OptimizerConfig& opt = cfg.optimizer;
      if (o.contains("kind")) opt.kind = parse_optimizer_kind(o.at("kind").get<std::string>());
      opt.learning_rate = o.value("learning_rate", opt.learning_rate);
      if (o.contains("hessian_scale")) {
        opt.hessian_scale = o.at("hessian_scale").is_null()
                                ? std::nullopt
                                : std::optional<double>(o.at("hessian_scale").get<double>());
      }
      if (o.contains("batch_size")) {
        const json& b = o.at("batch_size");
        if (b.is_null() || (b.is_string() && b.get<std::string>() == "full")) {
          opt.batch_size = std::nullopt;
        } else {
          opt.batch_size = b.get<Index>();
        }
      }
      opt.beta1 = o.value("beta1", opt.beta1);
      opt.beta2 = o.value("beta2", opt.beta2);
      opt.epsilon = o.value("epsilon", opt.epsilon);
      opt.weight_decay = o.value("weight_decay", opt.weight_decay);
      opt.num_steps = o.value("num_steps", opt.num_steps);
      opt.record_losses = o.value("record_losses", opt.record_losses);
    }
    cfg.num_trajectories = j.value("num_trajectories", cfg.num_trajectories);
    if (j.contains("window")) {
      const json& w = j.at("window");
      cfg.window_offset = w.value("offset", cfg.window_offset);
      cfg.n_in = w.value("n_in", cfg.n_in);
      cfg.m_out = w.value("m_out", cfg.m_out);
    }
    if (j.contains("split")) {
      const json& s = j.at("split");
      cfg.split.train = s.value("train", cfg.split.train);
      cfg.split.dev = s.value("dev", cfg.split.dev);
      cfg.split.test = s.value("test", cfg.split.test);
    }
    if (j.contains("models")) {
      cfg.models.clear();
      for (const json& m : j.at("models")) {
        ColumnSelector sel;
        if (m.contains("selector")) {
          const json& s = m.at("selector");
          sel.kind = parse_selector_kind(s.at("kind").get<std::string>());
          sel.k = s.value("k", sel.k);
          sel.seed = s.value("seed", sel.seed);
        }
        ModelSpec spec = model_spec(sel, m.value("augment_loss", false));
        spec.name = m.value("name", spec.name);
        if (m.contains("train")) spec.train = train_from_json(m.at("train"), spec.train);
        cfg.models.push_back(std::move(spec));
      }
    }
    if (j.contains("checkpoints")) cfg.checkpoints = j.at("checkpoints").get<std::vector<Index>>();
    cfg.trials = j.value("trials", cfg.trials);
    if (j.contains("output")) cfg.output = j.at("output").get<std::string>();
    return cfg;
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("bad config: {}", e.what()));
  }
}

RunConfig load_config(const fs::path& path) { return config_from_json(read_json_file(path)); }

std::uint64_t trajectory_seed(std::uint64_t master_seed, std::size_t index) {
  return derive_seed(master_seed, index);
}

std::uint64_t trial_seed(std::uint64_t master_seed, std::size_t trial) {
  return derive_seed(derive_seed(master_seed, kTrialStream), trial);
}

std::string trajectory_id(std::size_t index) { return fmt::format("traj_{:04}", index); }

void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min(jobs, count);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

GenerateSummary generate(const RunConfig& cfg, std::size_t jobs) {
  cfg.validate();
  fs::create_directories(data_dir(cfg));
  write_text(cfg.output / "run.json", to_json(cfg).dump(2) + "\n");

  std::vector<std::string> errors(cfg.num_trajectories);
  parallel_for(cfg.num_trajectories, jobs, [&](std::size_t i) {
    const std::uint64_t seed = trajectory_seed(cfg.master_seed, i);
    ProblemSpec ps = cfg.problem;
    ps.seed = derive_seed(seed, 0);
    OptimizerConfig opt = cfg.optimizer;
    opt.seed = derive_seed(seed, 1);
    try {
      Trajectory traj = run_optimizer(sample_problem(ps), opt);
      traj.id = trajectory_id(i);
      save_trajectory(traj, data_dir(cfg) / traj.id);
    } catch (const NumericError& e) {
      errors[i] = e.what();
    }
  });

  GenerateSummary summary;
  json listing = json::array();
  json failures = json::array();
  for (std::size_t i = 0; i < cfg.num_trajectories; ++i) {
    if (errors[i].empty()) {
      summary.written.push_back(trajectory_id(i));
      listing.push_back(trajectory_id(i));
    } else {
      summary.failures.push_back({i, errors[i]});
      failures.push_back({{"index", i}, {"id", trajectory_id(i)}, {"error", errors[i]}});
    }
  }
  write_text(data_dir(cfg) / "generation.json",
             json{{"trajectories", listing}, {"failures", failures}}.dump(2) + "\n");
  return summary;
}

std::vector<Trajectory> load_generated(const RunConfig& cfg) {
  const fs::path listing_path = data_dir(cfg) / "generation.json";
  if (!fs::exists(listing_path)) {
    throw Error(fmt::format("no generated data: expected {} (run `generate` first)",
                            listing_path.string()));
  }
  const json listing = read_json_file(listing_path);
  std::vector<Trajectory> out;
  for (const auto& id : listing.at("trajectories")) {
    out.push_back(load_trajectory(data_dir(cfg) / id.get<std::string>()));
  }
  return out;
}

Partition trial_partition(const RunConfig& cfg, std::size_t trial, std::size_t count) {
  SplitSpec spec = cfg.split;
  spec.seed = derive_seed(trial_seed(cfg.master_seed, trial), 0);
  return split(count, spec);
}

TrainSummary train_models(const RunConfig& cfg, std::size_t jobs) {
  cfg.validate();
  if (cfg.models.empty()) throw Error("train: the config lists no models");
  const std::vector<Trajectory> trajs = load_generated(cfg);

  std::vector<Partition> partitions;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    partitions.push_back(trial_partition(cfg, t, trajs.size()));
    json split_json = {{"train", json::array()}, {"dev", json::array()}, {"test", json::array()}};
    for (std::size_t i : partitions.back().train) split_json["train"].push_back(trajs[i].id);
    for (std::size_t i : partitions.back().dev) split_json["dev"].push_back(trajs[i].id);
    for (std::size_t i : partitions.back().test) split_json["test"].push_back(trajs[i].id);
    write_text(trial_dir(cfg, t) / "split.json", split_json.dump(2) + "\n");
  }

  const std::size_t num_models = cfg.models.size();
  std::vector<double> seconds(cfg.trials * num_models, 0.0);
  std::vector<std::size_t> epochs(cfg.trials * num_models, 0);
  std::vector<fs::path> dirs(cfg.trials * num_models);
  parallel_for(cfg.trials * num_models, jobs, [&](std::size_t task) {
    const std::size_t t = task / num_models;
    const std::size_t k = task % num_models;
    const ModelSpec& spec = cfg.models[k];
    ColumnSelector selector = spec.selector;
    if (selector.kind == SelectorKind::RandomK) {
      selector.seed = derive_seed(trial_seed(cfg.master_seed, t), 1 + k);
    }
    const auto train_w = windows_of(trajs, partitions[t].train, cfg);
    const auto dev_w = windows_of(trajs, partitions[t].dev, cfg);
    const TrainResult r = train(train_w, dev_w, selector, spec.train, spec.augment_loss);
    const fs::path dir = trial_dir(cfg, t) / spec.name;
    save_model(r.model, dir);
    write_text(dir / "curve.csv", curve_csv(r));
    seconds[task] = r.seconds_per_epoch();
    epochs[task] = r.epochs_run;
    dirs[task] = dir;
  });

  // Wall-clock figures live apart from the deterministic artifacts.
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    json timing = json::object();
    for (std::size_t k = 0; k < num_models; ++k) {
      timing[cfg.models[k].name] = {{"seconds_per_epoch", seconds[t * num_models + k]},
                                    {"epochs", epochs[t * num_models + k]}};
    }
    write_text(trial_dir(cfg, t) / "timing.json", timing.dump(2) + "\n");
  }
  return {dirs.size(), dirs};
}

std::vector<EvalReport> evaluate_models(const RunConfig& cfg, const EvaluateOptions& options) {
  cfg.validate();
  if (cfg.models.empty()) throw Error("evaluate: the config lists no models");
  const std::vector<Trajectory> trajs = load_generated(cfg);

  std::vector<BenchmarkTrial> trials(cfg.trials);
  parallel_for(cfg.trials, options.jobs, [&](std::size_t t) {
    const Partition part = trial_partition(cfg, t, trajs.size());
    BenchmarkTrial& trial = trials[t];
    trial.test = windows_of(trajs, part.test, cfg);
    json timing;
    if (fs::exists(trial_dir(cfg, t) / "timing.json")) timing = read_json_file(trial_dir(cfg, t) / "timing.json");
    for (const auto& spec : cfg.models) {
      const fs::path dir = trial_dir(cfg, t) / spec.name;
      if (!fs::exists(dir / "model.json")) {
        throw Error(fmt::format("missing trained model: expected {} (run `train` first)",
                                (dir / "model.json").string()));
      }
      trial.models.push_back(load_model(dir));
      trial.names.push_back(spec.name);
      trial.seconds_per_epoch.push_back(
          timing.is_object() && timing.contains(spec.name)
              ? timing[spec.name].value("seconds_per_epoch", 0.0)
              : 0.0);
    }
  });

  std::vector<EvalReport> reports = run_benchmark(trials, cfg.checkpoints);
  write_report_csv(reports, cfg.output / "report.csv");
  write_report_json(reports, cfg.output / "report.json");
  json timing = json::object();
  for (const auto& r : reports) timing[r.model] = {{"seconds_per_epoch", r.seconds_per_epoch}};
  write_text(cfg.output / "timing.json", timing.dump(2) + "\n");

  if (options.export_predictions) {
    const BenchmarkTrial& first = trials.front();
    for (std::size_t k = 0; k < first.models.size(); ++k) {
      export_predictions(first.models[k], first.test, cfg.output / "predictions" / cfg.models[k].name);
    }
  }
  return reports;
}

Prop1Summary verify_prop1(Index n, Index m, std::size_t trials, std::uint64_t seed, Index dim,
                          double c_bound, double perturb_b) {
  if (n < 0 || m < 1 || dim < 1) throw Error("verify-prop1: need n >= 0, m >= 1, dim >= 1");
  Prop1Summary summary;
  summary.trials = trials;
  for (std::size_t t = 0; t < trials; ++t) {
    std::mt19937_64 rng(derive_seed(seed, t));
    std::uniform_real_distribution<double> coef(-c_bound, c_bound);
    std::uniform_real_distribution<double> shift(-1.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    AffineUpdateSchedule schedule{Vector(n + m), Vector(n + m)};
    for (Index i = 0; i < n + m; ++i) {
      schedule.c[i] = coef(rng);
      schedule.d[i] = shift(rng);
    }
    Vector w0(dim);
    for (Index i = 0; i < dim; ++i) w0[i] = normal(rng);

    const Matrix path = simulate(schedule, w0, n + m);
    ClosedFormSolution s = construct(schedule, n, m);
    s.b[0] += perturb_b;
    summary.max_error = std::max(summary.max_error,
                                 verify(s.A, s.b, path.leftCols(n + 1), path.rightCols(m)));
  }
  summary.passed = summary.max_error < kProp1Tolerance;
  return summary;
}

}  // namespace farcast
