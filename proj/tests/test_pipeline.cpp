#include <cstdlib>
#include <fstream>
#include <random>

#include "doctest.h"
#include "farcast/pipeline.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace farcast;
namespace fs = std::filesystem;
using farcast::testing::slurp;
using farcast::testing::TempDir;

namespace {

RunConfig small_config(const fs::path& out, std::size_t trajectories = 20) {
  RunConfig cfg = preset("syn1-gd");
  cfg.num_trajectories = trajectories;
  cfg.split = {trajectories / 2, trajectories / 4, trajectories - trajectories / 2 - trajectories / 4, 0};
  cfg.trials = 2;
  for (auto& m : cfg.models) {
    m.train.max_epochs = 60;
    m.train.patience = 20;
  }
  cfg.output = out;
  return cfg;
}

std::string read_tree(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() != "timing.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, root).string() + "\n" + slurp(f);
  return all;
}

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult cli(const std::string& args, const TempDir& tmp) {
  const fs::path out = tmp / "stdout.txt", err = tmp / "stderr.txt";
  const std::string cmd = std::string("\"") + FARCAST_CLI_PATH + "\" " + args + " >\"" + out.string() +
                          "\" 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), slurp(out), slurp(err)};
}

}  // namespace

TEST_CASE("presets") {
  const auto names = preset_names();
  CHECK(names.size() == 12);
  for (const auto& n : names) CHECK_NOTHROW(preset(n).validate());
  CHECK_THROWS_AS(preset("syn3-gd"), Error);

  const RunConfig gd = preset("syn1-gd");
  CHECK(gd.num_trajectories == 200);
  CHECK(gd.split.train == 100);
  CHECK(gd.split.dev == 50);
  CHECK(gd.split.test == 50);
  CHECK(gd.trials == 5);
  CHECK(gd.n_in == 21);
  CHECK(gd.m_out == 180);
  CHECK(gd.models.size() == 4);
  CHECK(preset("syn2-adam").problem.kind == ProblemKind::Syn2Mlp);

  const RunConfig two = preset("syn1-gd-two-step");
  CHECK(two.n_in == 2);
  CHECK(two.m_out == 199);
  CHECK(two.models.size() == 1);
}

TEST_CASE("config JSON round trip") {
  for (const auto& n : preset_names()) {
    const RunConfig cfg = preset(n);
    const nlohmann::json j = to_json(cfg);
    CHECK(to_json(config_from_json(j)) == j);
  }
  nlohmann::json j = to_json(preset("syn1-gd"));
  j["schema_version"] = 2;
  CHECK_THROWS_AS(config_from_json(j), FormatError);
  j.erase("schema_version");
  CHECK_THROWS_AS(config_from_json(j), FormatError);

  const RunConfig over = config_from_json({{"schema_version", 1}, {"preset", "syn1-sgd"}, {"trials", 3}});
  CHECK(over.trials == 3);
  CHECK(over.optimizer.kind == OptimizerKind::SGD);
}

TEST_CASE("seed streams are distinct") {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < 200; ++i) seeds.push_back(trajectory_seed(2024, i));
  for (std::size_t t = 0; t < 5; ++t) seeds.push_back(trial_seed(2024, t));
  std::sort(seeds.begin(), seeds.end());
  CHECK(std::adjacent_find(seeds.begin(), seeds.end()) == seeds.end());
  CHECK(trajectory_id(7) == "traj_0007");
}

TEST_CASE("parallel_for") {
  std::vector<int> hits(100, 0);
  parallel_for(100, 3, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  CHECK_THROWS_AS(parallel_for(10, 2,
                               [](std::size_t i) {
                                 if (i == 5) throw NumericError("boom");
                               }),
                  NumericError);
}

TEST_CASE("generate") {
  TempDir tmp;
  SUBCASE("syn1-gd layout and determinism") {
    RunConfig cfg = preset("syn1-gd");
    cfg.output = tmp / "a";
    const auto summary = generate(cfg, 2);
    CHECK(summary.written.size() == 200);
    CHECK(summary.failures.empty());
    std::size_t dirs = 0;
    for (const auto& e : fs::directory_iterator(tmp / "a" / "data")) dirs += e.is_directory();
    CHECK(dirs == 200);
    const Trajectory t = load_trajectory(tmp / "a" / "data" / "traj_0000");
    CHECK(t.weights.rows() == 201);
    CHECK(t.weights.cols() == 3);
    CHECK(fs::exists(tmp / "a" / "run.json"));

    cfg.output = tmp / "b";
    generate(cfg, 1);
    CHECK(read_tree(tmp / "a" / "data") == read_tree(tmp / "b" / "data"));
  }
  SUBCASE("syn2-adam has 31 coordinates") {
    RunConfig cfg = preset("syn2-adam");
    cfg.output = tmp / "c";
    CHECK(generate(cfg).written.size() == 200);
    CHECK(load_trajectory(tmp / "c" / "data" / "traj_0199").weights.cols() == 31);
  }
  SUBCASE("divergence is recorded and the run continues") {
    RunConfig cfg = small_config(tmp / "d", 4);
    cfg.optimizer.hessian_scale = 1e6;
    const auto summary = generate(cfg);
    CHECK(summary.written.empty());
    CHECK(summary.failures.size() == 4);
    const auto gen = nlohmann::json::parse(slurp(tmp / "d" / "data" / "generation.json"));
    CHECK(gen["failures"].size() == 4);
  }
}

TEST_CASE("train and evaluate") {
  TempDir tmp;
  const RunConfig cfg = small_config(tmp / "run");
  generate(cfg);
  const auto trained = train_models(cfg, 2);
  CHECK(trained.models_written == 8);
  for (const auto& dir : trained.model_dirs) {
    CHECK(fs::exists(dir / "model.json"));
    CHECK(fs::exists(dir / "params.f64le"));
    CHECK(fs::exists(dir / "curve.csv"));
  }

  // The retained model's dev loss is the minimum of the curve up to that point.
  const FarcastModel lfd = load_model(tmp / "run" / "models" / "trial_0" / "LFD-2");
  const auto trajs = load_generated(cfg);
  const Partition part = trial_partition(cfg, 0, trajs.size());
  std::vector<FarcastWindow> dev;
  for (std::size_t i : part.dev) dev.push_back(window(trajs[i], cfg.n_in, cfg.m_out));
  const double kept = pred_loss(lfd, dev);
  std::ifstream curve(tmp / "run" / "models" / "trial_0" / "LFD-2" / "curve.csv");
  std::string line;
  std::getline(curve, line);
  CHECK(line == "epoch,train_loss,dev_pred_loss");
  double best = std::numeric_limits<double>::infinity();
  while (std::getline(curve, line)) best = std::min(best, std::stod(line.substr(line.rfind(',') + 1)));
  CHECK(kept == doctest::Approx(best).epsilon(1e-12));

  const auto reports = evaluate_models(cfg, {true, 2});
  REQUIRE(reports.size() == 4);
  for (const auto& r : reports) {
    CHECK(r.checkpoints == std::vector<Index>{40, 80, 160, 200});
    CHECK(r.trials == 2);
    for (const auto& s : r.mse_std) CHECK(s.has_value());
  }
  const std::string first = slurp(tmp / "run" / "report.csv");
  CHECK(first.rfind("model,checkpoint,mse_x1e4_mean,mse_x1e4_std,trials\n", 0) == 0);
  CHECK(fs::exists(tmp / "run" / "report.json"));
  CHECK(fs::exists(tmp / "run" / "predictions" / "LFD-2"));

  // Rerunning the whole pipeline with a different job count changes nothing.
  RunConfig again = cfg;
  again.output = tmp / "again";
  generate(again, 1);
  train_models(again, 1);
  evaluate_models(again, {true, 1});
  CHECK(slurp(tmp / "again" / "report.csv") == first);
  CHECK(read_tree(tmp / "again" / "models") == read_tree(tmp / "run" / "models"));
  CHECK(read_tree(tmp / "again" / "predictions") == read_tree(tmp / "run" / "predictions"));

  // A missing model names the path it expected.
  fs::remove_all(tmp / "run" / "models" / "trial_1" / "LFL");
  try {
    evaluate_models(cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("trial_1") != std::string::npos);
  }
}

TEST_CASE("smoke training writes persistence models for every trial") {
  TempDir tmp;
  RunConfig cfg = preset("syn1-gd");
  cfg.output = tmp / "smoke";
  for (auto& m : cfg.models) {
    m.train.max_epochs = 0;
    m.train.patience = 0;
  }
  generate(cfg);
  CHECK(train_models(cfg).models_written == 20);
  for (std::size_t t = 0; t < 5; ++t) {
    for (const char* name : {"LFN", "LFS", "LFL", "LFD-2"}) {
      const FarcastModel m = load_model(tmp / "smoke" / "models" / ("trial_" + std::to_string(t)) / name);
      CHECK(m.b.isZero(0.0));
      CHECK(m.A.bottomRows(1).isOnes(0.0));
      CHECK(m.A.topRows(m.A.rows() - 1).isZero(0.0));
    }
  }
}

TEST_CASE("training without generated data names the missing path") {
  TempDir tmp;
  const RunConfig cfg = small_config(tmp / "nothing");
  try {
    train_models(cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("generation.json") != std::string::npos);
  }
}

TEST_CASE("verify_prop1") {
  const auto ok = verify_prop1(20, 180, 100, 2024);
  CHECK(ok.passed);
  CHECK(ok.trials == 100);
  CHECK(ok.max_error < kProp1Tolerance);
  const auto bad = verify_prop1(20, 180, 5, 2024, 3, 1.05, 1.0);
  CHECK(!bad.passed);
  CHECK(bad.max_error == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("command line") {
  TempDir tmp;

  SUBCASE("verify-prop1") {
    auto r = cli("verify-prop1", tmp);
    CHECK(r.code == 0);
    CHECK(r.out.find("PASS") != std::string::npos);
    r = cli("verify-prop1 --perturb-b 1 --trials 3", tmp);
    CHECK(r.code == 1);
    CHECK(r.out.find("FAIL") != std::string::npos);
  }

  SUBCASE("flops") {
    auto r = cli("flops --m 180 --d 3", tmp);
    CHECK(r.code == 0);
    CHECK(r.out == "iterative_flops=4320\nfarcast_flops=2160\nspeedup=2\n");
    r = cli("flops --m 30 --d 66960393 --last-only", tmp);
    CHECK(r.out.find("iterative_flops=269021657860490520\nfarcast_flops=267841572\n") == 0);
    r = cli("flops --m 1099511627776 --d 1099511627776", tmp);
    CHECK(r.code == 1);
    CHECK(r.err.rfind("error: numeric:", 0) == 0);
  }

  SUBCASE("usage errors") {
    CHECK(cli("", tmp).code == 2);
    CHECK(cli("frobnicate", tmp).code == 2);
    CHECK(cli("generate", tmp).code == 2);
    CHECK(cli("generate --preset syn1-gd --config x.json", tmp).code == 2);

    nlohmann::json j{{"schema_version", 1}, {"preset", "syn1-gd"}, {"models", nlohmann::json::array()}};
    farcast::testing::spit(tmp / "empty.json", j.dump());
    const auto r = cli("evaluate --config \"" + (tmp / "empty.json").string() + "\"", tmp);
    CHECK(r.code == 2);
    CHECK(r.err.rfind("error: usage:", 0) == 0);
  }

  SUBCASE("end to end from a config file with flag overrides") {
    RunConfig cfg = small_config(tmp / "ignored", 8);
    cfg.trials = 1;
    farcast::testing::spit(tmp / "cfg.json", to_json(cfg).dump(2));
    const std::string common =
        "--config \"" + (tmp / "cfg.json").string() + "\" --output \"" + (tmp / "cli").string() + "\" --seed 7";
    CHECK(cli("generate " + common, tmp).code == 0);
    CHECK(cli("train " + common + " --jobs 1", tmp).code == 0);
    const auto r = cli("evaluate " + common + " --export-predictions", tmp);
    CHECK(r.code == 0);
    CHECK(r.out.find("LFD-2") != std::string::npos);
    CHECK(fs::exists(tmp / "cli" / "report.csv"));
    CHECK(!fs::exists(tmp / "ignored"));
    const auto run = nlohmann::json::parse(slurp(tmp / "cli" / "run.json"));
    CHECK(run["master_seed"] == 7);

    const auto p = cli("predict --model \"" + (tmp / "cli" / "models" / "trial_0" / "LFD-2").string() +
                           "\" --trajectory \"" + (tmp / "cli" / "data" / "traj_0003").string() + "\"",
                       tmp);
    CHECK(p.code == 0);
    CHECK(p.out.rfind("step,coordinate_index,truth,prediction\n", 0) == 0);

    const auto missing = cli("predict --model \"" + (tmp / "nope").string() + "\" --trajectory \"" +
                                 (tmp / "cli" / "data" / "traj_0003").string() + "\"",
                             tmp);
    CHECK(missing.code == 1);
    CHECK(missing.err.rfind("error: ", 0) == 0);
  }
}
