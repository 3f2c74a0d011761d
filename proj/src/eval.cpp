#include "farcast/eval.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/core.h>

#include "json.hpp"

namespace farcast {

namespace {

std::uint64_t checked(unsigned __int128 v, const char* what) {
  if (v > std::numeric_limits<std::uint64_t>::max()) {
    throw NumericError(fmt::format("{}: FLOP count overflows 64 bits", what));
  }
  return static_cast<std::uint64_t>(v);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw FormatError(fmt::format("cannot write {}", path.string()));
}

}  // namespace

std::string format_double(double v) { return fmt::format("{}", v); }

double mse_at_checkpoint(const Eigen::Ref<const Matrix>& Y_hat, const Eigen::Ref<const Matrix>& Y,
                         Index step, Index first_predicted_step) {
  if (Y_hat.rows() != Y.rows() || Y_hat.cols() != Y.cols()) {
    throw ShapeError("mse_at_checkpoint: prediction and target shapes differ");
  }
  const Index col = step - first_predicted_step;
  if (col < 0 || col >= Y.cols()) {
    throw ShapeError(fmt::format("checkpoint {} is outside the predicted steps [{}, {})", step,
                                 first_predicted_step, first_predicted_step + Y.cols()));
  }
  return kMseScale * (Y_hat.col(col) - Y.col(col)).squaredNorm() / static_cast<double>(Y.rows());
}

double mean_checkpoint_mse(const FarcastModel& model, std::span<const FarcastWindow> windows,
                           Index step) {
  if (windows.empty()) throw Error("mean_checkpoint_mse: no windows");
  double total = 0.0;
  for (const auto& w : windows) {
    total += mse_at_checkpoint(predict(model, w), w.Y, step, w.first_predicted_step());
  }
  return total / static_cast<double>(windows.size());
}

std::vector<EvalReport> run_benchmark(std::span<const BenchmarkTrial> trials,
                                      std::span<const Index> checkpoints) {
  if (trials.empty()) throw Error("run_benchmark: no trials");
  const std::size_t num_models = trials.front().models.size();
  for (const auto& t : trials) {
    if (t.test.empty()) throw Error("run_benchmark: empty test set");
    if (t.models.size() != num_models) throw Error("run_benchmark: trials hold different model lists");
  }

  std::vector<EvalReport> reports;
  for (std::size_t m = 0; m < num_models; ++m) {
    EvalReport r;
    r.model = m < trials.front().names.size() ? trials.front().names[m]
                                              : trials.front().models[m].name();
    r.checkpoints.assign(checkpoints.begin(), checkpoints.end());
    r.trials = trials.size();
    double seconds = 0.0;
    std::vector<std::vector<double>> per_trial(checkpoints.size());
    for (const auto& t : trials) {
      if (m < t.seconds_per_epoch.size()) seconds += t.seconds_per_epoch[m];
      std::vector<Matrix> preds;
      preds.reserve(t.test.size());
      for (const auto& w : t.test) preds.push_back(predict(t.models[m], w));
      for (std::size_t c = 0; c < checkpoints.size(); ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < t.test.size(); ++i) {
          total += mse_at_checkpoint(preds[i], t.test[i].Y, checkpoints[c],
                                     t.test[i].first_predicted_step());
        }
        per_trial[c].push_back(total / static_cast<double>(t.test.size()));
      }
    }
    r.seconds_per_epoch = seconds / static_cast<double>(trials.size());
    for (const auto& values : per_trial) {
      const double n = static_cast<double>(values.size());
      double mean = 0.0;
      for (double v : values) mean += v;
      mean /= n;
      r.mse_mean.push_back(mean);
      if (values.size() >= 2) {
        double ss = 0.0;
        for (double v : values) ss += (v - mean) * (v - mean);
        r.mse_std.emplace_back(std::sqrt(ss / (n - 1.0)));
      } else {
        r.mse_std.emplace_back(std::nullopt);
      }
    }
    reports.push_back(std::move(r));
  }
  return reports;
}

std::uint64_t flops_iterative(std::uint64_t m, std::uint64_t d) {
  if (m < 1 || d < 1) throw Error("flops_iterative: m and d must be at least 1");
  using u128 = unsigned __int128;
  constexpr u128 kMax = std::numeric_limits<std::uint64_t>::max();
  const u128 dd = static_cast<u128>(d) * d;
  if (dd > kMax) throw NumericError("flops_iterative: FLOP count overflows 64 bits");
  // dd and m are both below 2^64, so their product fits in 128 bits.
  const u128 mdd = dd * m;
  if (mdd > kMax) throw NumericError("flops_iterative: FLOP count overflows 64 bits");
  const u128 md = static_cast<u128>(m) * d;
  return checked(2 * mdd + 2 * md, "flops_iterative");
}

std::uint64_t flops_farcast(std::uint64_t m, std::uint64_t d, bool last_only) {
  if (m < 1 || d < 1) throw Error("flops_farcast: m and d must be at least 1");
  using u128 = unsigned __int128;
  return last_only ? checked(4 * static_cast<u128>(d), "flops_farcast")
                   : checked(4 * static_cast<u128>(d) * m, "flops_farcast");
}

std::string report_csv(std::span<const EvalReport> reports) {
  std::string out = "model,checkpoint,mse_x1e4_mean,mse_x1e4_std,trials\n";
  for (const auto& r : reports) {
    for (std::size_t c = 0; c < r.checkpoints.size(); ++c) {
      out += fmt::format("{},{},{},{},{}\n", r.model, r.checkpoints[c], format_double(r.mse_mean[c]),
                         r.mse_std[c] ? format_double(*r.mse_std[c]) : std::string{}, r.trials);
    }
  }
  return out;
}

void write_report_csv(std::span<const EvalReport> reports, const std::filesystem::path& path) {
  write_text(path, report_csv(reports));
}

void write_report_json(std::span<const EvalReport> reports, const std::filesystem::path& path) {
  using nlohmann::json;
  json rows = json::array();
  for (const auto& r : reports) {
    for (std::size_t c = 0; c < r.checkpoints.size(); ++c) {
      rows.push_back({{"model", r.model},
                      {"checkpoint", r.checkpoints[c]},
                      {"mse_x1e4_mean", r.mse_mean[c]},
                      {"mse_x1e4_std", r.mse_std[c] ? json(*r.mse_std[c]) : json(nullptr)},
                      {"trials", r.trials}});
    }
  }
  write_text(path, rows.dump(2) + "\n");
}

std::string prediction_csv(const FarcastModel& model, const FarcastWindow& w) {
  const Matrix pred = predict(model, w);
  std::string out = "step,coordinate_index,truth,prediction\n";
  for (Index s = 0; s < w.n_in(); ++s) {
    for (Index i = 0; i < w.dim(); ++i) {
      out += fmt::format("{},{},{},\n", w.start + s, i, format_double(w.X(i, s)));
    }
  }
  for (Index s = 0; s < w.m_out(); ++s) {
    for (Index i = 0; i < w.dim(); ++i) {
      out += fmt::format("{},{},{},{}\n", w.first_predicted_step() + s, i,
                         format_double(w.Y(i, s)), format_double(pred(i, s)));
    }
  }
  return out;
}

void export_predictions(const FarcastModel& model, std::span<const FarcastWindow> windows,
                        const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& w : windows) {
    write_text(dir / (w.source_id + ".csv"), prediction_csv(model, w));
  }
}

}  // namespace farcast
