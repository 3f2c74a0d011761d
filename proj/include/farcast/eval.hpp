#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "farcast/common.hpp"
#include "farcast/dataio.hpp"
#include "farcast/farcaster.hpp"

namespace farcast {

inline constexpr double kMseScale = 1e4;

/// Mean squared error over the d coordinates at absolute trajectory step
/// `step`, scaled by 1e4. `first_predicted_step` is the step of Y's column 0.
double mse_at_checkpoint(const Eigen::Ref<const Matrix>& Y_hat, const Eigen::Ref<const Matrix>& Y,
                         Index step, Index first_predicted_step);

/// Checkpoint MSE (x1e4) averaged over windows.
double mean_checkpoint_mse(const FarcastModel& model, std::span<const FarcastWindow> windows,
                           Index step);

struct EvalReport {
  std::string model;
  std::vector<Index> checkpoints;
  std::vector<double> mse_mean;
  // Sample standard deviation over trials; absent for a single trial.
  std::vector<std::optional<double>> mse_std;
  std::size_t trials = 0;
  double seconds_per_epoch = 0.0;
};

/// Trained models and held-out windows of one trial. Models are matched
/// across trials by position.
struct BenchmarkTrial {
  std::vector<FarcastModel> models;
  // Report names; FarcastModel::name() when empty.
  std::vector<std::string> names;
  std::vector<double> seconds_per_epoch;
  std::vector<FarcastWindow> test;
};

std::vector<EvalReport> run_benchmark(std::span<const BenchmarkTrial> trials,
                                      std::span<const Index> checkpoints);

/// 2 m d^2 + 2 d m: m explicit updates with a linear gradient. Throws
/// NumericError when the count does not fit in 64 bits.
std::uint64_t flops_iterative(std::uint64_t m, std::uint64_t d);
/// 4 d m for the whole forecast, 4 d for the last step only.
std::uint64_t flops_farcast(std::uint64_t m, std::uint64_t d, bool last_only);

void write_report_csv(std::span<const EvalReport> reports, const std::filesystem::path& path);
void write_report_json(std::span<const EvalReport> reports, const std::filesystem::path& path);
std::string report_csv(std::span<const EvalReport> reports);

/// One CSV per window (<dir>/<source_id>.csv): step,coordinate_index,truth,prediction.
/// Covers every step of the window; prediction is empty on observed steps.
void export_predictions(const FarcastModel& model, std::span<const FarcastWindow> windows,
                        const std::filesystem::path& dir);
std::string prediction_csv(const FarcastModel& model, const FarcastWindow& window);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace farcast
