#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "farcast/common.hpp"
#include "farcast/dataio.hpp"

namespace farcast {

enum class SelectorKind {
  All,        // LFN
  Last,       // LFL
  RandomK,    // LFS
  FirstLast,  // LFD-2
};

/// Which input steps feed the farcaster.
struct ColumnSelector {
  SelectorKind kind = SelectorKind::FirstLast;
  // RandomK only.
  Index k = 4;
  std::uint64_t seed = 0;

  static ColumnSelector all() { return {SelectorKind::All, 0, 0}; }
  static ColumnSelector last() { return {SelectorKind::Last, 0, 0}; }
  static ColumnSelector random_k(Index k, std::uint64_t seed) { return {SelectorKind::RandomK, k, seed}; }
  static ColumnSelector first_last() { return {SelectorKind::FirstLast, 0, 0}; }

  /// Ascending column indices into an input with `n_in` columns. RandomK draws
  /// k distinct indices uniformly without replacement, reproducibly per seed.
  std::vector<Index> resolve(Index n_in) const;
  /// "LFN", "LFL", "LFS" or "LFD-2".
  std::string_view model_name() const;
};

std::string_view to_string(SelectorKind kind);
SelectorKind parse_selector_kind(std::string_view name);

enum class InitKind { Persistence, Zero };

std::string_view to_string(InitKind kind);
InitKind parse_init_kind(std::string_view name);

/// Y_hat = X_T A + 1 b^T, with A and b shared across all weight coordinates.
struct FarcastModel {
  ColumnSelector selector;
  // Resolved input columns, ascending.
  std::vector<Index> columns;
  // input_features() x m_out
  Matrix A;
  Vector b;
  Index n_in = 0;
  Index m_out = 0;
  // Adds one input feature: the training loss at the last input step,
  // divided by the loss at step 0.
  bool augment_loss = false;
  InitKind init = InitKind::Persistence;
  double beta = 0.0;
  // Also charge the observed-to-predicted pair (w_n, w_hat_{n+1}) in the penalty.
  bool penalize_boundary = false;

  Index input_features() const { return static_cast<Index>(columns.size()) + (augment_loss ? 1 : 0); }
  Index parameter_count() const { return A.size() + b.size(); }
  std::string name() const { return std::string(selector.model_name()) + (augment_loss ? "+loss" : ""); }
};

FarcastModel make_model(const ColumnSelector& selector, Index n_in, Index m_out,
                        InitKind init = InitKind::Persistence, bool augment_loss = false);

/// Gathers the given columns of X (ascending order as given).
Matrix select_columns(const Eigen::Ref<const Matrix>& X, std::span<const Index> columns);
Matrix select_columns(const Eigen::Ref<const Matrix>& X, const ColumnSelector& selector);

/// Affine map of already-selected inputs (d x input_features) to d x m_out.
Matrix forward(const FarcastModel& model, const Eigen::Ref<const Matrix>& selected);

/// Appends the loss sequence as one extra bottom row: (d+1) x (n+1).
Matrix augment_with_loss(const Eigen::Ref<const Matrix>& X, const Vector& losses);

/// Model inputs for one window: selected weight columns, plus the normalized
/// loss feature when the model is loss-augmented. `X` carries the loss channel
/// as its last row in that case.
Matrix model_inputs(const FarcastModel& model, const Eigen::Ref<const Matrix>& X);

/// One-shot forecast of all m_out future steps from X (d x n_in, or
/// (d+1) x n_in with the loss row for loss-augmented models).
Matrix predict_trajectory(const FarcastModel& model, const Eigen::Ref<const Matrix>& X);
/// Forecast for a window; uses the window's recorded losses when needed.
Matrix predict(const FarcastModel& model, const FarcastWindow& w);

/// Hinge penalty on predicted consecutive increments whose l1 norm exceeds
/// the first observed increment ||w1 - w0||_1. Zero when Y_hat has fewer than
/// two columns (and no boundary column is given). When `boundary` (w_n) is
/// given, the pair (w_n, Y_hat[:, 0]) is charged as well.
double grad_penalty(const Eigen::Ref<const Vector>& w0, const Eigen::Ref<const Vector>& w1,
                    const Eigen::Ref<const Matrix>& Y_hat, const Vector* boundary = nullptr);

/// Windows stacked for batched evaluation: every window contributes d rows.
struct PreparedBatch {
  Matrix inputs;   // (l*d) x input_features
  Matrix targets;  // (l*d) x m_out
  Matrix last_observed;  // (l*d) x 1, w_n for each row
  std::vector<Index> offsets;  // l + 1 row offsets
  Vector budgets;  // ||w1 - w0||_1 per window

  Index size() const { return budgets.size(); }
};

PreparedBatch prepare_batch(const FarcastModel& model, std::span<const FarcastWindow> windows);

/// (1/l) sum_i ||X_T^i A + 1 b^T - Y^i||_1 (entrywise).
double pred_loss(const FarcastModel& model, const PreparedBatch& batch);
double pred_loss(const FarcastModel& model, std::span<const FarcastWindow> windows);
/// Mean grad_penalty over the batch.
double mean_penalty(const FarcastModel& model, const PreparedBatch& batch);
double combined_loss(const FarcastModel& model, const PreparedBatch& batch, double beta);
double combined_loss(const FarcastModel& model, std::span<const FarcastWindow> windows, double beta);

struct LossGradients {
  Matrix dA;
  Vector db;
  double loss = 0.0;
};

/// Subgradient of combined_loss w.r.t. (A, b); sign(0) = 0 and the hinge is
/// inactive at its kink.
LossGradients loss_gradients(const FarcastModel& model, const PreparedBatch& batch, double beta);

struct TrainConfig {
  double beta = 1e-3;
  double learning_rate = 3e-3;
  std::size_t max_epochs = 10000;
  // Early stopping on dev pred_loss.
  std::size_t patience = 300;
  InitKind init = InitKind::Persistence;
  bool penalize_boundary = false;
  // Reduce-on-plateau for the step size, keyed on the training loss.
  // A factor of 1 disables it.
  double lr_decay_factor = 0.5;
  std::size_t lr_decay_patience = 100;
  double min_learning_rate = 0.0;

  void validate() const;
};

struct TrainPoint {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // combined
  double dev_pred_loss = 0.0;  // NaN without a dev set
};

struct TrainResult {
  FarcastModel model;
  std::vector<TrainPoint> curve;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double seconds = 0.0;

  double seconds_per_epoch() const {
    return epochs_run == 0 ? 0.0 : seconds / static_cast<double>(epochs_run);
  }
};

/// Full-batch Adam on combined_loss. With a nonempty dev set, stops after
/// `patience` epochs without dev improvement and returns the best-on-dev
/// parameters; otherwise returns the final parameters.
TrainResult train(std::span<const FarcastWindow> train_set, std::span<const FarcastWindow> dev_set,
                  const ColumnSelector& selector, const TrainConfig& cfg, bool augment_loss = false);

inline constexpr int kModelSchemaVersion = 1;

// model.json (selector, columns, n_in, m_out, init, beta, flags) and
// params.f64le (A row-major, then b).
void save_model(const FarcastModel& model, const std::filesystem::path& dir);
FarcastModel load_model(const std::filesystem::path& dir);

}  // namespace farcast
