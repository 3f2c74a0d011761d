#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "farcast/common.hpp"

namespace farcast {

enum class ProblemKind { Syn1LeastSquares, Syn2Mlp };

std::string_view to_string(ProblemKind kind);
ProblemKind parse_problem_kind(std::string_view name);

struct ProblemSpec {
  ProblemKind kind = ProblemKind::Syn1LeastSquares;
  Index num_samples = 100;
  Index feature_dim = 3;
  std::uint64_t seed = 0;
};

/// An instantiated regression problem: features D (n x p), responses e (n).
struct Problem {
  ProblemSpec spec;
  Matrix features;
  Vector responses;
  // Generating weight; for least squares this is the exact optimum.
  Vector w_star;

  Index num_samples() const { return features.rows(); }
  /// Length of the parameter vector an optimizer works on.
  Index parameter_dim() const;
};

Problem sample_problem(const ProblemSpec& spec);
/// 100 x 3 standard-normal features, w* ~ N(0, I), e = D w*.
Problem sample_syn1_problem(std::uint64_t seed);
/// 100 x 1 features drawn the same way; fitted by the 1-10-1 ReLU network.
Problem sample_syn2_problem(std::uint64_t seed);

/// Largest eigenvalue of D^T D by power iteration (relative tolerance 1e-10).
/// Throws NumericError for a zero matrix or when the iteration cap is hit.
double hessian_max_eigenvalue(const Matrix& features);

/// D^T D w - D^T e, the gradient of 0.5 ||D w - e||^2.
Vector least_squares_gradient(const Eigen::Ref<const Matrix>& features,
                              const Eigen::Ref<const Vector>& responses,
                              const Eigen::Ref<const Vector>& w);
double least_squares_loss(const Eigen::Ref<const Matrix>& features,
                          const Eigen::Ref<const Vector>& responses,
                          const Eigen::Ref<const Vector>& w);

// 1 -> 10 -> 1 ReLU network packed as
// [W1 (10) | b1 (10) | W2 (10) | b2 (1)].
namespace mlp {
inline constexpr Index kHidden = 10;
inline constexpr Index kParamCount = 3 * kHidden + 1;
inline constexpr Index kW1 = 0;
inline constexpr Index kB1 = kHidden;
inline constexpr Index kW2 = 2 * kHidden;
inline constexpr Index kB2 = 3 * kHidden;
}  // namespace mlp

Vector mlp_forward(const Eigen::Ref<const Vector>& params, const Eigen::Ref<const Matrix>& features);
/// (1/n) ||mlp_forward(params, D) - e||^2.
double mlp_loss(const Eigen::Ref<const Vector>& params, const Eigen::Ref<const Matrix>& features,
                const Eigen::Ref<const Vector>& responses);
/// Backpropagated gradient of mlp_loss; the ReLU derivative at 0 is taken as 0.
Vector mlp_gradient(const Eigen::Ref<const Vector>& params, const Eigen::Ref<const Matrix>& features,
                    const Eigen::Ref<const Vector>& responses);

enum class OptimizerKind { GD, SGD, Adam, AdamW };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::GD;
  double learning_rate = 1e-3;
  // When set, the step size is hessian_scale / lambda_max(D^T D) (least squares only).
  std::optional<double> hessian_scale;
  // nullopt means full batch.
  std::optional<Index> batch_size;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  std::size_t num_steps = 200;
  std::uint64_t seed = 0;
  bool record_losses = true;

  void validate() const;
};

struct Trajectory {
  std::string id;
  // steps x dim; row 0 is the initial weight.
  RowMatrix weights;
  // Full-batch training loss at every recorded weight, when recorded.
  std::optional<Vector> losses;
  // Free-form problem/optimizer descriptors; persisted in the manifest.
  std::string problem_kind;
  std::string optimizer_kind;
  std::uint64_t problem_seed = 0;
  std::uint64_t optimizer_seed = 0;
  double learning_rate = 0.0;

  Index dim() const { return weights.cols(); }
  Index steps() const { return weights.rows(); }
};

/// Runs the optimizer from a standard-normal initial weight drawn from opt.seed.
Trajectory run_optimizer(const Problem& problem, const OptimizerConfig& opt);
/// Same, from an explicit initial weight.
Trajectory run_optimizer(const Problem& problem, const OptimizerConfig& opt,
                         const Eigen::Ref<const Vector>& initial);

/// Full-batch training loss of `w` on `problem`.
double problem_loss(const Problem& problem, const Eigen::Ref<const Vector>& w);

}  // namespace farcast
