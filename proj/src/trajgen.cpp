#include "farcast/trajgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include <fmt/core.h>

#include "farcast/adam.hpp"

namespace farcast {

namespace {

Matrix sample_normal(std::mt19937_64& rng, Index rows, Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(rows, cols);
  // Row-major draw order so the stream layout does not depend on storage order.
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) out(r, c) = normal(rng);
  }
  return out;
}

Vector sample_normal(std::mt19937_64& rng, Index size) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector out(size);
  for (Index i = 0; i < size; ++i) out[i] = normal(rng);
  return out;
}

// Shuffle-once-per-epoch minibatches; the final short batch of an epoch is kept.
class BatchSampler {
 public:
  BatchSampler(Index num_rows, std::optional<Index> batch_size, std::mt19937_64& rng)
      : rows_(static_cast<std::size_t>(num_rows)), rng_(rng) {
    std::iota(rows_.begin(), rows_.end(), Index{0});
    full_ = !batch_size || *batch_size >= num_rows;
    batch_ = full_ ? num_rows : *batch_size;
    cursor_ = rows_.size();
  }

  bool full() const { return full_; }

  std::span<const Index> next() {
    if (cursor_ >= rows_.size()) {
      std::shuffle(rows_.begin(), rows_.end(), rng_);
      cursor_ = 0;
    }
    const std::size_t take = std::min(static_cast<std::size_t>(batch_), rows_.size() - cursor_);
    std::span<const Index> batch(rows_.data() + cursor_, take);
    cursor_ += take;
    return batch;
  }

 private:
  std::vector<Index> rows_;
  std::mt19937_64& rng_;
  bool full_ = true;
  Index batch_ = 0;
  std::size_t cursor_ = 0;
};

Vector batch_gradient(const Problem& problem, const Eigen::Ref<const Vector>& w,
                      std::span<const Index> rows, bool full) {
  const bool ls = problem.spec.kind == ProblemKind::Syn1LeastSquares;
  if (full) {
    return ls ? least_squares_gradient(problem.features, problem.responses, w)
              : mlp_gradient(w, problem.features, problem.responses);
  }
  const Index n = static_cast<Index>(rows.size());
  Matrix features(n, problem.features.cols());
  Vector responses(n);
  for (Index i = 0; i < n; ++i) {
    features.row(i) = problem.features.row(rows[static_cast<std::size_t>(i)]);
    responses[i] = problem.responses[rows[static_cast<std::size_t>(i)]];
  }
  return ls ? least_squares_gradient(features, responses, w)
            : mlp_gradient(w, features, responses);
}

}  // namespace

std::string_view to_string(ProblemKind kind) {
  switch (kind) {
    case ProblemKind::Syn1LeastSquares: return "syn1";
    case ProblemKind::Syn2Mlp: return "syn2";
  }
  return "unknown";
}

ProblemKind parse_problem_kind(std::string_view name) {
  if (name == "syn1") return ProblemKind::Syn1LeastSquares;
  if (name == "syn2") return ProblemKind::Syn2Mlp;
  throw Error(fmt::format("unknown problem kind '{}' (expected syn1 or syn2)", name));
}

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::GD: return "gd";
    case OptimizerKind::SGD: return "sgd";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::AdamW: return "adamw";
  }
  return "unknown";
}

OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "gd") return OptimizerKind::GD;
  if (name == "sgd") return OptimizerKind::SGD;
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "adamw") return OptimizerKind::AdamW;
  throw Error(fmt::format("unknown optimizer '{}' (expected gd, sgd, adam or adamw)", name));
}

Index Problem::parameter_dim() const {
  return spec.kind == ProblemKind::Syn1LeastSquares ? features.cols() : mlp::kParamCount;
}

Problem sample_problem(const ProblemSpec& spec) {
  if (spec.num_samples < 1 || spec.feature_dim < 1) {
    throw ShapeError("problem needs at least one sample and one feature");
  }
  if (spec.kind == ProblemKind::Syn2Mlp && spec.feature_dim != 1) {
    throw ShapeError("the 1-10-1 network takes scalar features (feature_dim must be 1)");
  }
  std::mt19937_64 rng(spec.seed);
  Problem p;
  p.spec = spec;
  p.w_star = sample_normal(rng, spec.feature_dim);
  p.features = sample_normal(rng, spec.num_samples, spec.feature_dim);
  p.responses = p.features * p.w_star;
  return p;
}

Problem sample_syn1_problem(std::uint64_t seed) {
  return sample_problem({ProblemKind::Syn1LeastSquares, 100, 3, seed});
}

Problem sample_syn2_problem(std::uint64_t seed) {
  return sample_problem({ProblemKind::Syn2Mlp, 100, 1, seed});
}

double hessian_max_eigenvalue(const Matrix& features) {
  const Matrix gram = features.transpose() * features;
  const Index d = gram.rows();
  if (d == 0 || gram.cwiseAbs().maxCoeff() == 0.0) {
    throw NumericError("hessian_max_eigenvalue: D^T D is zero");
  }
  Vector v(d);
  for (Index i = 0; i < d; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i) / static_cast<double>(d);
  v.normalize();

  constexpr int kMaxIterations = 1000000;
  constexpr double kTolerance = 1e-10;
  for (int it = 0; it < kMaxIterations; ++it) {
    const Vector w = gram * v;
    const double lambda = v.dot(w);
    // |lambda - lambda_true| <= ||G v - lambda v|| for symmetric G.
    if ((w - lambda * v).norm() <= kTolerance * std::abs(lambda)) return lambda;
    const double norm = w.norm();
    if (norm == 0.0) {
      throw NumericError("hessian_max_eigenvalue: iterate collapsed to zero (degenerate spectrum)");
    }
    v = w / norm;
  }
  throw NumericError(fmt::format(
      "hessian_max_eigenvalue: no convergence after {} iterations (degenerate spectrum)",
      kMaxIterations));
}

Vector least_squares_gradient(const Eigen::Ref<const Matrix>& features,
                              const Eigen::Ref<const Vector>& responses,
                              const Eigen::Ref<const Vector>& w) {
  if (features.rows() != responses.size() || features.cols() != w.size()) {
    throw ShapeError("least_squares_gradient: inconsistent shapes");
  }
  return features.transpose() * (features * w) - features.transpose() * responses;
}

double least_squares_loss(const Eigen::Ref<const Matrix>& features,
                          const Eigen::Ref<const Vector>& responses,
                          const Eigen::Ref<const Vector>& w) {
  return 0.5 * (features * w - responses).squaredNorm();
}

Vector mlp_forward(const Eigen::Ref<const Vector>& params, const Eigen::Ref<const Matrix>& features) {
  if (params.size() != mlp::kParamCount || features.cols() != 1) {
    throw ShapeError("mlp_forward: expects 31 parameters and n x 1 features");
  }
  const auto w1 = params.segment(mlp::kW1, mlp::kHidden);
  const auto b1 = params.segment(mlp::kB1, mlp::kHidden);
  const auto w2 = params.segment(mlp::kW2, mlp::kHidden);
  const double b2 = params[mlp::kB2];
  // n x h pre-activations, ReLU, then the linear head.
  Matrix hidden = (features.col(0) * w1.transpose()).rowwise() + b1.transpose();
  hidden = hidden.cwiseMax(0.0);
  return (hidden * w2).array() + b2;
}

double mlp_loss(const Eigen::Ref<const Vector>& params, const Eigen::Ref<const Matrix>& features,
                const Eigen::Ref<const Vector>& responses) {
  return (mlp_forward(params, features) - responses).squaredNorm() /
         static_cast<double>(features.rows());
}

Vector mlp_gradient(const Eigen::Ref<const Vector>& params, const Eigen::Ref<const Matrix>& features,
                    const Eigen::Ref<const Vector>& responses) {
  if (params.size() != mlp::kParamCount || features.cols() != 1 ||
      features.rows() != responses.size()) {
    throw ShapeError("mlp_gradient: expects 31 parameters, n x 1 features and n responses");
  }
  const Index n = features.rows();
  const auto w1 = params.segment(mlp::kW1, mlp::kHidden);
  const auto b1 = params.segment(mlp::kB1, mlp::kHidden);
  const auto w2 = params.segment(mlp::kW2, mlp::kHidden);
  const double b2 = params[mlp::kB2];

  const Matrix pre = (features.col(0) * w1.transpose()).rowwise() + b1.transpose();
  const Matrix hidden = pre.cwiseMax(0.0);
  const Vector out = (hidden * w2).array() + b2;
  // d loss / d out
  const Vector delta = (2.0 / static_cast<double>(n)) * (out - responses);
  const Matrix active = (pre.array() > 0.0).cast<double>();
  // n x h, gradient w.r.t. pre-activations
  const Matrix dpre = (delta * w2.transpose()).cwiseProduct(active);

  Vector grad(mlp::kParamCount);
  grad.segment(mlp::kW1, mlp::kHidden) = dpre.transpose() * features.col(0);
  grad.segment(mlp::kB1, mlp::kHidden) = dpre.colwise().sum().transpose();
  grad.segment(mlp::kW2, mlp::kHidden) = hidden.transpose() * delta;
  grad[mlp::kB2] = delta.sum();
  return grad;
}

double problem_loss(const Problem& problem, const Eigen::Ref<const Vector>& w) {
  return problem.spec.kind == ProblemKind::Syn1LeastSquares
             ? least_squares_loss(problem.features, problem.responses, w)
             : mlp_loss(w, problem.features, problem.responses);
}

void OptimizerConfig::validate() const {
  if (hessian_scale) {
    if (!(*hessian_scale > 0.0)) throw Error("hessian_scale must be positive");
  } else if (!(learning_rate > 0.0)) {
    throw Error("learning_rate must be positive");
  }
  if (batch_size && *batch_size < 1) throw Error("batch_size must be at least 1");
  if (kind == OptimizerKind::Adam || kind == OptimizerKind::AdamW) {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw Error("beta1 and beta2 must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw Error("epsilon must be positive");
  }
  if (!(weight_decay >= 0.0)) throw Error("weight_decay must be nonnegative");
}

Trajectory run_optimizer(const Problem& problem, const OptimizerConfig& opt) {
  std::mt19937_64 init_rng(derive_seed(opt.seed, 0));
  return run_optimizer(problem, opt, sample_normal(init_rng, problem.parameter_dim()));
}

Trajectory run_optimizer(const Problem& problem, const OptimizerConfig& opt,
                         const Eigen::Ref<const Vector>& initial) {
  opt.validate();
  const Index dim = problem.parameter_dim();
  if (initial.size() != dim) {
    throw ShapeError(fmt::format("run_optimizer: initial weight has {} entries, expected {}",
                                 initial.size(), dim));
  }

  double lr = opt.learning_rate;
  if (opt.hessian_scale) {
    if (problem.spec.kind != ProblemKind::Syn1LeastSquares) {
      throw Error("the Hessian-reciprocal step size is only defined for least squares");
    }
    lr = *opt.hessian_scale / hessian_max_eigenvalue(problem.features);
  }

  std::mt19937_64 batch_rng(derive_seed(opt.seed, 1));
  const std::optional<Index> batch =
      opt.kind == OptimizerKind::GD ? std::nullopt : opt.batch_size;
  BatchSampler sampler(problem.num_samples(), batch, batch_rng);

  AdamParams adam_params{lr, opt.beta1, opt.beta2, opt.epsilon,
                         opt.kind == OptimizerKind::AdamW ? opt.weight_decay : 0.0};
  Adam adam(dim, adam_params);

  Trajectory traj;
  traj.problem_kind = std::string(to_string(problem.spec.kind));
  traj.optimizer_kind = std::string(to_string(opt.kind));
  traj.problem_seed = problem.spec.seed;
  traj.optimizer_seed = opt.seed;
  traj.learning_rate = lr;
  traj.weights.resize(static_cast<Index>(opt.num_steps) + 1, dim);
  if (opt.record_losses) traj.losses = Vector(static_cast<Index>(opt.num_steps) + 1);

  Vector w = initial;
  traj.weights.row(0) = w.transpose();
  if (traj.losses) (*traj.losses)[0] = problem_loss(problem, w);

  for (std::size_t step = 1; step <= opt.num_steps; ++step) {
    const Vector g = batch_gradient(problem, w, sampler.next(), sampler.full());
    switch (opt.kind) {
      case OptimizerKind::GD:
      case OptimizerKind::SGD:
        w -= lr * g;
        break;
      case OptimizerKind::Adam:
      case OptimizerKind::AdamW:
        adam.step(w, g);
        break;
    }
    if (!w.allFinite()) {
      throw DivergenceError(fmt::format("optimizer diverged: non-finite weight at step {}", step),
                            step);
    }
    traj.weights.row(static_cast<Index>(step)) = w.transpose();
    if (traj.losses) (*traj.losses)[static_cast<Index>(step)] = problem_loss(problem, w);
  }
  return traj;
}

}  // namespace farcast
