#pragma once

#include <cmath>

#include "farcast/common.hpp"

namespace farcast {

struct AdamParams {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Decoupled (AdamW) decay; zero gives plain Adam.
  double weight_decay = 0.0;
};

/// Bias-corrected Adam / AdamW over a flat parameter vector.
class Adam {
 public:
  Adam(Index size, AdamParams params) : params_(params), m_(Vector::Zero(size)), v_(Vector::Zero(size)) {}

  void step(Eigen::Ref<Vector> parameters, const Eigen::Ref<const Vector>& gradient,
            double learning_rate) {
    ++t_;
    const double bc1 = 1.0 - std::pow(params_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(params_.beta2, static_cast<double>(t_));
    for (Index i = 0; i < parameters.size(); ++i) {
      const double g = gradient[i];
      m_[i] = params_.beta1 * m_[i] + (1.0 - params_.beta1) * g;
      v_[i] = params_.beta2 * v_[i] + (1.0 - params_.beta2) * g * g;
      const double m_hat = m_[i] / bc1;
      const double v_hat = v_[i] / bc2;
      const double update = m_hat / (std::sqrt(v_hat) + params_.epsilon);
      parameters[i] -= learning_rate * (update + params_.weight_decay * parameters[i]);
    }
  }

  void step(Eigen::Ref<Vector> parameters, const Eigen::Ref<const Vector>& gradient) {
    step(parameters, gradient, params_.learning_rate);
  }

  const AdamParams& params() const noexcept { return params_; }
  std::uint64_t steps_taken() const noexcept { return t_; }

 private:
  AdamParams params_;
  Vector m_;
  Vector v_;
  std::uint64_t t_ = 0;
};

}  // namespace farcast
