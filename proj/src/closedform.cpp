#include "farcast/closedform.hpp"

#include <fmt/core.h>

namespace farcast {

ClosedFormSolution construct(const AffineUpdateSchedule& schedule, Index n, Index m) {
  if (n < 0 || m < 1) throw ShapeError("construct: need n >= 0 and m >= 1");
  if (schedule.c.size() != schedule.d.size()) {
    throw ShapeError("construct: c and d sequences differ in length");
  }
  if (schedule.transitions() < n + m) {
    throw ShapeError(fmt::format("construct: schedule has {} transitions, needs {} (n + m)",
                                 schedule.transitions(), n + m));
  }
  ClosedFormSolution s{Matrix::Zero(n + 1, m), Vector::Zero(m)};
  // w_{n+i} = (c_n ... c_{n+i-1}) w_n + b_i, with b_1 = d_n and
  // b_{i+1} = c_{n+i} b_i + d_{n+i}.
  double gain = 1.0;
  double shift = 0.0;
  for (Index i = 0; i < m; ++i) {
    const Index t = n + i;
    gain *= schedule.c[t];
    shift = schedule.c[t] * shift + schedule.d[t];
    s.A(n, i) = gain;
    s.b[i] = shift;
  }
  return s;
}

double verify(const Matrix& A, const Vector& b, const Matrix& X, const Matrix& Y) {
  if (X.cols() != A.rows() || A.cols() != Y.cols() || b.size() != Y.cols() ||
      X.rows() != Y.rows()) {
    throw ShapeError("verify: inconsistent shapes");
  }
  Matrix residual = X * A - Y;
  residual.rowwise() += b.transpose();
  return residual.cwiseAbs().maxCoeff();
}

Matrix simulate(const AffineUpdateSchedule& schedule, const Vector& w0, Index steps) {
  if (schedule.transitions() < steps || schedule.d.size() < steps) {
    throw ShapeError("simulate: schedule shorter than the requested steps");
  }
  Matrix out(w0.size(), steps + 1);
  out.col(0) = w0;
  for (Index i = 0; i < steps; ++i) {
    out.col(i + 1) = (schedule.c[i] * out.col(i)).array() + schedule.d[i];
  }
  return out;
}

}  // namespace farcast
