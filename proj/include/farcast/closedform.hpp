#pragma once

#include "farcast/common.hpp"

namespace farcast {

/// Scalar affine recurrence w_{i+1} = c_i * w_i + d_i, shared by every coordinate.
struct AffineUpdateSchedule {
  Vector c;
  Vector d;

  Index transitions() const { return c.size(); }
};

struct ClosedFormSolution {
  // (n+1) x m; only row n is nonzero.
  Matrix A;
  Vector b;
};

/// Exact (A*, b*) mapping X = (w_0..w_n) to Y = (w_{n+1}..w_{n+m}) for any
/// trajectory generated by `schedule`. Needs transitions n..n+m-1.
ClosedFormSolution construct(const AffineUpdateSchedule& schedule, Index n, Index m);

/// max |X A + 1 b^T - Y| with X: d x (n+1), Y: d x m.
double verify(const Matrix& A, const Vector& b, const Matrix& X, const Matrix& Y);

/// Rolls the schedule forward from w0 for `steps` transitions; returns
/// d x (steps + 1), one column per step.
Matrix simulate(const AffineUpdateSchedule& schedule, const Vector& w0, Index steps);

}  // namespace farcast
