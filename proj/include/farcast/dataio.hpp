#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "farcast/common.hpp"
#include "farcast/trajgen.hpp"

namespace farcast {

/// One input/output pair cut from a trajectory.
struct FarcastWindow {
  // d x n_in: trajectory steps 0..n_in-1, one column per step.
  Matrix X;
  // d x m_out: steps n_in..n_in+m_out-1.
  Matrix Y;
  // Training loss at each input step, when the source recorded losses.
  std::optional<Vector> input_losses;
  std::string source_id;
  // Trajectory step of X's first column.
  Index start = 0;

  Index n_in() const { return X.cols(); }
  Index m_out() const { return Y.cols(); }
  Index dim() const { return X.rows(); }
  /// Absolute trajectory step of Y's first column.
  Index first_predicted_step() const { return start + X.cols(); }
};

/// Cuts steps [0, n_in) as X and [n_in, n_in + m_out) as Y.
FarcastWindow window(const Trajectory& traj, Index n_in, Index m_out);
/// Same, starting at trajectory step `offset` instead of 0.
FarcastWindow window(const Trajectory& traj, Index offset, Index n_in, Index m_out);

struct SplitSpec {
  std::size_t train = 100;
  std::size_t dev = 50;
  std::size_t test = 50;
  std::uint64_t seed = 0;

  std::size_t total() const { return train + dev + test; }
};

/// Indices into the input collection, grouped by role.
struct Partition {
  std::vector<std::size_t> train;
  std::vector<std::size_t> dev;
  std::vector<std::size_t> test;
};

/// Seeded permutation of 0..count-1, then contiguous train/dev/test blocks.
Partition split(std::size_t count, const SplitSpec& spec);

inline constexpr int kTrajectorySchemaVersion = 1;

// Directory layout:
//   manifest.json   schema_version, id, dim, steps, has_losses, metadata
//   weights.f64le   steps * dim little-endian doubles, step-major
//   losses.f64le    steps little-endian doubles (only when has_losses)
void save_trajectory(const Trajectory& traj, const std::filesystem::path& dir);
Trajectory load_trajectory(const std::filesystem::path& dir);

/// Loads an externally produced trajectory. `path` is either the directory or
/// its manifest.json; the payload files are resolved next to the manifest.
Trajectory import_external(const std::filesystem::path& path);

// Raw little-endian float64 arrays.
void write_f64le(const std::filesystem::path& path, const double* data, std::size_t count);
std::vector<double> read_f64le(const std::filesystem::path& path);
void read_f64le_into(const std::filesystem::path& path, double* data, std::size_t count);

}  // namespace farcast
