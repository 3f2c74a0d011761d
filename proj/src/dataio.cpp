#include "farcast/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/core.h>

#include "json.hpp"

namespace farcast {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::uint64_t byteswap64(std::uint64_t v) {
  v = ((v & 0x00000000FFFFFFFFULL) << 32) | ((v & 0xFFFFFFFF00000000ULL) >> 32);
  v = ((v & 0x0000FFFF0000FFFFULL) << 16) | ((v & 0xFFFF0000FFFF0000ULL) >> 16);
  return ((v & 0x00FF00FF00FF00FFULL) << 8) | ((v & 0xFF00FF00FF00FF00ULL) >> 8);
}

void to_little_endian(double* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    (void)data;
    (void)count;
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, data + i, sizeof bits);
      bits = byteswap64(bits);
      std::memcpy(data + i, &bits, sizeof bits);
    }
  }
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(fmt::format("cannot open {}", path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("malformed manifest {}: {}", path.string(), e.what()));
  }
}

template <typename T>
T require(const json& j, const char* key, const fs::path& path) {
  if (!j.contains(key)) {
    throw FormatError(fmt::format("manifest {} is missing '{}'", path.string(), key));
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("manifest {}: bad '{}': {}", path.string(), key, e.what()));
  }
}

Trajectory parse_trajectory(const fs::path& manifest_path) {
  const json manifest = read_json(manifest_path);
  if (!manifest.is_object()) {
    throw FormatError(fmt::format("manifest {} is not a JSON object", manifest_path.string()));
  }
  const int version = require<int>(manifest, "schema_version", manifest_path);
  if (version != kTrajectorySchemaVersion) {
    throw FormatError(fmt::format("unsupported trajectory schema_version {} (supported: {})",
                                  version, kTrajectorySchemaVersion));
  }
  const auto dim = require<std::int64_t>(manifest, "dim", manifest_path);
  const auto steps = require<std::int64_t>(manifest, "steps", manifest_path);
  if (dim < 1 || steps < 1) {
    throw FormatError(fmt::format("manifest {}: dim and steps must be positive (got {} and {})",
                                  manifest_path.string(), dim, steps));
  }
  bool has_losses = false;
  if (manifest.contains("has_losses")) {
    has_losses = require<bool>(manifest, "has_losses", manifest_path);
  } else if (manifest.contains("losses")) {
    has_losses = require<bool>(manifest, "losses", manifest_path);
  }

  const fs::path dir = manifest_path.parent_path();
  Trajectory traj;
  traj.id = manifest.value("id", dir.filename().string());
  traj.weights.resize(steps, dim);
  read_f64le_into(dir / "weights.f64le", traj.weights.data(),
                  static_cast<std::size_t>(dim) * static_cast<std::size_t>(steps));
  if (has_losses) {
    Vector losses(steps);
    read_f64le_into(dir / "losses.f64le", losses.data(), static_cast<std::size_t>(steps));
    traj.losses = std::move(losses);
  }
  if (manifest.contains("problem")) {
    const json& p = manifest.at("problem");
    traj.problem_kind = p.value("kind", std::string{});
    traj.problem_seed = p.value("seed", std::uint64_t{0});
  }
  if (manifest.contains("optimizer")) {
    const json& o = manifest.at("optimizer");
    traj.optimizer_kind = o.value("kind", std::string{});
    traj.optimizer_seed = o.value("seed", std::uint64_t{0});
    traj.learning_rate = o.value("learning_rate", 0.0);
  }
  return traj;
}

}  // namespace

void write_f64le(const fs::path& path, const double* data, std::size_t count) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(fmt::format("cannot write {}", path.string()));
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(count * sizeof(double)));
  } else {
    std::vector<double> tmp(data, data + count);
    to_little_endian(tmp.data(), tmp.size());
    out.write(reinterpret_cast<const char*>(tmp.data()),
              static_cast<std::streamsize>(count * sizeof(double)));
  }
  if (!out) throw FormatError(fmt::format("write failed for {}", path.string()));
}

void read_f64le_into(const fs::path& path, double* data, std::size_t count) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  if (ec) throw FormatError(fmt::format("cannot stat {}: {}", path.string(), ec.message()));
  const std::uintmax_t expected = static_cast<std::uintmax_t>(count) * sizeof(double);
  if (bytes != expected) {
    throw FormatError(fmt::format(
        "shape mismatch: manifest implies {} bytes but {} holds {} bytes", expected,
        path.filename().string(), bytes));
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(fmt::format("cannot open {}", path.string()));
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(expected));
  if (!in) throw FormatError(fmt::format("short read on {}", path.string()));
  to_little_endian(data, count);
}

std::vector<double> read_f64le(const fs::path& path) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  if (ec) throw FormatError(fmt::format("cannot stat {}: {}", path.string(), ec.message()));
  if (bytes % sizeof(double) != 0) {
    throw FormatError(fmt::format("{} holds {} bytes, not a multiple of 8", path.string(), bytes));
  }
  std::vector<double> out(bytes / sizeof(double));
  read_f64le_into(path, out.data(), out.size());
  return out;
}

FarcastWindow window(const Trajectory& traj, Index n_in, Index m_out) {
  return window(traj, 0, n_in, m_out);
}

FarcastWindow window(const Trajectory& traj, Index offset, Index n_in, Index m_out) {
  if (offset < 0 || n_in < 1 || m_out < 1) {
    throw ShapeError("window: offset must be >= 0 and n_in, m_out >= 1");
  }
  if (offset + n_in + m_out > traj.steps()) {
    throw ShapeError(fmt::format(
        "window: offset {} + n_in {} + m_out {} = {} exceeds the {} steps of trajectory '{}'",
        offset, n_in, m_out, offset + n_in + m_out, traj.steps(), traj.id));
  }
  FarcastWindow w;
  w.X = traj.weights.middleRows(offset, n_in).transpose();
  w.Y = traj.weights.middleRows(offset + n_in, m_out).transpose();
  if (traj.losses) w.input_losses = traj.losses->segment(offset, n_in);
  w.source_id = traj.id;
  w.start = offset;
  return w;
}

Partition split(std::size_t count, const SplitSpec& spec) {
  if (spec.total() != count) {
    throw Error(fmt::format("split: counts {}/{}/{} sum to {}, but there are {} trajectories",
                            spec.train, spec.dev, spec.test, spec.total(), count));
  }
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);

  Partition p;
  auto it = order.begin();
  p.train.assign(it, it + static_cast<std::ptrdiff_t>(spec.train));
  it += static_cast<std::ptrdiff_t>(spec.train);
  p.dev.assign(it, it + static_cast<std::ptrdiff_t>(spec.dev));
  it += static_cast<std::ptrdiff_t>(spec.dev);
  p.test.assign(it, order.end());
  return p;
}

void save_trajectory(const Trajectory& traj, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest = {
      {"schema_version", kTrajectorySchemaVersion},
      {"id", traj.id},
      {"dim", traj.dim()},
      {"steps", traj.steps()},
      {"has_losses", traj.losses.has_value()},
      {"problem", {{"kind", traj.problem_kind}, {"seed", traj.problem_seed}}},
      {"optimizer",
       {{"kind", traj.optimizer_kind},
        {"seed", traj.optimizer_seed},
        {"learning_rate", traj.learning_rate}}},
  };
  if (traj.losses && traj.losses->size() != traj.steps()) {
    throw ShapeError("save_trajectory: losses length differs from step count");
  }
  write_f64le(dir / "weights.f64le", traj.weights.data(),
              static_cast<std::size_t>(traj.weights.size()));
  if (traj.losses) {
    write_f64le(dir / "losses.f64le", traj.losses->data(),
                static_cast<std::size_t>(traj.losses->size()));
  } else {
    fs::remove(dir / "losses.f64le");
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw FormatError(fmt::format("cannot write manifest in {}", dir.string()));
}

Trajectory load_trajectory(const fs::path& dir) { return parse_trajectory(dir / "manifest.json"); }

Trajectory import_external(const fs::path& path) {
  if (fs::is_directory(path)) return parse_trajectory(path / "manifest.json");
  return parse_trajectory(path);
}

}  // namespace farcast
