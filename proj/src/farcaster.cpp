#include "farcast/farcaster.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include <fmt/core.h>

#include "farcast/adam.hpp"
#include "json.hpp"

namespace farcast {

namespace {

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// Loss-channel feature: loss at the last input step over the loss at step 0.
double normalized_last_loss(const Eigen::Ref<const Vector>& losses) {
  const double first = losses[0];
  const double last = losses[losses.size() - 1];
  return first != 0.0 ? last / first : last;
}

void check_window(const FarcastModel& model, const FarcastWindow& w) {
  if (w.n_in() != model.n_in || w.m_out() != model.m_out) {
    throw ShapeError(fmt::format("window '{}' is {} -> {} steps, model expects {} -> {}",
                                 w.source_id, w.n_in(), w.m_out(), model.n_in, model.m_out));
  }
  if (model.augment_loss && !w.input_losses) {
    throw ShapeError(fmt::format("window '{}' has no recorded losses for a loss-augmented model",
                                 w.source_id));
  }
}

// Per-window penalty and, optionally, its accumulated subgradient w.r.t. the
// predictions (rows [row0, row0 + d) of grad_pred), scaled by `scale`.
double penalty_block(const Eigen::Ref<const Matrix>& pred, double budget,
                     const Eigen::Ref<const Vector>* boundary, Matrix* grad_pred, Index row0,
                     double scale) {
  double total = 0.0;
  const Index m = pred.cols();
  if (boundary != nullptr && m >= 1) {
    const Vector diff = pred.col(0) - *boundary;
    const double excess = diff.lpNorm<1>() - budget;
    if (excess > 0.0) {
      total += excess;
      if (grad_pred != nullptr) {
        for (Index r = 0; r < diff.size(); ++r) (*grad_pred)(row0 + r, 0) += scale * sign(diff[r]);
      }
    }
  }
  for (Index j = 0; j + 1 < m; ++j) {
    const auto diff = pred.col(j + 1) - pred.col(j);
    const double excess = diff.lpNorm<1>() - budget;
    if (excess > 0.0) {
      total += excess;
      if (grad_pred != nullptr) {
        for (Index r = 0; r < pred.rows(); ++r) {
          const double s = scale * sign(diff[r]);
          (*grad_pred)(row0 + r, j + 1) += s;
          (*grad_pred)(row0 + r, j) -= s;
        }
      }
    }
  }
  return total;
}

Matrix batch_predictions(const FarcastModel& model, const PreparedBatch& batch) {
  if (batch.inputs.cols() != model.A.rows()) {
    throw ShapeError("batch was prepared for a model with a different input width");
  }
  Matrix pred = batch.inputs * model.A;
  pred.rowwise() += model.b.transpose();
  return pred;
}

double penalty_sum(const FarcastModel& model, const PreparedBatch& batch, const Matrix& pred,
                   Matrix* grad_pred, double scale) {
  double total = 0.0;
  for (Index i = 0; i < batch.size(); ++i) {
    const Index r0 = batch.offsets[static_cast<std::size_t>(i)];
    const Index rows = batch.offsets[static_cast<std::size_t>(i) + 1] - r0;
    Eigen::Ref<const Vector> last = batch.last_observed.col(0).segment(r0, rows);
    total += penalty_block(pred.middleRows(r0, rows), batch.budgets[i],
                           model.penalize_boundary ? &last : nullptr, grad_pred, r0, scale);
  }
  return total;
}

FarcastModel& unpack(FarcastModel& model, const Vector& theta) {
  const Index na = model.A.size();
  model.A = Eigen::Map<const Matrix>(theta.data(), model.A.rows(), model.A.cols());
  model.b = theta.segment(na, model.b.size());
  return model;
}

Vector pack(const FarcastModel& model) {
  Vector theta(model.parameter_count());
  theta.head(model.A.size()) = Eigen::Map<const Vector>(model.A.data(), model.A.size());
  theta.tail(model.b.size()) = model.b;
  return theta;
}

}  // namespace

std::vector<Index> ColumnSelector::resolve(Index n_in) const {
  if (n_in < 1) throw ShapeError("selector: input must have at least one column");
  std::vector<Index> cols;
  switch (kind) {
    case SelectorKind::All:
      cols.resize(static_cast<std::size_t>(n_in));
      std::iota(cols.begin(), cols.end(), Index{0});
      break;
    case SelectorKind::Last:
      cols = {n_in - 1};
      break;
    case SelectorKind::FirstLast:
      if (n_in < 2) throw ShapeError("first+last selection needs at least two input columns");
      cols = {0, n_in - 1};
      break;
    case SelectorKind::RandomK: {
      if (k < 1 || k > n_in) {
        throw ShapeError(fmt::format("cannot draw k={} distinct columns from {}", k, n_in));
      }
      std::vector<Index> all(static_cast<std::size_t>(n_in));
      std::iota(all.begin(), all.end(), Index{0});
      std::mt19937_64 rng(seed);
      std::shuffle(all.begin(), all.end(), rng);
      cols.assign(all.begin(), all.begin() + k);
      std::sort(cols.begin(), cols.end());
      break;
    }
  }
  return cols;
}

std::string_view ColumnSelector::model_name() const {
  switch (kind) {
    case SelectorKind::All: return "LFN";
    case SelectorKind::Last: return "LFL";
    case SelectorKind::RandomK: return "LFS";
    case SelectorKind::FirstLast: return "LFD-2";
  }
  return "?";
}

std::string_view to_string(SelectorKind kind) {
  switch (kind) {
    case SelectorKind::All: return "all";
    case SelectorKind::Last: return "last";
    case SelectorKind::RandomK: return "random_k";
    case SelectorKind::FirstLast: return "first_last";
  }
  return "?";
}

SelectorKind parse_selector_kind(std::string_view name) {
  if (name == "all" || name == "LFN") return SelectorKind::All;
  if (name == "last" || name == "LFL") return SelectorKind::Last;
  if (name == "random_k" || name == "LFS") return SelectorKind::RandomK;
  if (name == "first_last" || name == "LFD-2") return SelectorKind::FirstLast;
  throw Error(fmt::format("unknown selector '{}' (expected all, last, random_k or first_last)", name));
}

std::string_view to_string(InitKind kind) {
  return kind == InitKind::Persistence ? "persistence" : "zero";
}

InitKind parse_init_kind(std::string_view name) {
  if (name == "persistence") return InitKind::Persistence;
  if (name == "zero") return InitKind::Zero;
  throw Error(fmt::format("unknown init '{}' (expected persistence or zero)", name));
}

FarcastModel make_model(const ColumnSelector& selector, Index n_in, Index m_out, InitKind init,
                        bool augment_loss) {
  if (m_out < 1) throw ShapeError("model needs at least one output step");
  FarcastModel model;
  model.selector = selector;
  model.columns = selector.resolve(n_in);
  model.n_in = n_in;
  model.m_out = m_out;
  model.augment_loss = augment_loss;
  model.init = init;
  model.A = Matrix::Zero(model.input_features(), m_out);
  model.b = Vector::Zero(m_out);
  if (init == InitKind::Persistence) {
    // Every output step copies the most recent selected input.
    model.A.row(static_cast<Index>(model.columns.size()) - 1).setOnes();
  }
  return model;
}

Matrix select_columns(const Eigen::Ref<const Matrix>& X, std::span<const Index> columns) {
  Matrix out(X.rows(), static_cast<Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) {
    const Index c = columns[j];
    if (c < 0 || c >= X.cols()) {
      throw ShapeError(fmt::format("column index {} out of range for {} input columns", c, X.cols()));
    }
    out.col(static_cast<Index>(j)) = X.col(c);
  }
  return out;
}

Matrix select_columns(const Eigen::Ref<const Matrix>& X, const ColumnSelector& selector) {
  const auto cols = selector.resolve(X.cols());
  return select_columns(X, cols);
}

Matrix forward(const FarcastModel& model, const Eigen::Ref<const Matrix>& selected) {
  if (selected.cols() != model.A.rows()) {
    throw ShapeError(fmt::format("forward: input has {} columns, model expects {}",
                                 selected.cols(), model.A.rows()));
  }
  Matrix out = selected * model.A;
  out.rowwise() += model.b.transpose();
  return out;
}

Matrix augment_with_loss(const Eigen::Ref<const Matrix>& X, const Vector& losses) {
  if (losses.size() != X.cols()) {
    throw ShapeError(fmt::format("augment_with_loss: {} losses for {} input steps", losses.size(),
                                 X.cols()));
  }
  Matrix out(X.rows() + 1, X.cols());
  out.topRows(X.rows()) = X;
  out.row(X.rows()) = losses.transpose();
  return out;
}

Matrix model_inputs(const FarcastModel& model, const Eigen::Ref<const Matrix>& X) {
  if (X.cols() != model.n_in) {
    throw ShapeError(fmt::format("input has {} steps, model expects {}", X.cols(), model.n_in));
  }
  if (!model.augment_loss) return select_columns(X, model.columns);
  if (X.rows() < 2) throw ShapeError("loss-augmented input needs a weight row and a loss row");
  const Index d = X.rows() - 1;
  Matrix out(d, model.input_features());
  out.leftCols(static_cast<Index>(model.columns.size())) = select_columns(X.topRows(d), model.columns);
  out.col(out.cols() - 1).setConstant(normalized_last_loss(X.row(d).transpose()));
  return out;
}

Matrix predict_trajectory(const FarcastModel& model, const Eigen::Ref<const Matrix>& X) {
  return forward(model, model_inputs(model, X));
}

Matrix predict(const FarcastModel& model, const FarcastWindow& w) {
  check_window(model, w);
  if (model.augment_loss) return predict_trajectory(model, augment_with_loss(w.X, *w.input_losses));
  return predict_trajectory(model, w.X);
}

double grad_penalty(const Eigen::Ref<const Vector>& w0, const Eigen::Ref<const Vector>& w1,
                    const Eigen::Ref<const Matrix>& Y_hat, const Vector* boundary) {
  if (w0.size() != w1.size() || w0.size() != Y_hat.rows() ||
      (boundary != nullptr && boundary->size() != Y_hat.rows())) {
    throw ShapeError("grad_penalty: inconsistent dimensions");
  }
  const double budget = (w1 - w0).lpNorm<1>();
  if (boundary != nullptr) {
    Eigen::Ref<const Vector> b(*boundary);
    return penalty_block(Y_hat, budget, &b, nullptr, 0, 0.0);
  }
  return penalty_block(Y_hat, budget, nullptr, nullptr, 0, 0.0);
}

PreparedBatch prepare_batch(const FarcastModel& model, std::span<const FarcastWindow> windows) {
  Index rows = 0;
  for (const auto& w : windows) {
    check_window(model, w);
    rows += w.dim();
  }
  PreparedBatch batch;
  batch.inputs.resize(rows, model.input_features());
  batch.targets.resize(rows, model.m_out);
  batch.last_observed.resize(rows, 1);
  batch.budgets.resize(static_cast<Index>(windows.size()));
  batch.offsets.reserve(windows.size() + 1);
  Index r = 0;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto& w = windows[i];
    batch.offsets.push_back(r);
    const Index d = w.dim();
    batch.inputs.middleRows(r, d) = model.augment_loss
                                        ? model_inputs(model, augment_with_loss(w.X, *w.input_losses))
                                        : model_inputs(model, w.X);
    batch.targets.middleRows(r, d) = w.Y;
    batch.last_observed.middleRows(r, d) = w.X.col(w.n_in() - 1);
    batch.budgets[static_cast<Index>(i)] = w.n_in() >= 2 ? (w.X.col(1) - w.X.col(0)).lpNorm<1>() : 0.0;
    r += d;
  }
  batch.offsets.push_back(r);
  return batch;
}

double pred_loss(const FarcastModel& model, const PreparedBatch& batch) {
  if (batch.size() == 0) throw Error("pred_loss: empty batch");
  return (batch_predictions(model, batch) - batch.targets).cwiseAbs().sum() /
         static_cast<double>(batch.size());
}

double pred_loss(const FarcastModel& model, std::span<const FarcastWindow> windows) {
  return pred_loss(model, prepare_batch(model, windows));
}

double mean_penalty(const FarcastModel& model, const PreparedBatch& batch) {
  if (batch.size() == 0) throw Error("mean_penalty: empty batch");
  const Matrix pred = batch_predictions(model, batch);
  return penalty_sum(model, batch, pred, nullptr, 0.0) / static_cast<double>(batch.size());
}

double combined_loss(const FarcastModel& model, const PreparedBatch& batch, double beta) {
  if (!(beta >= 0.0)) throw Error("combined_loss: beta must be nonnegative");
  if (batch.size() == 0) throw Error("combined_loss: empty batch");
  const Matrix pred = batch_predictions(model, batch);
  const double l = static_cast<double>(batch.size());
  double loss = (pred - batch.targets).cwiseAbs().sum() / l;
  if (beta > 0.0) loss += beta * penalty_sum(model, batch, pred, nullptr, 0.0) / l;
  return loss;
}

double combined_loss(const FarcastModel& model, std::span<const FarcastWindow> windows, double beta) {
  return combined_loss(model, prepare_batch(model, windows), beta);
}

LossGradients loss_gradients(const FarcastModel& model, const PreparedBatch& batch, double beta) {
  if (!(beta >= 0.0)) throw Error("loss_gradients: beta must be nonnegative");
  if (batch.size() == 0) throw Error("loss_gradients: empty batch");
  const Matrix pred = batch_predictions(model, batch);
  const double l = static_cast<double>(batch.size());
  const Matrix residual = pred - batch.targets;

  Matrix grad_pred = residual.unaryExpr([](double x) { return sign(x); }) / l;
  LossGradients out;
  out.loss = residual.cwiseAbs().sum() / l;
  if (beta > 0.0) out.loss += beta * penalty_sum(model, batch, pred, &grad_pred, beta / l) / l;

  out.dA = batch.inputs.transpose() * grad_pred;
  out.db = grad_pred.colwise().sum().transpose();
  return out;
}

void TrainConfig::validate() const {
  if (!(beta >= 0.0)) throw Error("beta must be nonnegative");
  if (!(learning_rate > 0.0)) throw Error("learning_rate must be positive");
  // max_epochs = 0 is the persistence smoke mode, so patience is only
  // checked against a real budget.
  if (max_epochs > 0 && patience > max_epochs) throw Error("patience must not exceed max_epochs");
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) {
    throw Error("lr_decay_factor must lie in (0, 1]");
  }
  if (!(min_learning_rate >= 0.0)) throw Error("min_learning_rate must be nonnegative");
}

TrainResult train(std::span<const FarcastWindow> train_set, std::span<const FarcastWindow> dev_set,
                  const ColumnSelector& selector, const TrainConfig& cfg, bool augment_loss) {
  cfg.validate();
  if (train_set.empty()) throw Error("train: empty training set");
  const auto start = std::chrono::steady_clock::now();

  const FarcastWindow& first = train_set.front();
  TrainResult result;
  FarcastModel model = make_model(selector, first.n_in(), first.m_out(), cfg.init, augment_loss);
  model.beta = cfg.beta;
  model.penalize_boundary = cfg.penalize_boundary;

  const PreparedBatch train_batch = prepare_batch(model, train_set);
  const bool has_dev = !dev_set.empty();
  const PreparedBatch dev_batch = has_dev ? prepare_batch(model, dev_set) : PreparedBatch{};
  const double nan = std::numeric_limits<double>::quiet_NaN();

  auto check_finite = [](double v, std::size_t epoch, const char* what) {
    if (!std::isfinite(v)) {
      throw NumericError(fmt::format("train: non-finite {} ({}) at epoch {}", what, v, epoch));
    }
  };

  double train_loss = combined_loss(model, train_batch, cfg.beta);
  check_finite(train_loss, 0, "training loss");
  double best_dev = has_dev ? pred_loss(model, dev_batch) : nan;
  result.curve.push_back({0, train_loss, best_dev});

  FarcastModel best = model;
  std::size_t since_best = 0;
  Vector theta = pack(model);
  Adam adam(theta.size(), AdamParams{cfg.learning_rate, 0.9, 0.999, 1e-8, 0.0});
  double lr = cfg.learning_rate;
  double plateau_best = train_loss;
  std::size_t plateau_count = 0;

  std::size_t epoch = 0;
  for (epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const LossGradients g = loss_gradients(model, train_batch, cfg.beta);
    Vector grad(theta.size());
    grad.head(g.dA.size()) = Eigen::Map<const Vector>(g.dA.data(), g.dA.size());
    grad.tail(g.db.size()) = g.db;
    adam.step(theta, grad, lr);
    unpack(model, theta);

    train_loss = combined_loss(model, train_batch, cfg.beta);
    check_finite(train_loss, epoch, "training loss");
    const double dev = has_dev ? pred_loss(model, dev_batch) : nan;
    if (has_dev) check_finite(dev, epoch, "dev loss");
    result.curve.push_back({epoch, train_loss, dev});

    if (cfg.lr_decay_factor < 1.0) {
      if (train_loss < plateau_best) {
        plateau_best = train_loss;
        plateau_count = 0;
      } else if (++plateau_count >= cfg.lr_decay_patience) {
        lr = std::max(lr * cfg.lr_decay_factor, cfg.min_learning_rate);
        plateau_count = 0;
      }
    }

    if (has_dev) {
      if (dev < best_dev) {
        best_dev = dev;
        best = model;
        result.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        break;
      }
    }
  }
  result.epochs_run = std::min(epoch, cfg.max_epochs);
  if (has_dev) {
    result.model = std::move(best);
  } else {
    result.model = std::move(model);
    result.best_epoch = result.epochs_run;
  }
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

void save_model(const FarcastModel& model, const std::filesystem::path& dir) {
  using nlohmann::json;
  std::filesystem::create_directories(dir);
  json j = {
      {"schema_version", kModelSchemaVersion},
      {"name", model.name()},
      {"selector",
       {{"kind", to_string(model.selector.kind)}, {"k", model.selector.k}, {"seed", model.selector.seed}}},
      {"columns", model.columns},
      {"n_in", model.n_in},
      {"m_out", model.m_out},
      {"init", to_string(model.init)},
      {"beta", model.beta},
      {"augment_loss", model.augment_loss},
      {"penalize_boundary", model.penalize_boundary},
      {"input_features", model.input_features()},
  };
  // A row-major, then b.
  std::vector<double> params;
  params.reserve(static_cast<std::size_t>(model.parameter_count()));
  for (Index r = 0; r < model.A.rows(); ++r) {
    for (Index c = 0; c < model.A.cols(); ++c) params.push_back(model.A(r, c));
  }
  params.insert(params.end(), model.b.data(), model.b.data() + model.b.size());
  write_f64le(dir / "params.f64le", params.data(), params.size());
  std::ofstream out(dir / "model.json", std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw FormatError(fmt::format("cannot write model.json in {}", dir.string()));
}

FarcastModel load_model(const std::filesystem::path& dir) {
  using nlohmann::json;
  std::ifstream in(dir / "model.json");
  if (!in) throw FormatError(fmt::format("cannot open {}", (dir / "model.json").string()));
  json j;
  try {
    j = json::parse(in);
    if (j.at("schema_version").get<int>() != kModelSchemaVersion) {
      throw FormatError(fmt::format("unsupported model schema_version {}",
                                    j.at("schema_version").get<int>()));
    }
    FarcastModel model;
    const json& sel = j.at("selector");
    model.selector.kind = parse_selector_kind(sel.at("kind").get<std::string>());
    model.selector.k = sel.at("k").get<Index>();
    model.selector.seed = sel.at("seed").get<std::uint64_t>();
    model.columns = j.at("columns").get<std::vector<Index>>();
    model.n_in = j.at("n_in").get<Index>();
    model.m_out = j.at("m_out").get<Index>();
    model.init = parse_init_kind(j.at("init").get<std::string>());
    model.beta = j.at("beta").get<double>();
    model.augment_loss = j.at("augment_loss").get<bool>();
    model.penalize_boundary = j.value("penalize_boundary", false);
    for (Index c : model.columns) {
      if (c < 0 || c >= model.n_in) throw FormatError("model.json: column index out of range");
    }
    const Index k = model.input_features();
    std::vector<double> params(static_cast<std::size_t>(k * model.m_out + model.m_out));
    read_f64le_into(dir / "params.f64le", params.data(), params.size());
    model.A.resize(k, model.m_out);
    std::size_t p = 0;
    for (Index r = 0; r < k; ++r) {
      for (Index c = 0; c < model.m_out; ++c) model.A(r, c) = params[p++];
    }
    model.b = Eigen::Map<const Vector>(params.data() + p, model.m_out);
    return model;
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("malformed {}: {}", (dir / "model.json").string(), e.what()));
  }
}

}  // namespace farcast
