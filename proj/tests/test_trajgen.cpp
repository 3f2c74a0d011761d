#include <cmath>
#include <random>

#include "doctest.h"
#include "farcast/adam.hpp"
#include "farcast/trajgen.hpp"

using namespace farcast;

namespace {

Matrix random_matrix(std::mt19937_64& rng, Index rows, Index cols, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

// Independent per-sample evaluation of the 1-10-1 ReLU network.
double naive_mlp(const Vector& p, double x) {
  double out = p[mlp::kB2];
  for (Index h = 0; h < mlp::kHidden; ++h) {
    const double pre = x * p[mlp::kW1 + h] + p[mlp::kB1 + h];
    out += (pre > 0.0 ? pre : 0.0) * p[mlp::kW2 + h];
  }
  return out;
}

double min_kink_distance(const Vector& p, const Matrix& D) {
  double best = INFINITY;
  for (Index i = 0; i < D.rows(); ++i) {
    for (Index h = 0; h < mlp::kHidden; ++h) {
      best = std::min(best, std::abs(D(i, 0) * p[mlp::kW1 + h] + p[mlp::kB1 + h]));
    }
  }
  return best;
}

}  // namespace

TEST_CASE("syn1 problems are exact, deterministic and seed-dependent") {
  const Problem p = sample_syn1_problem(7);
  CHECK(p.features.rows() == 100);
  CHECK(p.features.cols() == 3);
  CHECK(p.w_star.size() == 3);
  CHECK((p.features * p.w_star - p.responses).cwiseAbs().maxCoeff() == 0.0);

  const Problem again = sample_syn1_problem(7);
  CHECK(again.features == p.features);
  CHECK(again.responses == p.responses);
  CHECK(again.w_star == p.w_star);

  const Problem other = sample_syn1_problem(8);
  CHECK(other.features != p.features);
}

TEST_CASE("syn2 problems have scalar features drawn from N(0, 1)") {
  const Problem p = sample_syn2_problem(3);
  CHECK(p.features.rows() == 100);
  CHECK(p.features.cols() == 1);
  CHECK(p.responses.size() == 100);
  CHECK(p.parameter_dim() == 31);
  CHECK(sample_syn2_problem(3).features == p.features);
  CHECK(sample_syn2_problem(3).responses == p.responses);

  double sum = 0.0;
  double count = 0.0;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const Problem q = sample_syn2_problem(s);
    sum += q.features.sum();
    count += static_cast<double>(q.features.size());
  }
  CHECK(std::abs(sum / count) < 0.05);
}

TEST_CASE("hessian_max_eigenvalue") {
  CHECK(hessian_max_eigenvalue(Matrix::Identity(2, 2)) == doctest::Approx(1.0).epsilon(1e-12));

  Matrix diag = Matrix::Zero(2, 2);
  diag(0, 0) = 3.0;
  diag(1, 1) = 1.0;
  CHECK(hessian_max_eigenvalue(diag) == doctest::Approx(9.0).epsilon(1e-10));

  SUBCASE("matches a dense symmetric eigensolver on random Gram matrices") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      const Problem p = sample_syn1_problem(s);
      const Matrix gram = p.features.transpose() * p.features;
      Eigen::SelfAdjointEigenSolver<Matrix> solver(gram);
      const double expected = solver.eigenvalues().maxCoeff();
      CHECK(std::abs(hessian_max_eigenvalue(p.features) - expected) / expected < 1e-8);
    }
  }

  CHECK_THROWS_AS(hessian_max_eigenvalue(Matrix::Zero(4, 3)), NumericError);
}

TEST_CASE("least_squares_gradient") {
  const Problem p = sample_syn1_problem(11);
  CHECK(least_squares_gradient(p.features, p.responses, p.w_star).cwiseAbs().maxCoeff() == 0.0);

  Matrix D(2, 1);
  D << 1.0, 1.0;
  Vector e(2);
  e << 0.0, 2.0;
  const Vector g = least_squares_gradient(D, e, Vector::Zero(1));
  CHECK(g[0] == -2.0);

  SUBCASE("central finite differences of 0.5 ||Dw - e||^2") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
      const Matrix Dr = random_matrix(rng, 20, 3);
      const Vector er = random_matrix(rng, 20, 1);
      const Vector w = random_matrix(rng, 3, 1);
      const Vector grad = least_squares_gradient(Dr, er, w);
      for (Index k = 0; k < 3; ++k) {
        const double h = 1e-6;
        Vector wp = w, wm = w;
        wp[k] += h;
        wm[k] -= h;
        const double fd = (least_squares_loss(Dr, er, wp) - least_squares_loss(Dr, er, wm)) / (2 * h);
        CHECK(std::abs(fd - grad[k]) <= 1e-6 * std::max(1.0, std::abs(grad[k])));
      }
    }
  }
}

TEST_CASE("mlp_forward") {
  const Problem p = sample_syn2_problem(2);
  CHECK(mlp_forward(Vector::Zero(31), p.features).cwiseAbs().maxCoeff() == 0.0);

  Vector head = Vector::Zero(31);
  head[mlp::kB2] = 1.75;
  CHECK((mlp_forward(head, p.features).array() == 1.75).all());

  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector params = random_matrix(rng, 31, 1);
    const Matrix D = random_matrix(rng, 30, 1);
    const Vector out = mlp_forward(params, D);
    for (Index i = 0; i < D.rows(); ++i) CHECK(std::abs(out[i] - naive_mlp(params, D(i, 0))) < 1e-12);
  }

  CHECK_THROWS_AS(mlp_forward(Vector::Zero(30), p.features), ShapeError);
}

TEST_CASE("mlp_gradient") {
  const Problem p = sample_syn2_problem(4);

  SUBCASE("dead hidden layer leaves only the output bias") {
    const Vector g = mlp_gradient(Vector::Zero(31), p.features, p.responses);
    CHECK(g.head(30).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g[mlp::kB2] == doctest::Approx(-2.0 * p.responses.mean()).epsilon(1e-12));
  }

  SUBCASE("matches central finite differences away from ReLU kinks") {
    std::mt19937_64 rng(21);
    int checked = 0;
    while (checked < 30) {
      const Vector params = random_matrix(rng, 31, 1);
      const Matrix D = random_matrix(rng, 25, 1);
      const Vector e = random_matrix(rng, 25, 1);
      if (min_kink_distance(params, D) < 1e-4) continue;
      const Vector g = mlp_gradient(params, D, e);
      for (Index k = 0; k < 31; ++k) {
        const double h = 1e-6;
        Vector pp = params, pm = params;
        pp[k] += h;
        pm[k] -= h;
        const double fd = (mlp_loss(pp, D, e) - mlp_loss(pm, D, e)) / (2 * h);
        CHECK(std::abs(fd - g[k]) <= 1e-5 * std::max(1.0, std::abs(g[k])));
      }
      ++checked;
    }
  }

  SUBCASE("stacking the data twice leaves the mean-normalized gradient unchanged") {
    Matrix D2(200, 1);
    D2 << p.features, p.features;
    Vector e2(200);
    e2 << p.responses, p.responses;
    std::mt19937_64 rng(1);
    const Vector params = random_matrix(rng, 31, 1);
    const Vector g1 = mlp_gradient(params, p.features, p.responses);
    const Vector g2 = mlp_gradient(params, D2, e2);
    CHECK((g1 - g2).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, g1.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("Adam with a constant gradient steps by the learning rate along -sign(g)") {
  Vector w = Vector::Zero(3);
  Vector g(3);
  g << 2.0, -0.5, 1e-3;
  Adam adam(3, AdamParams{0.01, 0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 50; ++i) {
    const Vector before = w;
    adam.step(w, g);
    const Vector delta = w - before;
    for (Index k = 0; k < 3; ++k) {
      CHECK(delta[k] * g[k] < 0.0);
      CHECK(std::abs(delta[k]) == doctest::Approx(0.01).epsilon(1e-4));
    }
  }
}

TEST_CASE("AdamW decays weights without a gradient") {
  Vector w = Vector::Constant(2, 1.0);
  Adam adamw(2, AdamParams{0.1, 0.9, 0.999, 1e-8, 0.01});
  adamw.step(w, Vector::Zero(2));
  CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.01));
}

TEST_CASE("run_optimizer") {
  const Problem p = sample_syn1_problem(13);
  OptimizerConfig gd;
  gd.kind = OptimizerKind::GD;
  gd.hessian_scale = 0.01;
  gd.num_steps = 200;
  gd.seed = 99;

  SUBCASE("GD started at the optimum stays there") {
    const Trajectory t = run_optimizer(p, gd, p.w_star);
    CHECK(t.steps() == 201);
    for (Index s = 0; s < t.steps(); ++s) CHECK(t.weights.row(s) == p.w_star.transpose());
  }

  SUBCASE("GD with step 0.01 / lambda_max never increases the loss") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      OptimizerConfig cfg = gd;
      cfg.seed = s;
      const Trajectory t = run_optimizer(sample_syn1_problem(100 + s), cfg);
      REQUIRE(t.losses);
      for (Index i = 1; i < t.steps(); ++i) CHECK((*t.losses)[i] <= (*t.losses)[i - 1]);
      CHECK(t.learning_rate == doctest::Approx(0.01 / hessian_max_eigenvalue(sample_syn1_problem(100 + s).features)));
    }
  }

  SUBCASE("SGD with batch 8 and lr 0.001 reduces the loss in at least 95 of 100 runs") {
    OptimizerConfig sgd;
    sgd.kind = OptimizerKind::SGD;
    sgd.learning_rate = 0.001;
    sgd.batch_size = 8;
    int improved = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
      sgd.seed = derive_seed(s, 1);
      const Trajectory t = run_optimizer(sample_syn1_problem(derive_seed(s, 0)), sgd);
      if ((*t.losses)[200] < (*t.losses)[0]) ++improved;
    }
    CHECK(improved >= 95);
  }

  SUBCASE("identical seeds give bitwise-identical trajectories") {
    OptimizerConfig adam;
    adam.kind = OptimizerKind::Adam;
    adam.learning_rate = 0.005;
    adam.batch_size = 64;
    adam.num_steps = 50;
    adam.seed = 3;
    const Problem q = sample_syn2_problem(5);
    const Trajectory a = run_optimizer(q, adam);
    const Trajectory b = run_optimizer(q, adam);
    CHECK(a.dim() == 31);
    CHECK(a.steps() == 51);
    CHECK(a.weights == b.weights);
    CHECK(*a.losses == *b.losses);
    adam.seed = 4;
    CHECK(run_optimizer(q, adam).weights != a.weights);
  }

  SUBCASE("trajectory length is num_steps + 1 for every optimizer") {
    for (auto kind : {OptimizerKind::GD, OptimizerKind::SGD, OptimizerKind::Adam, OptimizerKind::AdamW}) {
      OptimizerConfig cfg;
      cfg.kind = kind;
      cfg.learning_rate = 1e-3;
      cfg.batch_size = 7;
      cfg.num_steps = 33;
      const Trajectory t = run_optimizer(p, cfg);
      CHECK(t.steps() == 34);
      CHECK(t.weights.allFinite());
    }
  }

  SUBCASE("divergence is reported with its step") {
    OptimizerConfig bad;
    bad.kind = OptimizerKind::GD;
    bad.learning_rate = 1e3;
    bad.num_steps = 500;
    try {
      run_optimizer(p, bad);
      FAIL("expected divergence");
    } catch (const DivergenceError& e) {
      CHECK(e.step() > 0);
      CHECK(std::string(e.what()).find(std::to_string(e.step())) != std::string::npos);
    }
  }

  SUBCASE("invalid configurations are rejected") {
    OptimizerConfig cfg;
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(run_optimizer(p, cfg), Error);
    cfg.learning_rate = 1e-3;
    cfg.kind = OptimizerKind::Adam;
    cfg.beta1 = 1.0;
    CHECK_THROWS_AS(run_optimizer(p, cfg), Error);
    OptimizerConfig hess;
    hess.hessian_scale = 0.01;
    CHECK_THROWS_AS(run_optimizer(sample_syn2_problem(1), hess), Error);
  }
}
