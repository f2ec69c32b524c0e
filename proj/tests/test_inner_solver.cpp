#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "fobmaml/counters.hpp"
#include "fobmaml/errors.hpp"
#include "fobmaml/inner_solver.hpp"

using namespace fobmaml;

namespace {

Vector random_vec(int d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Vector v(d);
  for (int i = 0; i < d; ++i) v(i) = n(rng);
  return v;
}

Matrix random_sym(int d, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix M(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) M(i, j) = n(rng);
  return 0.5 * (M + M.transpose());
}

QuadraticTask scalar(double a, double b) { return QuadraticTask(Matrix::Constant(1, 1, a), Vector::Constant(1, b)); }

// Oracle: direct LU solve of ((1+ν)A + λI)φ = λθ − (1+ν)b.
Vector lu_phi(const QuadraticTask& t, const Vector& theta, double lambda, double nu) {
  const Eigen::Index d = theta.size();
  const Matrix M = (1.0 + nu) * t.A() + lambda * Matrix::Identity(d, d);
  return M.partialPivLu().solve(lambda * theta - (1.0 + nu) * t.b());
}

}  // namespace

TEST_CASE("objective gradient: linear case and stationarity") {
  const QuadraticTask lin(Matrix::Zero(3, 3), Vector::Constant(3, 2.0));
  const Vector theta = Vector::LinSpaced(3, -1, 1), phi = Vector::Constant(3, 0.5);
  const PerturbedProblem p(lin, theta, 1.5, 0.0);
  CHECK(objective_grad(p, phi).isApprox(lin.b() + 1.5 * (phi - theta)));

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const QuadraticTask t(random_sym(5, rng, 0.3), random_vec(5, rng));
    const Vector th = random_vec(5, rng, 2.0);
    for (double nu : {0.0, 0.05, -0.05}) {
      const PerturbedProblem q(t, th, 2.0, nu);
      CHECK(objective_grad(q, lu_phi(t, th, 2.0, nu)).norm() <= 1e-10 * (1 + th.norm()));
    }
  }
}

TEST_CASE("objective gradient matches differences of the objective") {
  std::mt19937_64 rng(2);
  for (double ramp : {0.0, 0.8}) {
    const QuadraticTask t(random_sym(6, rng, 0.4), random_vec(6, rng), ramp);
    const PerturbedProblem p(t, random_vec(6, rng), 3.0, 0.1);
    const Vector phi = random_vec(6, rng, 2.0);
    const double h = 1e-6;
    Vector fd(6);
    for (int k = 0; k < 6; ++k) {
      Vector e = Vector::Zero(6);
      e(k) = h;
      fd(k) = (p.value(phi + e) - p.value(phi - e)) / (2 * h);
    }
    const Vector g = objective_grad(p, phi);
    CHECK((fd - g).norm() <= 1e-5 * g.norm());
  }
}

TEST_CASE("dimension mismatch and non-convex problems are rejected") {
  const QuadraticTask t = scalar(1.0, 0.0);
  CHECK_THROWS_AS(PerturbedProblem(t, Vector::Zero(2), 1.0, 0.0), ContractViolation);
  const PerturbedProblem p(t, Vector::Zero(1), 1.0, 0.0);
  CHECK_THROWS_AS(objective_grad(p, Vector::Zero(3)), ContractViolation);
  const QuadraticTask neg = scalar(-2.0, 0.0);
  CHECK_THROWS_AS(PerturbedProblem(neg, Vector::Zero(1), 1.0, 0.0), ParameterError);
}

TEST_CASE("a solve started at the minimizer stops immediately") {
  std::mt19937_64 rng(3);
  const QuadraticTask t(random_sym(4, rng, 0.3), random_vec(4, rng));
  const Vector theta = random_vec(4, rng);
  const PerturbedProblem p(t, theta, 2.0, 0.0);
  const Vector star = lu_phi(t, theta, 2.0, 0.0);
  SolveOptions o;
  o.target_delta = 1e-10;
  for (SolverKind k : {SolverKind::GradientDescent, SolverKind::Nesterov}) {
    const auto r = solve(p, k, star, o);
    CHECK(r.iterations <= 1);
    CHECK(r.certified_delta <= 1e-12);
    CHECK(r.reached);
  }
}

TEST_CASE("hand iteration of the scalar GD case") {
  // g(φ) = φ²/2 + (φ−1)²/2, ∇g = 2φ − 1; α = 0.5 lands on 0.5 in one step
  const QuadraticTask t = scalar(1.0, 0.0);
  const PerturbedProblem p(t, Vector::Constant(1, 1.0), 1.0, 0.0);
  const auto r = solve_gd(p, 0.5, 1e-12, 10);
  CHECK(r.phi(0) == 0.5);
  CHECK(r.iterations == 1);
  CHECK(r.grad_evals == 2);
  CHECK(r.certified_delta == 0.0);
}

TEST_CASE("GD reaches the target distance on a random d=20 problem") {
  std::mt19937_64 rng(4);
  const QuadraticTask t(random_sym(20, rng, 0.2), random_vec(20, rng));
  const Vector theta = random_vec(20, rng);
  const double lambda = 1.0 + t.train_norm();
  const PerturbedProblem p(t, theta, lambda, 0.0);
  const auto r = solve_gd(p, p.default_step(), 1e-8, 100000);
  CHECK(r.reached);
  CHECK((r.phi - lu_phi(t, theta, lambda, 0.0)).norm() <= 1e-8);
}

TEST_CASE("certificates bound the true distance") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    TaskFamily f;
    f.dim = 3 + trial % 10;
    f.num_tasks = 1;
    f.sigma_max = 1.0;
    f.allow_negative_eigs = trial % 2 == 0;
    f.seed = 100 + trial;
    const auto t = sample_family(f).front();
    const Vector theta = random_vec(static_cast<int>(f.dim), rng);
    const double lambda = 2.5;
    const double nu = trial % 3 == 0 ? 0.0 : (trial % 3 == 1 ? 0.2 : -0.2);
    const PerturbedProblem p(t, theta, lambda, nu);
    const Vector star = closed_form_phi(t, theta, lambda, nu);
    for (SolverKind k : {SolverKind::GradientDescent, SolverKind::Nesterov}) {
      for (std::size_t cap : {0u, 1u, 3u, 10u, 1000u}) {
        SolveOptions o;
        o.target_delta = 1e-9;
        o.max_iters = cap;
        const auto r = solve(p, k, theta, o);
        // the bound is attained along the slowest direction, so allow rounding
        CHECK((r.phi - star).norm() <= r.certified_delta + 1e-13 * (1 + star.norm()));
        CHECK(r.certified_delta == doctest::Approx(r.final_grad_norm / p.mu()));
        CHECK(r.hvp_evals == 0);
        CHECK(r.grad_evals == r.iterations + 1);
      }
    }
  }
}

TEST_CASE("exhausting max_iters reports the achieved certificate") {
  TaskFamily f;
  f.dim = 30;
  f.num_tasks = 1;
  f.sigma_min = 1e-3;
  f.sigma_max = 1.0;
  const auto t = sample_family(f).front();
  const PerturbedProblem p(t, Vector::Ones(30), 0.01, 0.0);
  const auto r = solve_gd(p, p.default_step(), 1e-12, 5);
  CHECK_FALSE(r.reached);
  CHECK(r.iterations == 5);
  CHECK(r.certified_delta > 1e-12);
}

TEST_CASE("an oversized GD step raises a step-size error") {
  const QuadraticTask t = scalar(1.0, 0.0);
  const PerturbedProblem p(t, Vector::Constant(1, 1.0), 1.0, 0.0);
  CHECK_THROWS_AS(solve_gd(p, 3.0, 1e-12, 1000), StepSizeError);
}

TEST_CASE("Nesterov and GD agree within twice the target") {
  std::mt19937_64 rng(6);
  TaskFamily f;
  f.dim = 25;
  f.num_tasks = 4;
  f.sigma_min = 1e-3;
  f.sigma_max = 1.0;
  for (const auto& t : sample_family(f)) {
    const Vector theta = random_vec(25, rng);
    const PerturbedProblem p(t, theta, 0.1, 0.0);
    const double target = 1e-7;
    const auto a = solve_gd(p, p.default_step(), target, 1000000);
    const auto b = solve_nesterov(p, target, 1000000);
    REQUIRE(a.reached);
    REQUIRE(b.reached);
    CHECK((a.phi - b.phi).norm() <= 2 * target);
    CHECK(b.iterations < a.iterations);
  }
}

TEST_CASE("Nesterov iteration counts on the headline family") {
  TaskFamily f;
  f.dim = 50;
  f.num_tasks = 4;
  f.sigma_min = 0.5e-4;
  f.sigma_max = 0.5;
  std::mt19937_64 rng(7);
  // λ small enough that the inner condition number is about κ̂ = 10⁴
  const double lambda = 0.5e-4, kappa = 1e4, target = 1e-8;
  for (const auto& t : sample_family(f)) {
    const Vector theta = random_vec(50, rng);
    const PerturbedProblem p(t, theta, lambda, 0.0);
    const double R = (theta - closed_form_phi(t, theta, lambda, 0.0)).norm();
    const auto r = solve_nesterov(p, target, 10000000);
    CHECK(r.reached);
    CHECK(static_cast<double>(r.iterations) <= 10.0 * std::sqrt(kappa) * std::log(R / target));
  }
}

TEST_CASE("Nesterov iterations scale with the square root of the condition number") {
  TaskFamily f;
  f.dim = 50;
  f.num_tasks = 1;
  f.sigma_max = 1.0;
  f.sigma_min = 1e-6;
  f.b_scale = 1e-3;  // keeps φ* moderate so 1e-8 stays above the rounding floor
  const auto t = sample_family(f).front();
  std::mt19937_64 rng(8);
  const Vector theta = random_vec(50, rng);
  std::vector<double> lx, ly;
  for (double kappa : {1e2, 1e3, 1e4}) {
    const PerturbedProblem p(t, theta, 1.0 / kappa, 0.0);
    const auto r = solve_nesterov(p, 1e-8, 10000000);
    REQUIRE(r.reached);
    lx.push_back(std::log10(std::sqrt(kappa)));
    ly.push_back(std::log10(static_cast<double>(r.iterations)));
  }
  const double slope = (ly[2] - ly[0]) / (lx[2] - lx[0]);
  MESSAGE("slope " << slope);
  CHECK(std::abs(slope - 1.0) <= 0.25);
}

TEST_CASE("halving the target never moves GD further from the minimizer") {
  std::size_t nesterov_ok = 0;
  const std::size_t seeds = 50;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    TaskFamily f;
    f.dim = 10;
    f.num_tasks = 1;
    f.sigma_min = 0.01;
    f.sigma_max = 1.0;
    f.seed = s;
    const auto t = sample_family(f).front();
    std::mt19937_64 rng(s);
    const Vector theta = random_vec(10, rng);
    const PerturbedProblem p(t, theta, 0.1, 0.0);
    const Vector star = closed_form_phi(t, theta, 0.1, 0.0);
    double prev_gd = INFINITY, prev_n = INFINITY;
    bool mono_n = true;
    for (double target = 1e-3; target > 1e-10; target /= 2) {
      const double gd = (solve_gd(p, p.default_step(), target, 1000000).phi - star).norm();
      const double n = (solve_nesterov(p, target, 1000000).phi - star).norm();
      CHECK(gd <= prev_gd);
      mono_n = mono_n && n <= prev_n * (1 + 1e-12);
      prev_gd = gd;
      prev_n = n;
    }
    nesterov_ok += mono_n;
  }
  MESSAGE("Nesterov monotone on " << nesterov_ok << " of " << seeds << " seeds");
  CHECK(nesterov_ok * 10 >= seeds * 9);
}

TEST_CASE("paired solves run the same number of steps") {
  std::mt19937_64 rng(9);
  const QuadraticTask t(random_sym(8, rng, 0.3), random_vec(8, rng));
  const Vector theta = random_vec(8, rng);
  const PerturbedProblem a(t, theta, 2.0, 0.3), b(t, theta, 2.0, 0.0);
  SolveOptions o;
  o.target_delta = 1e-9;
  for (SolverKind k : {SolverKind::GradientDescent, SolverKind::Nesterov}) {
    const auto [ra, rb] = solve_pair(a, theta, b, theta, k, o);
    CHECK(ra.iterations == rb.iterations);
    CHECK(ra.reached);
    CHECK(rb.reached);
    const Vector star = closed_form_phi(t, theta, 2.0, 0.3);
    CHECK((ra.phi - star).norm() <= ra.certified_delta + 1e-13 * (1 + star.norm()));
  }
}

TEST_CASE("reported gradient evaluations match the shadow counter") {
  std::mt19937_64 rng(10);
  const QuadraticTask t(random_sym(6, rng, 0.3), random_vec(6, rng));
  const Vector theta = random_vec(6, rng);
  const PerturbedProblem p(t, theta, 1.5, 0.1);
  for (SolverKind k : {SolverKind::GradientDescent, SolverKind::Nesterov}) {
    reset_shadow_counts();
    SolveOptions o;
    o.target_delta = 1e-10;
    const auto r = solve(p, k, theta, o);
    CHECK(shadow_counts().grad == r.grad_evals);
    CHECK(shadow_counts().hvp == 0);
  }
}

TEST_CASE("a priori bound covers the achieved distance") {
  std::mt19937_64 rng(11);
  const QuadraticTask t(random_sym(12, rng, 0.3), random_vec(12, rng));
  const Vector theta = random_vec(12, rng);
  const PerturbedProblem p(t, theta, 1.0 + t.train_norm(), 0.0);
  const Vector star = closed_form_phi(t, theta, p.lambda(), 0.0);
  const double g0 = objective_grad(p, theta).norm();
  for (std::size_t s : {1u, 4u, 9u, 20u}) {
    SolveOptions o;
    o.target_delta = 0.0;
    o.max_iters = s;
    for (SolverKind k : {SolverKind::GradientDescent, SolverKind::Nesterov}) {
      const auto r = solve(p, k, theta, o);
      CHECK((r.phi - star).norm() <= predicted_delta(p, k, s, g0) * (1 + 1e-9));
    }
  }
}

TEST_CASE("reference solution of a nonquadratic task is stationary") {
  std::mt19937_64 rng(12);
  const QuadraticTask t(random_sym(5, rng, 0.2), random_vec(5, rng), 1.0);
  const Vector theta = random_vec(5, rng, 2.0);
  const double lambda = 3.0;
  for (double nu : {0.0, 0.1}) {
    const PerturbedProblem p(t, theta, lambda, nu);
    CHECK(objective_grad(p, reference_phi(t, theta, lambda, nu)).norm() <= 1e-12 * p.mu() * 10);
  }
}
