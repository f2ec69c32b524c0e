#include "fobmaml/inner_solver.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "fobmaml/counters.hpp"
#include "fobmaml/errors.hpp"

namespace fobmaml {

PerturbedProblem::PerturbedProblem(const QuadraticTask& task, Vector theta, double lambda, double nu)
    : task_(&task), theta_(std::move(theta)), lambda_(lambda), nu_(nu) {
  if (static_cast<std::size_t>(theta_.size()) != task.dim())
    throw ContractViolation(fmt::format("theta has dimension {}, task has dimension {}", theta_.size(), task.dim()));
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ParameterError("lambda must be positive");
  if (!std::isfinite(nu)) throw ParameterError("nu must be finite");

  double lo = 0.0, hi = 0.0;
  if (task.shared_test()) {
    // eigenvalues of (1+ν)A are (1+ν)σ_k, extremes at the ends of the spectrum
    const double a = (1.0 + nu) * task.train_eig_min(), b = (1.0 + nu) * task.train_eig_max();
    lo = std::min(a, b);
    hi = std::max(a, b);
  } else {
    Matrix M = task.A() + nu * task.test_A();
    Eigen::SelfAdjointEigenSolver<Matrix> es(M, Eigen::EigenvaluesOnly);
    lo = es.eigenvalues()(0);
    hi = es.eigenvalues()(es.eigenvalues().size() - 1);
  }
  const double ramp = (1.0 + nu) * task.ramp_weight();
  mu_ = lo + lambda + std::min(0.0, ramp);
  smooth_ = hi + lambda + std::max(0.0, ramp);
  const double L1 = task.test_norm() + task.ramp_weight();
  const double hat_L1 = task.train_norm() + task.ramp_weight();
  default_step_ = 1.0 / ((1.0 + std::abs(nu)) * L1 + hat_L1 + lambda);
  if (!(mu_ > 0.0))
    throw ParameterError(fmt::format(
        "perturbed inner problem is not strongly convex (nu = {}, lambda = {}, min curvature {:.6g})", nu, lambda, mu_));
}

double PerturbedProblem::value(const Vector& phi) const {
  const double fhat = train_value(*task_, phi);
  const double f = nu_ != 0.0 ? test_value(*task_, phi) : 0.0;
  return nu_ * f + fhat + 0.5 * lambda_ * (phi - theta_).squaredNorm();
}

Vector PerturbedProblem::gradient(const Vector& phi) const {
  if (static_cast<std::size_t>(phi.size()) != task_->dim())
    throw ContractViolation(fmt::format("phi has dimension {}, task has dimension {}", phi.size(), task_->dim()));
  ++shadow_counts().grad;
  Vector g = detail::train_grad_raw(*task_, phi) + lambda_ * (phi - theta_);
  if (nu_ != 0.0) g += nu_ * detail::test_grad_raw(*task_, phi);
  return g;
}

Vector objective_grad(const PerturbedProblem& problem, const Vector& phi) { return problem.gradient(phi); }

namespace {

void check_start(const PerturbedProblem& problem, const Vector& start) {
  if (static_cast<std::size_t>(start.size()) != problem.task().dim())
    throw ContractViolation("start point dimension does not match the task");
}

bool certified(const SolveOptions& opts, std::size_t it, double cert) {
  return it >= opts.min_iters && cert <= opts.target_delta;
}

SolveReport finish(Vector phi, std::size_t it, double gnorm, double mu, std::size_t evals, bool reached) {
  SolveReport r;
  r.phi = std::move(phi);
  r.iterations = it;
  r.final_grad_norm = gnorm;
  r.certified_delta = gnorm / mu;
  r.grad_evals = evals;
  r.reached = reached;
  return r;
}

}  // namespace

SolveReport solve_gd(const PerturbedProblem& problem, const Vector& start, const SolveOptions& opts) {
  check_start(problem, start);
  const double alpha = opts.step_size.value_or(problem.default_step());
  if (!(alpha > 0.0)) throw ParameterError("GD step size must be positive");
  const double mu = problem.mu();

  Vector x = start;
  double fprev = problem.value(x);
  std::size_t evals = 0, rises = 0;
  for (std::size_t it = 0;; ++it) {
    const Vector g = problem.gradient(x);
    ++evals;
    const double gnorm = g.norm();
    if (!std::isfinite(gnorm)) throw StepSizeError(fmt::format("GD produced a non-finite gradient at step {}", it));
    if (certified(opts, it, gnorm / mu)) return finish(std::move(x), it, gnorm, mu, evals, true);
    if (it >= opts.max_iters) return finish(std::move(x), it, gnorm, mu, evals, gnorm / mu <= opts.target_delta);
    x -= alpha * g;
    const double f = problem.value(x);
    rises = f > fprev ? rises + 1 : 0;
    if (rises >= 10)
      throw StepSizeError(fmt::format("GD diverged with step size {:.6g}: objective rose for 10 consecutive steps", alpha));
    fprev = f;
  }
}

SolveReport solve_gd(const PerturbedProblem& problem, double alpha, double target_delta, std::size_t max_iters) {
  SolveOptions opts;
  opts.step_size = alpha;
  opts.target_delta = target_delta;
  opts.max_iters = max_iters;
  return solve_gd(problem, problem.theta(), opts);
}

SolveReport solve_nesterov(const PerturbedProblem& problem, const Vector& start, const SolveOptions& opts) {
  check_start(problem, start);
  const double mu = problem.mu();
  const double L = 1.0 / problem.default_step();
  const double sq = std::sqrt(mu / L);
  const double beta = (1.0 - sq) / (1.0 + sq);

  Vector x = start, y = start;
  double cert0 = -1.0;
  std::size_t evals = 0;
  for (std::size_t it = 0;; ++it) {
    const Vector g = problem.gradient(y);
    ++evals;
    const double gnorm = g.norm();
    if (!std::isfinite(gnorm)) throw StepSizeError(fmt::format("Nesterov produced a non-finite gradient at step {}", it));
    const double cert = gnorm / mu;
    if (cert0 < 0.0) cert0 = cert;
    if (cert > 1e8 * cert0 + 1e-300) throw StepSizeError("Nesterov iterates diverged");
    if (certified(opts, it, cert)) return finish(std::move(y), it, gnorm, mu, evals, true);
    if (it >= opts.max_iters) return finish(std::move(y), it, gnorm, mu, evals, cert <= opts.target_delta);
    Vector x_next = y - g / L;
    y = x_next + beta * (x_next - x);
    x = std::move(x_next);
  }
}

SolveReport solve_nesterov(const PerturbedProblem& problem, double target_delta, std::size_t max_iters) {
  SolveOptions opts;
  opts.target_delta = target_delta;
  opts.max_iters = max_iters;
  return solve_nesterov(problem, problem.theta(), opts);
}

SolveReport solve(const PerturbedProblem& problem, SolverKind kind, const Vector& start, const SolveOptions& opts) {
  return kind == SolverKind::GradientDescent ? solve_gd(problem, start, opts) : solve_nesterov(problem, start, opts);
}

std::pair<SolveReport, SolveReport> solve_pair(const PerturbedProblem& p, const Vector& p_start,
                                               const PerturbedProblem& q, const Vector& q_start,
                                               SolverKind kind, const SolveOptions& opts) {
  SolveReport a = solve(p, kind, p_start, opts);
  SolveOptions qo = opts;
  qo.min_iters = std::max(opts.min_iters, a.iterations);
  SolveReport b = solve(q, kind, q_start, qo);
  if (b.iterations > a.iterations) {
    SolveOptions po = opts;
    po.min_iters = po.max_iters = b.iterations - a.iterations;
    SolveReport c = solve(p, kind, a.phi, po);
    c.iterations += a.iterations;
    c.grad_evals += a.grad_evals;
    a = std::move(c);
  }
  return {std::move(a), std::move(b)};
}

double predicted_delta(const PerturbedProblem& problem, SolverKind kind, std::size_t steps, double start_grad_norm) {
  const double mu = problem.mu();
  const double d0 = start_grad_norm / mu;
  if (kind == SolverKind::GradientDescent) {
    const double rho = 1.0 - problem.default_step() * mu;
    return std::pow(rho, static_cast<double>(steps)) * d0;
  }
  const double L = 1.0 / problem.default_step();
  if (steps == 0) return d0;
  const double rho = 1.0 - std::sqrt(mu / L);
  // y_k lies within (1+β)‖x_k − φ*‖ + β‖x_{k−1} − φ*‖ of the solution
  return 3.0 * std::sqrt((L + mu) / mu) * std::pow(rho, 0.5 * static_cast<double>(steps - 1)) * d0;
}

Vector reference_phi(const QuadraticTask& task, const Vector& theta, double lambda, double nu) {
  if (task.is_quadratic()) return closed_form_phi(task, theta, lambda, nu);
  PerturbedProblem problem(task, theta, lambda, nu);
  SolveOptions opts;
  opts.target_delta = 1e-12;
  opts.max_iters = 1000000;
  SolveReport r = solve_nesterov(problem, theta, opts);
  if (!r.reached)
    throw NumericalError(fmt::format("reference solve stalled at certificate {:.3g}", r.certified_delta));
  return r.phi;
}

}  // namespace fobmaml
