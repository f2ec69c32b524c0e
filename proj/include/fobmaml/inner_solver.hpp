#pragma once

#include <cstddef>
#include <optional>
#include <utility>

#include "fobmaml/task_model.hpp"

namespace fobmaml {

// g(φ) = ν·f(φ) + f̂(φ) + λ/2‖φ − θ‖². Holds a reference to the task.
class PerturbedProblem {
 public:
  PerturbedProblem(const QuadraticTask& task, Vector theta, double lambda, double nu);

  const QuadraticTask& task() const { return *task_; }
  const Vector& theta() const { return theta_; }
  double lambda() const { return lambda_; }
  double nu() const { return nu_; }

  double value(const Vector& phi) const;
  Vector gradient(const Vector& phi) const;  // counts one gradient evaluation

  // Strong convexity modulus actually in force (exact for the quadratic part).
  double mu() const { return mu_; }
  // Upper bound on the Hessian norm.
  double smoothness() const { return smooth_; }
  // 1/((1+|ν|)L₁ + L̂₁ + λ) with the task's own norms.
  double default_step() const { return default_step_; }

 private:
  const QuadraticTask* task_;
  Vector theta_;
  double lambda_;
  double nu_;
  double mu_ = 0.0;
  double smooth_ = 0.0;
  double default_step_ = 0.0;
};

Vector objective_grad(const PerturbedProblem& problem, const Vector& phi);

enum class SolverKind { GradientDescent, Nesterov };

struct SolveOptions {
  double target_delta = 1e-8;  // 0 runs to max_iters (fixed budget)
  std::size_t max_iters = 100000;
  std::size_t min_iters = 0;
  std::optional<double> step_size;  // GD only, defaults to problem.default_step()
};

struct SolveReport {
  Vector phi;
  std::size_t iterations = 0;
  double final_grad_norm = 0.0;
  double certified_delta = 0.0;  // final_grad_norm / μ_inner, bounds ‖φ̃ − φ*‖
  std::size_t grad_evals = 0;
  std::size_t hvp_evals = 0;
  bool reached = false;  // certified_delta ≤ target_delta
};

SolveReport solve_gd(const PerturbedProblem& problem, const Vector& start, const SolveOptions& opts);
SolveReport solve_gd(const PerturbedProblem& problem, double alpha, double target_delta, std::size_t max_iters);
SolveReport solve_nesterov(const PerturbedProblem& problem, const Vector& start, const SolveOptions& opts);
SolveReport solve_nesterov(const PerturbedProblem& problem, double target_delta, std::size_t max_iters);
SolveReport solve(const PerturbedProblem& problem, SolverKind kind, const Vector& start, const SolveOptions& opts);

// Two solves forced to the same iteration count: the one that stops first is
// continued from its iterate (a momentum restart for Nesterov).
std::pair<SolveReport, SolveReport> solve_pair(const PerturbedProblem& p, const Vector& p_start,
                                               const PerturbedProblem& q, const Vector& q_start,
                                               SolverKind kind, const SolveOptions& opts);

// A priori bound on ‖φ_s − φ*‖ after `steps` iterations of the solver, from the
// gradient norm at the starting point.
double predicted_delta(const PerturbedProblem& problem, SolverKind kind, std::size_t steps,
                       double start_grad_norm);

// φ* for any task: closed form when quadratic, else Nesterov at δ = 1e-12.
Vector reference_phi(const QuadraticTask& task, const Vector& theta, double lambda, double nu);

}  // namespace fobmaml
