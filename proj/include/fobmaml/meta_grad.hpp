#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fobmaml/inner_solver.hpp"
#include "fobmaml/task_model.hpp"

namespace fobmaml {

enum class Method { Exact, FoBmamlForward, FoBmamlSymmetric, FoMaml, Reptile, ImamlCg, MamlUnrolled };

std::string_view method_name(Method m);
Method parse_method(std::string_view name);  // ConfigError on unknown names
bool is_fobmaml(Method m);

struct HyperParams {
  double lambda = 1.0;
  double nu = 1e-3;
  bool nu_auto = false;  // pick ν with tune_nu (needs `constants`)
  double nu_min = 1e-8;
  double delta = 1e-8;   // inner precision target
  double inner_lr = 0.1;     // α for Reptile / MAML
  std::size_t inner_steps = 20;  // K for Reptile / MAML
  double eta = 0.1;
  double clip = 1.0;
  double beta = 0.0;
  std::size_t cg_steps = 5;
  std::optional<SmoothnessConstants> constants;
};

// How the regularized inner problems are solved.
struct InnerSpec {
  SolverKind kind = SolverKind::GradientDescent;
  // Fixed number of inner gradient evaluations per task, shared by all solves of one
  // estimate. Unset: every solve runs to HyperParams::delta.
  std::optional<std::size_t> budget;
  std::size_t max_iters = 100000;
  std::optional<double> step_size;
};

// Previous solutions per perturbation, reused as starting points.
struct WarmStart {
  std::optional<Vector> zero, plus, minus;
};

struct GradEstimate {
  Vector g;
  Method method = Method::Exact;
  std::size_t grad_evals = 0;        // all gradient evaluations, inner and test
  std::size_t hvp_evals = 0;
  std::size_t inner_iterations = 0;  // solver / adaptation steps
  std::size_t inner_grad_evals = 0;  // gradient evaluations spent on the inner problem
  std::optional<double> nu_used;
  std::optional<double> delta_certified;
  bool degraded = false;  // an inner solve missed its precision target
};

Vector forward_difference(const Vector& phi_nu, const Vector& phi_0, double nu, double lambda);
Vector backward_difference(const Vector& phi_0, const Vector& phi_minus, double nu, double lambda);
Vector symmetric_difference(const Vector& phi_plus, const Vector& phi_minus, double nu, double lambda);

// Bias-minimizing ν for a given inner precision δ; ν_min when the constants vanish.
double tune_nu(Method method, double delta, const SmoothnessConstants& constants, double lambda,
               double nu_min = 1e-8);

Vector reference_meta_grad(const QuadraticTask& task, const Vector& theta, double lambda);
double reference_meta_loss(const QuadraticTask& task, const Vector& theta, double lambda);

GradEstimate est_exact(const QuadraticTask& task, const Vector& theta, const HyperParams& h);
GradEstimate est_fobmaml_forward(const QuadraticTask& task, const Vector& theta, const HyperParams& h,
                                 const InnerSpec& solver, WarmStart* warm = nullptr);
GradEstimate est_fobmaml_symmetric(const QuadraticTask& task, const Vector& theta, const HyperParams& h,
                                   const InnerSpec& solver, WarmStart* warm = nullptr);
GradEstimate est_fomaml(const QuadraticTask& task, const Vector& theta, const HyperParams& h,
                        const InnerSpec& solver, WarmStart* warm = nullptr);
GradEstimate est_reptile(const QuadraticTask& task, const Vector& theta, const HyperParams& h);
GradEstimate est_imaml(const QuadraticTask& task, const Vector& theta, const HyperParams& h,
                       const InnerSpec& solver, std::size_t cg_steps, WarmStart* warm = nullptr);
GradEstimate est_maml_unrolled(const QuadraticTask& task, const Vector& theta, const HyperParams& h);

// Dispatch; iMAML takes its step cap from h.cg_steps.
GradEstimate estimate(Method method, const QuadraticTask& task, const Vector& theta, const HyperParams& h,
                      const InnerSpec& solver, WarmStart* warm = nullptr);

// Mean of per-task estimates, reduced in task order. `warm`, when given, holds one
// entry per task. Failures are rethrown as TaskError.
GradEstimate batch_estimate(const std::vector<const QuadraticTask*>& tasks, const Vector& theta,
                            const HyperParams& h, Method method, const InnerSpec& solver,
                            std::vector<WarmStart>* warm = nullptr, std::size_t jobs = 1);
GradEstimate batch_estimate(const std::vector<QuadraticTask>& tasks, const Vector& theta, const HyperParams& h,
                            Method method, const InnerSpec& solver, std::vector<WarmStart>* warm = nullptr,
                            std::size_t jobs = 1);

}  // namespace fobmaml
