#include "fobmaml/meta_grad.hpp"

#include <algorithm>
#include <cmath>
#include <exception>

#include <fmt/format.h>

#include "fobmaml/errors.hpp"
#include "parallel.hpp"

namespace fobmaml {

namespace {

struct MethodEntry {
  Method method;
  std::string_view name;
};

constexpr MethodEntry kMethods[] = {
    {Method::Exact, "exact"},
    {Method::FoBmamlForward, "fobmaml_forward"},
    {Method::FoBmamlSymmetric, "fobmaml_symmetric"},
    {Method::FoMaml, "fomaml"},
    {Method::Reptile, "reptile"},
    {Method::ImamlCg, "imaml_cg"},
    {Method::MamlUnrolled, "maml_unrolled"},
};

}  // namespace

std::string_view method_name(Method m) {
  for (const auto& e : kMethods)
    if (e.method == m) return e.name;
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (const auto& e : kMethods)
    if (e.name == name) return e.method;
  throw ConfigError(fmt::format("unknown method '{}'", name));
}

bool is_fobmaml(Method m) { return m == Method::FoBmamlForward || m == Method::FoBmamlSymmetric; }

Vector forward_difference(const Vector& phi_nu, const Vector& phi_0, double nu, double lambda) {
  return -lambda * (phi_nu - phi_0) / nu;
}

Vector backward_difference(const Vector& phi_0, const Vector& phi_minus, double nu, double lambda) {
  return -lambda * (phi_0 - phi_minus) / nu;
}

Vector symmetric_difference(const Vector& phi_plus, const Vector& phi_minus, double nu, double lambda) {
  return -lambda * (phi_plus - phi_minus) / (2.0 * nu);
}

namespace {

// Without curvature the ν term of the bias vanishes and λδ/ν shrinks with ν, so take
// the largest ν that keeps the −ν problem strongly convex.
double flat_nu(const SmoothnessConstants& c, double nu_min) {
  const double cap = c.L1 > 0.0 && c.mu > 0.0 ? 0.5 * c.mu / c.L1 : 1.0;
  return std::max(cap, nu_min);
}

}  // namespace

double tune_nu(Method method, double delta, const SmoothnessConstants& c, double lambda, double nu_min) {
  if (!(delta > 0.0)) throw ParameterError("tune_nu needs delta > 0");
  if (!(lambda > 0.0)) throw ParameterError("tune_nu needs lambda > 0");
  const double k = c.L0 * (c.L1 * lambda + c.hat_L2 * c.L0);
  if (!std::isfinite(k)) throw ParameterError("tune_nu needs finite smoothness constants");
  double nu = 0.0;
  if (method == Method::FoBmamlForward) {
    // ν = √(λ²δ / (L0(L1λ + L̂2·L0)))
    if (!(k > 0.0)) return flat_nu(c, nu_min);
    nu = std::sqrt(lambda * lambda * delta / k);
  } else if (method == Method::FoBmamlSymmetric) {
    // second-order term a2·ν² against λδ/ν, a2 = k²/(L0·λ⁴)
    const double a2 = c.L0 > 0.0 ? k * k / (c.L0 * std::pow(lambda, 4)) : 0.0;
    if (!(a2 > 0.0)) return flat_nu(c, nu_min);
    nu = std::cbrt(delta / a2);
  } else {
    throw ParameterError(fmt::format("tune_nu is defined for FO-B-MAML only, got {}", method_name(method)));
  }
  return std::max(nu, nu_min);
}

Vector reference_meta_grad(const QuadraticTask& task, const Vector& theta, double lambda) {
  if (task.is_quadratic()) return exact_meta_grad(task, theta, lambda);
  return implicit_meta_grad(task, reference_phi(task, theta, lambda, 0.0), lambda);
}

double reference_meta_loss(const QuadraticTask& task, const Vector& theta, double lambda) {
  if (task.is_quadratic()) return meta_loss(task, theta, lambda);
  return test_value(task, reference_phi(task, theta, lambda, 0.0));
}

GradEstimate est_exact(const QuadraticTask& task, const Vector& theta, const HyperParams& h) {
  GradEstimate e;
  e.method = Method::Exact;
  e.g = reference_meta_grad(task, theta, h.lambda);
  return e;
}

namespace {

SolveOptions solve_options(const HyperParams& h, const InnerSpec& spec, std::size_t budget_steps) {
  SolveOptions o;
  o.step_size = spec.step_size;
  if (spec.budget) {
    o.target_delta = 0.0;
    o.max_iters = budget_steps;
  } else {
    if (!(h.delta > 0.0)) throw ParameterError("inner precision delta must be positive");
    o.target_delta = h.delta;
    o.max_iters = spec.max_iters;
  }
  return o;
}

const Vector& start_or(const std::optional<Vector>& w, const Vector& theta) {
  return w && w->size() == theta.size() ? *w : theta;
}

// Both FO-B-MAML variants: pick ν, run the paired solves, combine.
GradEstimate fobmaml(Method method, const QuadraticTask& task, const Vector& theta, const HyperParams& h,
                     const InnerSpec& spec, WarmStart* warm) {
  const bool sym = method == Method::FoBmamlSymmetric;
  WarmStart none;
  WarmStart& ws = warm ? *warm : none;
  const Vector& start_a = start_or(ws.plus, theta);
  const Vector& start_b = sym ? start_or(ws.minus, theta) : start_or(ws.zero, theta);

  std::size_t steps = 0;
  std::size_t pilot = 0;
  if (spec.budget) {
    const std::size_t n = *spec.budget;
    if (n < 2) throw ParameterError(fmt::format("inner budget {} too small for FO-B-MAML", n));
    steps = (n - 2) / 2;
  }

  double nu = h.nu;
  if (h.nu_auto) {
    if (!h.constants) throw ParameterError("automatic nu needs smoothness constants");
    double delta = h.delta;
    if (spec.budget) {
      const PerturbedProblem p0(task, theta, h.lambda, 0.0);
      const Vector& pilot_at = sym ? start_a : start_b;
      delta = predicted_delta(p0, spec.kind, steps, p0.gradient(pilot_at).norm());
      pilot = 1;
      delta = std::max(delta, 1e-300);
    }
    nu = tune_nu(method, delta, *h.constants, h.lambda, h.nu_min);
    const auto& c = *h.constants;
    if (c.mu > 0.0 && c.L1 > 0.0) nu = std::min(nu, 0.5 * c.mu / c.L1);
  }
  if (nu == 0.0 || !std::isfinite(nu)) throw ParameterError("nu must be finite and nonzero");

  const SolveOptions opts = solve_options(h, spec, steps);
  const PerturbedProblem pa(task, theta, h.lambda, nu);
  const PerturbedProblem pb(task, theta, h.lambda, sym ? -nu : 0.0);
  auto [a, b] = solve_pair(pa, start_a, pb, start_b, spec.kind, opts);

  GradEstimate e;
  e.method = method;
  e.g = sym ? symmetric_difference(a.phi, b.phi, nu, h.lambda) : forward_difference(a.phi, b.phi, nu, h.lambda);
  e.inner_iterations = a.iterations + b.iterations;
  e.inner_grad_evals = pilot + a.grad_evals + b.grad_evals;
  e.grad_evals = e.inner_grad_evals;
  e.nu_used = nu;
  e.delta_certified = std::max(a.certified_delta, b.certified_delta);
  e.degraded = !spec.budget && !(a.reached && b.reached);

  ws.plus = std::move(a.phi);
  if (sym)
    ws.minus = std::move(b.phi);
  else
    ws.zero = std::move(b.phi);
  return e;
}

// Single ν = 0 solve shared by FO-MAML and iMAML.
SolveReport zero_solve(const QuadraticTask& task, const Vector& theta, const HyperParams& h, const InnerSpec& spec,
                       WarmStart* warm) {
  std::size_t steps = 0;
  if (spec.budget) {
    if (*spec.budget < 1) throw ParameterError("inner budget must be at least 1");
    steps = *spec.budget - 1;
  }
  const PerturbedProblem p0(task, theta, h.lambda, 0.0);
  const Vector& start = warm ? start_or(warm->zero, theta) : theta;
  SolveReport r = solve(p0, spec.kind, start, solve_options(h, spec, steps));
  if (warm) warm->zero = r.phi;
  return r;
}

}  // namespace

GradEstimate est_fobmaml_forward(const QuadraticTask& task, const Vector& theta, const HyperParams& h,
                                 const InnerSpec& solver, WarmStart* warm) {
  return fobmaml(Method::FoBmamlForward, task, theta, h, solver, warm);
}

GradEstimate est_fobmaml_symmetric(const QuadraticTask& task, const Vector& theta, const HyperParams& h,
                                   const InnerSpec& solver, WarmStart* warm) {
  return fobmaml(Method::FoBmamlSymmetric, task, theta, h, solver, warm);
}

GradEstimate est_fomaml(const QuadraticTask& task, const Vector& theta, const HyperParams& h,
                        const InnerSpec& solver, WarmStart* warm) {
  const SolveReport r = zero_solve(task, theta, h, solver, warm);
  GradEstimate e;
  e.method = Method::FoMaml;
  e.g = test_grad(task, r.phi);
  e.inner_iterations = r.iterations;
  e.inner_grad_evals = r.grad_evals;
  e.grad_evals = r.grad_evals + 1;
  e.delta_certified = r.certified_delta;
  e.degraded = !solver.budget && !r.reached;
  return e;
}

GradEstimate est_reptile(const QuadraticTask& task, const Vector& theta, const HyperParams& h) {
  if (h.inner_steps == 0) throw ParameterError("Reptile needs K >= 1 inner steps");
  if (!(h.inner_lr > 0.0)) throw ParameterError("Reptile needs a positive inner learning rate");
  const double alpha = h.inner_lr;
  Vector phi = theta;
  for (std::size_t k = 0; k < h.inner_steps; ++k) phi -= alpha * train_grad(task, phi);
  GradEstimate e;
  e.method = Method::Reptile;
  e.g = (theta - phi) / (static_cast<double>(h.inner_steps) * alpha);
  e.inner_iterations = h.inner_steps;
  e.inner_grad_evals = h.inner_steps;
  e.grad_evals = h.inner_steps;
  return e;
}

GradEstimate est_imaml(const QuadraticTask& task, const Vector& theta, const HyperParams& h, const InnerSpec& solver,
                       std::size_t cg_steps, WarmStart* warm) {
  const SolveReport r = zero_solve(task, theta, h, solver, warm);
  GradEstimate e;
  e.method = Method::ImamlCg;
  e.inner_iterations = r.iterations;
  e.inner_grad_evals = r.grad_evals;
  e.grad_evals = r.grad_evals + 1;
  e.delta_certified = r.certified_delta;
  e.degraded = !solver.budget && !r.reached;

  // CG on (I + H/λ)v = ∇f(φ̃), started at v = ∇f(φ̃)
  const Vector rhs = test_grad(task, r.phi);
  Vector v = rhs;
  if (cg_steps > 0) {
    auto apply = [&](const Vector& x) {
      ++e.hvp_evals;
      return Vector(x + train_hvp(task, r.phi, x) / h.lambda);
    };
    const double tol = 1e-12 * rhs.norm();
    Vector res = rhs - apply(v);
    Vector p = res;
    double rs = res.squaredNorm();
    for (std::size_t k = 0; k < cg_steps; ++k) {
      if (std::sqrt(rs) <= tol) break;
      const Vector q = apply(p);
      const double pq = p.dot(q);
      if (!(pq > 0.0))
        throw NumericalError(fmt::format("iMAML system is not positive definite: curvature {:.3g} at CG step {}", pq, k));
      const double a = rs / pq;
      v += a * p;
      res -= a * q;
      const double rn = res.squaredNorm();
      p = res + (rn / rs) * p;
      rs = rn;
    }
  }
  e.g = std::move(v);
  return e;
}

GradEstimate est_maml_unrolled(const QuadraticTask& task, const Vector& theta, const HyperParams& h) {
  if (!(h.inner_lr > 0.0)) throw ParameterError("MAML needs a positive inner learning rate");
  const double alpha = h.inner_lr;
  const std::size_t K = h.inner_steps;
  std::vector<Vector> traj;
  traj.reserve(K);
  Vector phi = theta;
  for (std::size_t k = 0; k < K; ++k) {
    traj.push_back(phi);
    phi -= alpha * train_grad(task, phi);
  }
  Vector v = test_grad(task, phi);
  for (std::size_t k = K; k-- > 0;) v -= alpha * train_hvp(task, traj[k], v);
  GradEstimate e;
  e.method = Method::MamlUnrolled;
  e.g = std::move(v);
  e.inner_iterations = K;
  e.inner_grad_evals = K;
  e.grad_evals = K + 1;
  e.hvp_evals = K;
  return e;
}

GradEstimate estimate(Method method, const QuadraticTask& task, const Vector& theta, const HyperParams& h,
                      const InnerSpec& solver, WarmStart* warm) {
  switch (method) {
    case Method::Exact: return est_exact(task, theta, h);
    case Method::FoBmamlForward: return est_fobmaml_forward(task, theta, h, solver, warm);
    case Method::FoBmamlSymmetric: return est_fobmaml_symmetric(task, theta, h, solver, warm);
    case Method::FoMaml: return est_fomaml(task, theta, h, solver, warm);
    case Method::Reptile: return est_reptile(task, theta, h);
    case Method::ImamlCg: return est_imaml(task, theta, h, solver, h.cg_steps, warm);
    case Method::MamlUnrolled: return est_maml_unrolled(task, theta, h);
  }
  throw ContractViolation("unhandled method");
}

GradEstimate batch_estimate(const std::vector<const QuadraticTask*>& tasks, const Vector& theta, const HyperParams& h,
                            Method method, const InnerSpec& solver, std::vector<WarmStart>* warm, std::size_t jobs) {
  const std::size_t n = tasks.size();
  if (n == 0) throw ContractViolation("batch_estimate needs a nonempty task batch");
  if (warm && warm->size() != n) throw ContractViolation("one warm start per task expected");

  std::vector<GradEstimate> parts(n);
  const auto errors = detail::parallel_for(n, jobs, [&](std::size_t i) {
    parts[i] = estimate(method, *tasks[i], theta, h, solver, warm ? &(*warm)[i] : nullptr);
  });
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& ex) {
      throw TaskError(i, ex.what());
    }
  }

  GradEstimate out;
  out.method = method;
  out.g = Vector::Zero(theta.size());
  double nu_sum = 0.0;
  for (const auto& p : parts) {
    out.g += p.g;
    out.grad_evals += p.grad_evals;
    out.hvp_evals += p.hvp_evals;
    out.inner_iterations += p.inner_iterations;
    out.inner_grad_evals += p.inner_grad_evals;
    out.degraded = out.degraded || p.degraded;
    if (p.nu_used) nu_sum += *p.nu_used;
    if (p.delta_certified) out.delta_certified = std::max(out.delta_certified.value_or(0.0), *p.delta_certified);
  }
  out.g /= static_cast<double>(n);
  if (is_fobmaml(method)) out.nu_used = nu_sum / static_cast<double>(n);
  return out;
}

GradEstimate batch_estimate(const std::vector<QuadraticTask>& tasks, const Vector& theta, const HyperParams& h,
                            Method method, const InnerSpec& solver, std::vector<WarmStart>* warm, std::size_t jobs) {
  std::vector<const QuadraticTask*> ptrs;
  ptrs.reserve(tasks.size());
  for (const auto& t : tasks) ptrs.push_back(&t);
  return batch_estimate(ptrs, theta, h, method, solver, warm, jobs);
}

}  // namespace fobmaml
