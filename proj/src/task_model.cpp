#include "fobmaml/task_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include <fmt/format.h>

#include "fobmaml/counters.hpp"
#include "fobmaml/errors.hpp"

namespace fobmaml {

EvalCounts& shadow_counts() {
  thread_local EvalCounts counts;
  return counts;
}

namespace {

void require_dim(const QuadraticTask& task, const Vector& v, const char* name) {
  if (static_cast<std::size_t>(v.size()) != task.dim())
    throw ContractViolation(
        fmt::format("{} has dimension {}, task has dimension {}", name, v.size(), task.dim()));
}

double symmetry_defect(const Matrix& M) { return (M - M.transpose()).cwiseAbs().maxCoeff(); }

// log cosh without overflow.
double log_cosh(double x) {
  const double a = std::abs(x);
  return a + std::log1p(std::exp(-2.0 * a)) - std::log(2.0);
}

double ramp_value(const Vector& phi) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < phi.size(); ++k) s += 0.5 * phi(k) * phi(k) - log_cosh(phi(k));
  return s;
}

Vector ramp_grad(const Vector& phi) { return phi - phi.array().tanh().matrix(); }

Vector ramp_curvature(const Vector& phi) { return phi.array().tanh().square().matrix(); }

}  // namespace

QuadraticTask::QuadraticTask(Matrix A, Vector b, double ramp_weight)
    : A_(std::move(A)), b_(std::move(b)), shared_test_(true), ramp_(ramp_weight) {
  init();
}

QuadraticTask::QuadraticTask(Matrix A, Vector b, Matrix test_A, Vector test_b, double ramp_weight)
    : A_(std::move(A)),
      b_(std::move(b)),
      test_A_(std::move(test_A)),
      test_b_(std::move(test_b)),
      shared_test_(false),
      ramp_(ramp_weight) {
  init();
}

void QuadraticTask::init() {
  const auto d = b_.size();
  if (d == 0) throw ContractViolation("task dimension must be positive");
  if (A_.rows() != d || A_.cols() != d)
    throw ContractViolation(fmt::format("A is {}x{}, expected {}x{}", A_.rows(), A_.cols(), d, d));
  if (symmetry_defect(A_) > 1e-12) throw ContractViolation("A is not symmetric");
  if (!(ramp_ >= 0.0) || !std::isfinite(ramp_))
    throw ContractViolation("ramp weight must be finite and nonnegative");
  Eigen::SelfAdjointEigenSolver<Matrix> es(A_);
  eig_ = es.eigenvalues();
  eigvec_ = es.eigenvectors();
  if (shared_test_) {
    test_eig_min_ = eig_(0);
    test_eig_max_ = eig_(d - 1);
    return;
  }
  if (test_A_.rows() != d || test_A_.cols() != d || test_b_.size() != d)
    throw ContractViolation("test objective dimensions do not match the training objective");
  if (symmetry_defect(test_A_) > 1e-12) throw ContractViolation("test_A is not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> ts(test_A_, Eigen::EigenvaluesOnly);
  test_eig_min_ = ts.eigenvalues()(0);
  test_eig_max_ = ts.eigenvalues()(d - 1);
}

double QuadraticTask::train_norm() const { return std::max(std::abs(eig_(0)), std::abs(eig_(eig_.size() - 1))); }

double QuadraticTask::test_norm() const { return std::max(std::abs(test_eig_min_), std::abs(test_eig_max_)); }

namespace detail {

Vector train_grad_raw(const QuadraticTask& task, const Vector& phi) {
  Vector g = task.A() * phi + task.b();
  if (!task.is_quadratic()) g += task.ramp_weight() * ramp_grad(phi);
  return g;
}

Vector test_grad_raw(const QuadraticTask& task, const Vector& phi) {
  Vector g = task.test_A() * phi + task.test_b();
  if (!task.is_quadratic()) g += task.ramp_weight() * ramp_grad(phi);
  return g;
}

Vector train_hvp_raw(const QuadraticTask& task, const Vector& phi, const Vector& v) {
  Vector h = task.A() * v;
  if (!task.is_quadratic()) h += task.ramp_weight() * ramp_curvature(phi).cwiseProduct(v);
  return h;
}

}  // namespace detail

double train_value(const QuadraticTask& task, const Vector& phi) {
  require_dim(task, phi, "phi");
  double v = 0.5 * phi.dot(task.A() * phi) + task.b().dot(phi);
  if (!task.is_quadratic()) v += task.ramp_weight() * ramp_value(phi);
  return v;
}

Vector train_grad(const QuadraticTask& task, const Vector& phi) {
  require_dim(task, phi, "phi");
  ++shadow_counts().grad;
  return detail::train_grad_raw(task, phi);
}

Vector train_hvp(const QuadraticTask& task, const Vector& phi, const Vector& v) {
  require_dim(task, phi, "phi");
  require_dim(task, v, "v");
  ++shadow_counts().hvp;
  return detail::train_hvp_raw(task, phi, v);
}

Vector train_hvp(const QuadraticTask& task, const Vector& v) {
  if (!task.is_quadratic())
    throw ContractViolation("Hessian of a nonquadratic task depends on the point");
  require_dim(task, v, "v");
  ++shadow_counts().hvp;
  return task.A() * v;
}

double test_value(const QuadraticTask& task, const Vector& phi) {
  require_dim(task, phi, "phi");
  double v = 0.5 * phi.dot(task.test_A() * phi) + task.test_b().dot(phi);
  if (!task.is_quadratic()) v += task.ramp_weight() * ramp_value(phi);
  return v;
}

Vector test_grad(const QuadraticTask& task, const Vector& phi) {
  require_dim(task, phi, "phi");
  ++shadow_counts().grad;
  return detail::test_grad_raw(task, phi);
}

Vector test_hvp(const QuadraticTask& task, const Vector& phi, const Vector& v) {
  require_dim(task, phi, "phi");
  require_dim(task, v, "v");
  ++shadow_counts().hvp;
  Vector h = task.test_A() * v;
  if (!task.is_quadratic()) h += task.ramp_weight() * ramp_curvature(phi).cwiseProduct(v);
  return h;
}

Matrix train_hessian(const QuadraticTask& task, const Vector& phi) {
  require_dim(task, phi, "phi");
  Matrix H = task.A();
  if (!task.is_quadratic()) H.diagonal() += task.ramp_weight() * ramp_curvature(phi);
  return H;
}

Matrix test_hessian(const QuadraticTask& task, const Vector& phi) {
  require_dim(task, phi, "phi");
  Matrix H = task.test_A();
  if (!task.is_quadratic()) H.diagonal() += task.ramp_weight() * ramp_curvature(phi);
  return H;
}

namespace {

// Solves (c·A + λI)x = rhs in the cached eigenbasis of A.
Vector shifted_solve(const QuadraticTask& task, double c, double lambda, const Vector& rhs) {
  const Vector diag = (c * task.train_eigenvalues()).array() + lambda;
  const double scale = std::abs(c) * task.train_norm() + std::abs(lambda);
  for (Eigen::Index k = 0; k < diag.size(); ++k) {
    if (std::abs(diag(k)) <= 1e-12 * scale)
      throw SingularityError(
          fmt::format("singular inner system: eigenvalue {:.6g} of the perturbed Hessian", diag(k)),
          diag(k));
  }
  const Matrix& V = task.train_eigenvectors();
  return V * (V.transpose() * rhs).cwiseQuotient(diag);
}

Vector dense_sym_solve(const Matrix& M, const Vector& rhs) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(M);
  const Vector& ev = es.eigenvalues();
  const double scale = ev.cwiseAbs().maxCoeff();
  for (Eigen::Index k = 0; k < ev.size(); ++k) {
    if (std::abs(ev(k)) <= 1e-12 * scale)
      throw SingularityError(
          fmt::format("singular inner system: eigenvalue {:.6g} of the perturbed Hessian", ev(k)),
          ev(k));
  }
  return es.eigenvectors() * (es.eigenvectors().transpose() * rhs).cwiseQuotient(ev);
}

void require_quadratic(const QuadraticTask& task, const char* what) {
  if (!task.is_quadratic())
    throw ContractViolation(fmt::format("{} needs a quadratic task (no closed form)", what));
}

}  // namespace

Vector closed_form_phi(const QuadraticTask& task, const Vector& theta, double lambda, double nu) {
  require_quadratic(task, "closed_form_phi");
  require_dim(task, theta, "theta");
  if (task.shared_test()) return shifted_solve(task, 1.0 + nu, lambda, lambda * theta - (1.0 + nu) * task.b());
  Matrix M = task.A() + nu * task.test_A();
  M.diagonal().array() += lambda;
  return dense_sym_solve(M, lambda * theta - task.b() - nu * task.test_b());
}

Vector exact_meta_grad(const QuadraticTask& task, const Vector& theta, double lambda) {
  require_quadratic(task, "exact_meta_grad");
  require_dim(task, theta, "theta");
  const Vector phi = shifted_solve(task, 1.0, lambda, lambda * theta - task.b());
  return lambda * shifted_solve(task, 1.0, lambda, task.test_A() * phi + task.test_b());
}

Vector implicit_meta_grad(const QuadraticTask& task, const Vector& phi_star, double lambda) {
  require_dim(task, phi_star, "phi_star");
  Matrix M = train_hessian(task, phi_star) / lambda;
  M.diagonal().array() += 1.0;
  return M.partialPivLu().solve(detail::test_grad_raw(task, phi_star));
}

double meta_loss(const QuadraticTask& task, const Vector& theta, double lambda) {
  return test_value(task, closed_form_phi(task, theta, lambda, 0.0));
}

void validate_family(const TaskFamily& f) {
  if (f.dim < 1) throw ConfigError("family.d must be at least 1");
  if (f.num_tasks < 1) throw ConfigError("family.num_tasks must be at least 1");
  if (!std::isfinite(f.sigma_min) || !std::isfinite(f.sigma_max))
    throw ConfigError("family eigenvalue range must be finite");
  if (f.sigma_min > f.sigma_max)
    throw ConfigError(fmt::format("family.sigma_min ({}) exceeds family.sigma_max ({})", f.sigma_min, f.sigma_max));
  if (!f.linear && !f.allow_negative_eigs && f.sigma_min <= 0.0)
    throw ConfigError("family.sigma_min must be positive unless allow_negative_eigs is set");
  if (f.allow_negative_eigs && f.sigma_max <= 0.0)
    throw ConfigError("family.sigma_max must be positive when allow_negative_eigs is set");
  if (!(f.b_scale >= 0.0)) throw ConfigError("family.b_scale must be nonnegative");
  if (!(f.ramp_weight >= 0.0)) throw ConfigError("family.ramp_weight must be nonnegative");
  if (!(f.test_noise >= 0.0)) throw ConfigError("family.test_noise must be nonnegative");
}

std::vector<QuadraticTask> sample_family(const TaskFamily& f) {
  validate_family(f);
  std::mt19937_64 rng(f.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(f.dim);

  std::vector<QuadraticTask> tasks;
  tasks.reserve(f.num_tasks);
  for (std::size_t i = 0; i < f.num_tasks; ++i) {
    Matrix A = Matrix::Zero(d, d);
    if (!f.linear) {
      Matrix G(d, d);
      for (Eigen::Index c = 0; c < d; ++c)
        for (Eigen::Index r = 0; r < d; ++r) G(r, c) = normal(rng);
      Eigen::HouseholderQR<Matrix> qr(G);
      Matrix Q = qr.householderQ();
      const Matrix& R = qr.matrixQR();
      for (Eigen::Index c = 0; c < d; ++c)
        if (R(c, c) < 0.0) Q.col(c) = -Q.col(c);

      Vector lam(d);
      if (f.allow_negative_eigs) {
        for (Eigen::Index k = 0; k < d; ++k) lam(k) = -f.sigma_max + 2.0 * f.sigma_max * unif(rng);
        lam(d - 1) = f.sigma_max;
      } else {
        const double lo = std::log(f.sigma_min), hi = std::log(f.sigma_max);
        for (Eigen::Index k = 0; k < d; ++k) lam(k) = std::exp(lo + (hi - lo) * unif(rng));
        // pin the extremes so the declared range is attained exactly
        if (d >= 2) lam(0) = f.sigma_min;
        lam(d - 1) = f.sigma_max;
      }
      A = Q * lam.asDiagonal() * Q.transpose();
      A = 0.5 * (A + A.transpose()).eval();
    }
    Vector b(d);
    for (Eigen::Index k = 0; k < d; ++k) b(k) = f.b_scale * normal(rng);
    if (f.test_noise > 0.0) {
      Vector tb(d);
      for (Eigen::Index k = 0; k < d; ++k) tb(k) = b(k) + f.test_noise * f.b_scale * normal(rng);
      tasks.emplace_back(A, std::move(b), A, std::move(tb), f.ramp_weight);
    } else {
      tasks.emplace_back(std::move(A), std::move(b), f.ramp_weight);
    }
  }
  return tasks;
}

SmoothnessConstants compute_constants(const std::vector<QuadraticTask>& tasks, double lambda,
                                      const Vector& center, double radius) {
  if (tasks.empty()) throw ContractViolation("compute_constants needs at least one task");
  SmoothnessConstants c;
  c.lambda = lambda;
  const double reach = center.norm() + radius;
  for (const auto& t : tasks) {
    const double g = t.ramp_weight();
    c.hat_L1 = std::max(c.hat_L1, t.train_norm() + g);
    c.L1 = std::max(c.L1, t.test_norm() + g);
    c.hat_L2 = std::max(c.hat_L2, g * kRampThirdDerivBound);
    // |r'(x)| = |x − tanh x| ≤ |x|
    c.L0 = std::max(c.L0, t.test_norm() * reach + t.test_b().norm() + g * reach);
  }
  c.mu = lambda - c.hat_L1;
  c.zeta = c.mu > 0.0 ? c.G() : std::numeric_limits<double>::infinity();
  return c;
}

}  // namespace fobmaml
