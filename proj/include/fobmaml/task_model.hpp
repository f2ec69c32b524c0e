#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace fobmaml {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Training objective f̂(φ) = ½φᵀAφ + bᵀφ + γ·Σ r(φ_k), test objective f likewise with
// (test_A, test_b). r(x) = x²/2 − log cosh x is the optional smooth nonquadratic term:
// r'' = tanh² ∈ [0, 1), |r'''| ≤ 4/(3√3). γ = 0 gives the plain quadratic task.
class QuadraticTask {
 public:
  QuadraticTask(Matrix A, Vector b, double ramp_weight = 0.0);
  QuadraticTask(Matrix A, Vector b, Matrix test_A, Vector test_b, double ramp_weight = 0.0);

  std::size_t dim() const { return static_cast<std::size_t>(b_.size()); }
  const Matrix& A() const { return A_; }
  const Vector& b() const { return b_; }
  const Matrix& test_A() const { return shared_test_ ? A_ : test_A_; }
  const Vector& test_b() const { return shared_test_ ? b_ : test_b_; }
  bool shared_test() const { return shared_test_; }
  double ramp_weight() const { return ramp_; }
  bool is_quadratic() const { return ramp_ == 0.0; }

  // Spectrum of A, ascending, cached at construction.
  const Vector& train_eigenvalues() const { return eig_; }
  const Matrix& train_eigenvectors() const { return eigvec_; }
  double train_eig_min() const { return eig_(0); }
  double train_eig_max() const { return eig_(eig_.size() - 1); }
  double test_eig_min() const { return test_eig_min_; }
  double test_eig_max() const { return test_eig_max_; }
  // Spectral norms (‖·‖₂) of A and test_A.
  double train_norm() const;
  double test_norm() const;

 private:
  void init();

  Matrix A_;
  Vector b_;
  Matrix test_A_;
  Vector test_b_;
  bool shared_test_ = true;
  double ramp_ = 0.0;
  Vector eig_;
  Matrix eigvec_;
  double test_eig_min_ = 0.0;
  double test_eig_max_ = 0.0;
};

// Max third derivative of r, i.e. 4/(3√3).
inline constexpr double kRampThirdDerivBound = 0.76980035891950105;

// Analytic oracles. Gradients and HVPs tick the shadow counter (see counters.hpp).
double train_value(const QuadraticTask& task, const Vector& phi);
Vector train_grad(const QuadraticTask& task, const Vector& phi);
Vector train_hvp(const QuadraticTask& task, const Vector& phi, const Vector& v);
Vector train_hvp(const QuadraticTask& task, const Vector& v);  // quadratic tasks only
double test_value(const QuadraticTask& task, const Vector& phi);
Vector test_grad(const QuadraticTask& task, const Vector& phi);
Vector test_hvp(const QuadraticTask& task, const Vector& phi, const Vector& v);

// Dense Hessians (used by reference computations).
Matrix train_hessian(const QuadraticTask& task, const Vector& phi);
Matrix test_hessian(const QuadraticTask& task, const Vector& phi);

namespace detail {
// Uncounted versions for composite oracles.
Vector train_grad_raw(const QuadraticTask& task, const Vector& phi);
Vector test_grad_raw(const QuadraticTask& task, const Vector& phi);
Vector train_hvp_raw(const QuadraticTask& task, const Vector& phi, const Vector& v);
}  // namespace detail

// Minimizer of ν·f + f̂ + λ/2‖φ−θ‖² for quadratic tasks:
// (A + ν·test_A + λI)⁻¹(λθ − b − ν·test_b).
Vector closed_form_phi(const QuadraticTask& task, const Vector& theta, double lambda, double nu);

// ∇F_i(θ) = λ(A+λI)⁻¹(test_A(A+λI)⁻¹(λθ−b) + test_b), quadratic tasks.
Vector exact_meta_grad(const QuadraticTask& task, const Vector& theta, double lambda);

// (I + ∇²f̂(φ*)/λ)⁻¹∇f(φ*), valid for any task given the inner solution.
Vector implicit_meta_grad(const QuadraticTask& task, const Vector& phi_star, double lambda);

// F_i(θ) = f(φ*(θ)), quadratic tasks.
double meta_loss(const QuadraticTask& task, const Vector& theta, double lambda);

struct TaskFamily {
  std::size_t dim = 50;
  std::size_t num_tasks = 8;
  double sigma_min = 5e-5;
  double sigma_max = 0.5;
  bool allow_negative_eigs = false;
  bool linear = false;        // A = 0
  double b_scale = 1.0;
  double ramp_weight = 0.0;   // γ of the nonquadratic term
  double test_noise = 0.0;    // test_b = b + test_noise·b_scale·ξ when > 0
  std::uint64_t seed = 42;
};

// Throws ConfigError on an invalid family.
void validate_family(const TaskFamily& family);

std::vector<QuadraticTask> sample_family(const TaskFamily& family);

struct SmoothnessConstants {
  double lambda = 1.0;
  double L0 = 0.0;      // test Lipschitz bound over the trust ball
  double L1 = 0.0;      // test smoothness
  double hat_L1 = 0.0;  // training smoothness
  double hat_L2 = 0.0;  // training Hessian Lipschitz
  double zeta = 0.0;    // task variance bound
  double mu = 0.0;      // λ − L̂₁

  double cal_L0() const { return L1 / 4.0 + hat_L2 * zeta / (4.0 * lambda); }
  double cal_L1() const { return hat_L2 / (2.0 * lambda); }
  double G() const { return lambda * L0 / mu; }
  double cal_L() const { return cal_L0() + G() * cal_L1(); }
};

// Constants of a task family with L0 taken over the ball B(center, radius).
// ζ is bounded by G since the variance of ∇F_i is at most max ‖∇F_i‖² ≤ G².
SmoothnessConstants compute_constants(const std::vector<QuadraticTask>& tasks, double lambda,
                                      const Vector& center, double radius);

}  // namespace fobmaml
