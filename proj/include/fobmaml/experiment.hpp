#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fobmaml/inner_solver.hpp"
#include "fobmaml/meta_grad.hpp"
#include "fobmaml/outer_opt.hpp"
#include "fobmaml/task_model.hpp"

namespace fobmaml {

enum class NuMode { Auto, Fixed, Grid };
enum class BudgetAxis { Iterations, Delta };

struct SweepConfig {
  TaskFamily family;
  double lambda = 1.0;
  std::size_t batch_size = 0;  // 0: the whole family
  std::vector<Method> methods;

  // inner problem
  SolverKind solver = SolverKind::GradientDescent;
  BudgetAxis axis = BudgetAxis::Iterations;
  std::vector<double> inner_budget_grid;  // gradient evaluations per task, or δ values
  std::size_t max_inner_iters = 100000;
  std::optional<double> inner_step_size;
  std::size_t inner_steps = 20;            // Reptile / MAML K on the δ axis
  std::optional<double> reptile_horizon;   // α·K for Reptile / MAML, default 1/λ

  NuMode nu_mode = NuMode::Auto;
  double nu_value = 1e-3;
  std::vector<double> nu_grid;
  double nu_min = 1e-8;
  std::vector<std::size_t> cg_steps_grid{2, 5};

  // outer loop
  OuterVariant outer_variant = OuterVariant::GD;
  bool theory_schedule = false;  // schedule_from_constants instead of the lr grid
  std::vector<double> outer_lr_grid{0.1};
  double clip = 1.0;
  double beta = 0.0;
  std::size_t outer_iters = 100;
  std::size_t training_budget = 20;
  bool warm_start = true;
  double theta0_scale = 0.0;

  double epsilon = 1e-3;
  double theta_scale = 1.0;   // bias sweep evaluation point θ ~ N(0, scale²)
  double trust_radius = 1.0;  // ball radius for the local L0
  std::vector<std::uint64_t> seeds;
  std::string output_path;
};

// Throws ConfigError naming the offending field.
void validate_config(const SweepConfig& config);

// YAML document; unknown keys and missing required fields (family, lambda, methods,
// seeds) are rejected. `overrides` are dotted key=value pairs applied before parsing.
SweepConfig read_config(const std::string& path, const std::vector<std::string>& overrides = {});
SweepConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {});
std::string config_to_yaml(const SweepConfig& config, const std::vector<std::string>& notes = {});

struct RunRecord {
  std::uint64_t seed = 0;
  std::string method;
  std::optional<double> inner_iters;
  std::optional<double> delta;
  std::optional<double> nu;
  std::optional<std::size_t> cg_steps;
  std::size_t outer_iter = 0;
  double bias_abs = 0.0;
  double bias_rel = 0.0;
  double outer_loss = 0.0;
  double grad_norm = 0.0;
  std::size_t grad_evals = 0;
  std::size_t hvp_evals = 0;
  double wall_ms = 0.0;
  // in memory only
  std::string error;                 // set on flagged records
  std::optional<double> outer_lr;    // outer rate of the run (training)

  // HVPs charged at five gradients each.
  double normalized_cost() const { return static_cast<double>(grad_evals) + 5.0 * static_cast<double>(hvp_evals); }
};

inline constexpr std::string_view kCsvHeader =
    "seed,method,inner_iters,delta,nu,cg_steps,outer_iter,bias_abs,bias_rel,outer_loss,grad_norm,grad_evals,"
    "hvp_evals,wall_ms";

void write_records(const std::vector<RunRecord>& records, std::ostream& out);
void write_records(const std::vector<RunRecord>& records, const std::string& path);  // "-" is stdout
std::vector<RunRecord> read_records(std::istream& in);
std::vector<RunRecord> read_records(const std::string& path);

// Value of a numeric column by header name; empty optional for blank cells.
std::optional<double> record_field(const RunRecord& r, std::string_view field);

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::size_t used = 0;
  std::size_t filtered = 0;  // nonpositive or missing points dropped
};

SlopeFit fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y);
SlopeFit fit_loglog_slope(const std::vector<RunRecord>& records, std::string_view x_field, std::string_view y_field);

// One sweep point per (seed, method variant, budget); bias measured against the exact
// batch meta-gradient at a random θ.
std::vector<RunRecord> run_bias_sweep(const SweepConfig& config, std::size_t jobs = 1);

// Task family and training start point for one seed.
std::vector<QuadraticTask> family_for_seed(const SweepConfig& config, std::uint64_t seed);
Vector initial_theta(const SweepConfig& config, std::uint64_t seed);

// Outer loop per (seed, method variant); the outer rate is picked from the grid by
// final loss. Records carry the exact loss F(θ_t) for t = 0..outer_iters.
std::vector<RunRecord> run_training(const SweepConfig& config, std::size_t jobs = 1);

// Mean over tasks of the reference meta-loss / meta-gradient.
double family_loss(const std::vector<QuadraticTask>& tasks, const Vector& theta, double lambda);
Vector family_grad(const std::vector<QuadraticTask>& tasks, const Vector& theta, double lambda);

struct ProbeReport {
  std::size_t pairs = 0;
  // max over pairs of ‖∇F(θ)−∇F(θ')‖ / (min(𝓛(θ),𝓛(θ'))·‖θ−θ'‖), with
  // 𝓛(θ) = c·(L₁ + L̂₂·mean_i‖∇F_i(θ)‖/λ), c = (λ/(λ − max(0, −σ_lo)))²
  double max_ratio = 0.0;
  // same with the literal generalized-smoothness constants 𝓛₀ + 𝓛₁‖∇F(θ)‖
  double max_ratio_literal = 0.0;
  double max_local_lipschitz = 0.0;
  // least-squares fit of local Lipschitz estimates against ‖∇F(θ)‖
  double lipschitz_slope = 0.0;
  double lipschitz_intercept = 0.0;
  SmoothnessConstants constants;
};

ProbeReport smoothness_probe(const std::vector<QuadraticTask>& tasks, double lambda, std::size_t n_pairs,
                             double ball_radius, const Vector& center, std::uint64_t seed);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

enum class Fault { None, FlipMetaGradSign };

// Finite-difference checks of the exact meta-gradient, two-form agreement,
// stationarity of the closed form and the ν-order slopes. With d = 1 and a
// single task, `scalar_report` receives a side-by-side printout.
std::vector<CheckResult> run_gradient_checks(const SweepConfig& config, Fault fault = Fault::None,
                                             std::string* scalar_report = nullptr);

}  // namespace fobmaml
