#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>

#include <fmt/format.h>

#include "fobmaml/errors.hpp"
#include "fobmaml/experiment.hpp"
#include "parallel.hpp"

namespace fobmaml {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

struct Variant {
  Method method;
  std::optional<double> nu;
  std::optional<std::size_t> cg;
};

std::vector<Variant> expand_variants(const SweepConfig& c) {
  std::vector<Variant> out;
  for (Method m : c.methods) {
    if (is_fobmaml(m)) {
      if (c.nu_mode == NuMode::Grid)
        for (double nu : c.nu_grid) out.push_back({m, nu, std::nullopt});
      else if (c.nu_mode == NuMode::Fixed)
        out.push_back({m, c.nu_value, std::nullopt});
      else
        out.push_back({m, std::nullopt, std::nullopt});
    } else if (m == Method::ImamlCg) {
      for (std::size_t cg : c.cg_steps_grid) out.push_back({m, std::nullopt, cg});
    } else {
      out.push_back({m, std::nullopt, std::nullopt});
    }
  }
  return out;
}

HyperParams make_hyper(const SweepConfig& c, const Variant& v, std::size_t K) {
  HyperParams h;
  h.lambda = c.lambda;
  h.nu_min = c.nu_min;
  if (v.nu) {
    h.nu = *v.nu;
  } else if (is_fobmaml(v.method)) {
    h.nu_auto = true;
  }
  h.cg_steps = v.cg.value_or(0);
  h.inner_steps = K;
  // Reptile and MAML adapt on raw f̂ over a fixed horizon α·K
  h.inner_lr = c.reptile_horizon.value_or(1.0 / c.lambda) / static_cast<double>(K);
  return h;
}

InnerSpec make_spec(const SweepConfig& c, std::optional<std::size_t> budget) {
  InnerSpec s;
  s.kind = c.solver;
  s.budget = budget;
  s.max_iters = c.max_inner_iters;
  s.step_size = c.inner_step_size;
  return s;
}

Vector gaussian(std::size_t d, double scale, std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(static_cast<Eigen::Index>(d));
  for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = scale * normal(rng);
  return v;
}

Vector batch_grad(const std::vector<const QuadraticTask*>& batch, const Vector& theta, double lambda) {
  Vector g = Vector::Zero(theta.size());
  for (const auto* t : batch) g += reference_meta_grad(*t, theta, lambda);
  return g / static_cast<double>(batch.size());
}

void fill_estimate(RunRecord& r, const GradEstimate& e, const Vector& exact) {
  r.bias_abs = (e.g - exact).norm();
  r.bias_rel = r.bias_abs / std::max(exact.norm(), 1e-30);
  r.grad_evals = e.grad_evals;
  r.hvp_evals = e.hvp_evals;
  if (e.nu_used) r.nu = *e.nu_used;
}

void flag(RunRecord& r, const std::string& what) {
  r.error = what;
  r.bias_abs = r.bias_rel = std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

double family_loss(const std::vector<QuadraticTask>& tasks, const Vector& theta, double lambda) {
  double s = 0.0;
  for (const auto& t : tasks) s += reference_meta_loss(t, theta, lambda);
  return s / static_cast<double>(tasks.size());
}

Vector family_grad(const std::vector<QuadraticTask>& tasks, const Vector& theta, double lambda) {
  Vector g = Vector::Zero(theta.size());
  for (const auto& t : tasks) g += reference_meta_grad(t, theta, lambda);
  return g / static_cast<double>(tasks.size());
}

std::vector<RunRecord> run_bias_sweep(const SweepConfig& c, std::size_t jobs) {
  validate_config(c);
  struct SeedData {
    std::uint64_t seed;
    std::vector<QuadraticTask> tasks;
    std::vector<const QuadraticTask*> batch;
    Vector theta, exact;
    double loss = 0.0;
    SmoothnessConstants constants;
  };
  std::vector<SeedData> seeds;
  seeds.reserve(c.seeds.size());
  for (std::uint64_t s : c.seeds) {
    SeedData sd;
    sd.seed = s;
    sd.tasks = family_for_seed(c, s);
    const std::size_t B = c.batch_size == 0 ? sd.tasks.size() : c.batch_size;
    for (std::size_t i = 0; i < B; ++i) sd.batch.push_back(&sd.tasks[i]);
    sd.theta = gaussian(c.family.dim, c.theta_scale, s, 1);
    sd.exact = batch_grad(sd.batch, sd.theta, c.lambda);
    double loss = 0.0;
    for (const auto* t : sd.batch) loss += reference_meta_loss(*t, sd.theta, c.lambda);
    sd.loss = loss / static_cast<double>(B);
    std::vector<QuadraticTask> batch_tasks;
    for (const auto* t : sd.batch) batch_tasks.push_back(*t);
    sd.constants = compute_constants(batch_tasks, c.lambda, sd.theta, c.trust_radius);
    seeds.push_back(std::move(sd));
  }

  const auto variants = expand_variants(c);
  const std::size_t nv = variants.size(), ng = c.inner_budget_grid.size();
  std::vector<RunRecord> out(seeds.size() * nv * ng);
  detail::parallel_for(out.size(), jobs, [&](std::size_t job) {
    const std::size_t si = job / (nv * ng), vi = (job / ng) % nv, gi = job % ng;
    const SeedData& sd = seeds[si];
    const Variant& v = variants[vi];
    const double point = c.inner_budget_grid[gi];
    RunRecord& r = out[job];
    r.seed = sd.seed;
    r.method = std::string(method_name(v.method));
    r.cg_steps = v.cg;
    r.outer_loss = sd.loss;
    r.grad_norm = sd.exact.norm();

    std::optional<std::size_t> budget;
    std::size_t K = c.inner_steps;
    HyperParams h;
    if (c.axis == BudgetAxis::Iterations) {
      budget = static_cast<std::size_t>(point);
      K = *budget;
      r.inner_iters = point;
    }
    h = make_hyper(c, v, K);
    h.constants = sd.constants;
    if (c.axis == BudgetAxis::Delta) {
      h.delta = point;
      r.delta = point;
    }
    const auto t0 = Clock::now();
    try {
      const GradEstimate e = batch_estimate(sd.batch, sd.theta, h, v.method, make_spec(c, budget));
      fill_estimate(r, e, sd.exact);
      if (c.axis == BudgetAxis::Iterations) {
        if (e.delta_certified) r.delta = *e.delta_certified;
      } else {
        r.inner_iters = static_cast<double>(e.inner_iterations) / static_cast<double>(sd.batch.size());
      }
      if (e.degraded) r.error = "inner precision not reached";
    } catch (const std::exception& ex) {
      flag(r, ex.what());
    }
    r.wall_ms = ms_since(t0);
  });
  return out;
}

namespace {

struct TrainRun {
  std::vector<RunRecord> records;
  double final_loss = std::numeric_limits<double>::infinity();
  bool clean = true;
};

TrainRun train_one(const SweepConfig& c, std::uint64_t seed, const std::vector<QuadraticTask>& tasks,
                   const Variant& v, std::optional<double> eta) {
  TrainRun run;
  const std::size_t M = tasks.size();
  const std::size_t B = c.batch_size == 0 ? M : c.batch_size;
  const std::size_t K = c.training_budget;
  HyperParams h = make_hyper(c, v, K);
  const InnerSpec spec = make_spec(c, K);

  Vector theta = initial_theta(c, seed);
  const SmoothnessConstants c0 = compute_constants(tasks, c.lambda, theta, c.trust_radius);
  OuterOptimizer opt = eta ? OuterOptimizer(c.outer_variant, *eta, c.clip, c.beta)
                           : schedule_from_constants(c0, c.outer_variant);

  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 3u};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(M);
  for (std::size_t i = 0; i < M; ++i) order[i] = i;
  std::vector<WarmStart> warm(M);

  const double f0 = family_loss(tasks, theta, c.lambda);
  const double blowup = 1e6 * std::max(std::abs(f0), 1.0);
  for (std::size_t t = 0;; ++t) {
    const auto t0 = Clock::now();
    RunRecord r;
    r.seed = seed;
    r.method = std::string(method_name(v.method));
    r.inner_iters = static_cast<double>(K);
    r.cg_steps = v.cg;
    r.outer_iter = t;
    r.outer_lr = opt.eta();
    r.outer_loss = family_loss(tasks, theta, c.lambda);
    const Vector full = family_grad(tasks, theta, c.lambda);
    r.grad_norm = full.norm();
    r.bias_abs = r.bias_rel = std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(r.outer_loss) || std::abs(r.outer_loss) > blowup) {
      r.error = "diverged";
      run.clean = false;
      run.records.push_back(std::move(r));
      break;
    }
    if (t == c.outer_iters) {
      run.final_loss = r.outer_loss;
      r.wall_ms = ms_since(t0);
      run.records.push_back(std::move(r));
      break;
    }

    if (B < M) std::shuffle(order.begin(), order.end(), rng);
    std::vector<const QuadraticTask*> batch;
    std::vector<WarmStart> wb;
    for (std::size_t i = 0; i < B; ++i) {
      batch.push_back(&tasks[order[i]]);
      wb.push_back(warm[order[i]]);
    }
    h.constants = compute_constants(tasks, c.lambda, theta, c.trust_radius);
    try {
      const GradEstimate e = batch_estimate(batch, theta, h, v.method, spec, c.warm_start ? &wb : nullptr);
      fill_estimate(r, e, B == M ? full : batch_grad(batch, theta, c.lambda));
      if (e.delta_certified) r.delta = *e.delta_certified;
      theta = opt.step(theta, e.g);
    } catch (const std::exception& ex) {
      flag(r, ex.what());
      run.clean = false;
      r.wall_ms = ms_since(t0);
      run.records.push_back(std::move(r));
      break;
    }
    if (c.warm_start)
      for (std::size_t i = 0; i < B; ++i) warm[order[i]] = std::move(wb[i]);
    r.wall_ms = ms_since(t0);
    run.records.push_back(std::move(r));
  }
  return run;
}

}  // namespace

std::vector<QuadraticTask> family_for_seed(const SweepConfig& c, std::uint64_t seed) {
  TaskFamily f = c.family;
  f.seed = seed;
  return sample_family(f);
}

Vector initial_theta(const SweepConfig& c, std::uint64_t seed) {
  return c.theta0_scale > 0.0 ? gaussian(c.family.dim, c.theta0_scale, seed, 2) : Vector::Zero(c.family.dim);
}

std::vector<RunRecord> run_training(const SweepConfig& c, std::size_t jobs) {
  validate_config(c);
  std::vector<std::vector<QuadraticTask>> families;
  for (std::uint64_t s : c.seeds) families.push_back(family_for_seed(c, s));
  const auto variants = expand_variants(c);
  std::vector<std::optional<double>> rates;
  if (c.theory_schedule)
    rates.push_back(std::nullopt);
  else
    for (double e : c.outer_lr_grid) rates.push_back(e);

  const std::size_t nv = variants.size(), nr = rates.size();
  std::vector<TrainRun> runs(c.seeds.size() * nv * nr);
  const auto errors = detail::parallel_for(runs.size(), jobs, [&](std::size_t job) {
    const std::size_t si = job / (nv * nr), vi = (job / nr) % nv, ri = job % nr;
    runs[job] = train_one(c, c.seeds[si], families[si], variants[vi], rates[ri]);
  });
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<RunRecord> out;
  for (std::size_t si = 0; si < c.seeds.size(); ++si) {
    for (std::size_t vi = 0; vi < nv; ++vi) {
      std::size_t best = 0;
      bool found = false;
      for (std::size_t ri = 0; ri < nr; ++ri) {
        const TrainRun& run = runs[(si * nv + vi) * nr + ri];
        if (!run.clean) continue;
        if (!found || run.final_loss < runs[(si * nv + vi) * nr + best].final_loss) {
          best = ri;
          found = true;
        }
      }
      auto& chosen = runs[(si * nv + vi) * nr + best].records;
      out.insert(out.end(), chosen.begin(), chosen.end());
    }
  }
  return out;
}

}  // namespace fobmaml
