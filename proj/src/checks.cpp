#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <fmt/format.h>

#include "fobmaml/errors.hpp"
#include "fobmaml/experiment.hpp"

namespace fobmaml {

namespace {

struct GradInfo {
  Vector g;
  double mean_task_norm = 0.0;
};

GradInfo grad_info(const std::vector<QuadraticTask>& tasks, const Vector& theta, double lambda) {
  GradInfo gi;
  gi.g = Vector::Zero(theta.size());
  for (const auto& t : tasks) {
    const Vector gt = reference_meta_grad(t, theta, lambda);
    gi.g += gt;
    gi.mean_task_norm += gt.norm();
  }
  gi.g /= static_cast<double>(tasks.size());
  gi.mean_task_norm /= static_cast<double>(tasks.size());
  return gi;
}

Vector unit(std::mt19937_64& rng, Eigen::Index d) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector u(d);
  for (Eigen::Index k = 0; k < d; ++k) u(k) = normal(rng);
  return u / u.norm();
}

// Spectral norm of the symmetrized central-difference Hessian of F.
double local_lipschitz(const std::vector<QuadraticTask>& tasks, const Vector& theta, double lambda, double eps) {
  const Eigen::Index d = theta.size();
  Matrix H(d, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    Vector e = Vector::Zero(d);
    e(k) = eps;
    H.col(k) = (family_grad(tasks, theta + e, lambda) - family_grad(tasks, theta - e, lambda)) / (2.0 * eps);
  }
  const Matrix S = 0.5 * (H + H.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(S, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace

ProbeReport smoothness_probe(const std::vector<QuadraticTask>& tasks, double lambda, std::size_t n_pairs,
                             double ball_radius, const Vector& center, std::uint64_t seed) {
  if (tasks.empty()) throw ContractViolation("smoothness_probe needs tasks");
  ProbeReport rep;
  rep.constants = compute_constants(tasks, lambda, center, ball_radius);
  double neg = 0.0;
  for (const auto& t : tasks) neg = std::max(neg, -t.train_eig_min());
  if (!(lambda > neg)) throw ParameterError("smoothness_probe needs a strongly convex inner problem");
  const double amp = std::pow(lambda / (lambda - neg), 2);
  const auto& c = rep.constants;
  auto modulus = [&](const GradInfo& gi) { return amp * (c.L1 + c.hat_L2 * gi.mean_task_norm / lambda); };
  auto literal = [&](const GradInfo& gi) { return c.cal_L0() + c.cal_L1() * gi.g.norm(); };

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Eigen::Index d = center.size();
  std::vector<double> gnorms, lips;
  for (std::size_t p = 0; p < n_pairs; ++p) {
    const Vector a = center + 0.9 * ball_radius * unif(rng) * unit(rng, d);
    const Vector b = a + 0.1 * ball_radius * unif(rng) * unit(rng, d);
    const GradInfo ga = grad_info(tasks, a, lambda), gb = grad_info(tasks, b, lambda);
    const double dist = (a - b).norm();
    ++rep.pairs;
    if (dist == 0.0) continue;
    const double diff = (ga.g - gb.g).norm();
    rep.max_ratio = std::max(rep.max_ratio, diff / (std::min(modulus(ga), modulus(gb)) * dist));
    rep.max_ratio_literal = std::max(rep.max_ratio_literal, diff / (std::min(literal(ga), literal(gb)) * dist));
    const double lip = local_lipschitz(tasks, a, lambda, 1e-4);
    rep.max_local_lipschitz = std::max(rep.max_local_lipschitz, lip);
    gnorms.push_back(ga.g.norm());
    lips.push_back(lip);
  }
  if (gnorms.size() >= 2) {
    const double n = static_cast<double>(gnorms.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < gnorms.size(); ++i) {
      mx += gnorms[i];
      my += lips[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < gnorms.size(); ++i) {
      sxx += (gnorms[i] - mx) * (gnorms[i] - mx);
      sxy += (gnorms[i] - mx) * (lips[i] - my);
    }
    rep.lipschitz_slope = sxx > 0.0 ? sxy / sxx : 0.0;
    rep.lipschitz_intercept = my - rep.lipschitz_slope * mx;
  }
  return rep;
}

namespace {

Vector meta_grad_under(Fault fault, const QuadraticTask& t, const Vector& theta, double lambda) {
  Vector g = reference_meta_grad(t, theta, lambda);
  if (fault == Fault::FlipMetaGradSign) g = -g;
  return g;
}

std::vector<double> nu_grid() {
  std::vector<double> v;
  for (int i = 0; i < 7; ++i) v.push_back(std::pow(10.0, -1.0 - 0.5 * i));
  return v;
}

CheckResult order_check(const char* name, bool sym, double expected, const std::vector<QuadraticTask>& tasks,
                        const Vector& theta, double lambda, Fault fault) {
  CheckResult r{name, false, ""};
  Vector exact = Vector::Zero(theta.size());
  for (const auto& t : tasks) exact += meta_grad_under(fault, t, theta, lambda);
  exact /= static_cast<double>(tasks.size());
  std::vector<double> nus = nu_grid(), bias;
  for (double nu : nus) {
    Vector g = Vector::Zero(theta.size());
    for (const auto& t : tasks) {
      const Vector plus = reference_phi(t, theta, lambda, nu);
      g += sym ? symmetric_difference(plus, reference_phi(t, theta, lambda, -nu), nu, lambda)
               : forward_difference(plus, reference_phi(t, theta, lambda, 0.0), nu, lambda);
    }
    g /= static_cast<double>(tasks.size());
    bias.push_back((g - exact).norm());
  }
  const double top = *std::max_element(bias.begin(), bias.end());
  if (top <= 1e-12 * std::max(exact.norm(), 1.0)) {
    r.passed = true;
    r.detail = fmt::format("bias vanishes (max {:.3g}), nothing to fit", top);
    return r;
  }
  try {
    const SlopeFit fit = fit_loglog_slope(nus, bias);
    r.passed = std::abs(fit.slope - expected) <= 0.2;
    r.detail = fmt::format("slope {:.4f} (expected {:.1f} +- 0.2), r2 {:.4f}", fit.slope, expected, fit.r2);
  } catch (const FitError& e) {
    r.detail = e.what();
  }
  return r;
}

}  // namespace

std::vector<CheckResult> run_gradient_checks(const SweepConfig& config, Fault fault, std::string* scalar_report) {
  validate_config(config);
  TaskFamily fam = config.family;
  fam.seed = config.seeds.front();
  const auto tasks = sample_family(fam);
  const double lambda = config.lambda;
  const bool quadratic = tasks.front().is_quadratic();
  std::seed_seq seq{static_cast<std::uint32_t>(fam.seed), 4u};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw_theta = [&] {
    Vector th(static_cast<Eigen::Index>(fam.dim));
    for (Eigen::Index k = 0; k < th.size(); ++k) th(k) = config.theta_scale * normal(rng);
    return th;
  };

  std::vector<CheckResult> out;
  constexpr std::size_t kProbes = 100;
  const double h = 1e-5;

  {
    CheckResult r{"fd_meta_grad", true, ""};
    double worst = 0.0;
    for (std::size_t p = 0; p < kProbes; ++p) {
      const auto& t = tasks[p % tasks.size()];
      const Vector th = draw_theta();
      const Vector g = meta_grad_under(fault, t, th, lambda);
      Vector fd(th.size());
      for (Eigen::Index k = 0; k < th.size(); ++k) {
        Vector up = th, dn = th;
        up(k) += h;
        dn(k) -= h;
        fd(k) = (reference_meta_loss(t, up, lambda) - reference_meta_loss(t, dn, lambda)) / (2.0 * h);
      }
      const double scale = std::max(fd.norm(), 1e-12);
      worst = std::max(worst, (fd - g).norm() / scale);
    }
    r.passed = worst <= 1e-5;
    r.detail = fmt::format("{} probes, worst relative error {:.3g} (limit 1e-5)", kProbes, worst);
    out.push_back(r);
  }

  if (quadratic) {
    CheckResult r{"two_forms", true, ""};
    double worst = 0.0;
    for (std::size_t p = 0; p < kProbes; ++p) {
      const auto& t = tasks[p % tasks.size()];
      const Vector th = draw_theta();
      const Vector a = meta_grad_under(fault, t, th, lambda);
      const Vector b = implicit_meta_grad(t, closed_form_phi(t, th, lambda, 0.0), lambda);
      worst = std::max(worst, (a - b).norm() / std::max(b.norm(), 1e-300));
    }
    r.passed = worst <= 1e-10;
    r.detail = fmt::format("worst relative gap {:.3g} (limit 1e-10)", worst);
    out.push_back(r);

    CheckResult s{"stationarity", true, ""};
    double ratio = 0.0;
    for (std::size_t p = 0; p < kProbes; ++p) {
      const auto& t = tasks[p % tasks.size()];
      const Vector th = draw_theta();
      for (double nu : {0.0, 0.1, -0.1}) {
        const Vector phi = closed_form_phi(t, th, lambda, nu);
        const Vector res = nu * detail::test_grad_raw(t, phi) + detail::train_grad_raw(t, phi) + lambda * (phi - th);
        ratio = std::max(ratio, res.norm() / (1e-10 * (1.0 + th.norm())));
      }
    }
    s.passed = ratio <= 1.0;
    s.detail = fmt::format("worst residual {:.3g} of the allowed 1e-10(1+|theta|)", ratio);
    out.push_back(s);
  }

  const std::size_t B = config.batch_size == 0 ? tasks.size() : config.batch_size;
  const std::vector<QuadraticTask> batch(tasks.begin(), tasks.begin() + static_cast<std::ptrdiff_t>(B));
  const Vector th = draw_theta();
  out.push_back(order_check("forward_order", false, 1.0, batch, th, lambda, fault));
  out.push_back(order_check("symmetric_order", true, 2.0, batch, th, lambda, fault));

  if (scalar_report && fam.dim == 1 && tasks.size() == 1) {
    const auto& t = tasks.front();
    const Vector x = Vector::Constant(1, 1.0);
    HyperParams hp;
    hp.lambda = lambda;
    hp.delta = 1e-14;
    hp.nu = 1e-2;
    hp.inner_steps = 1;
    hp.inner_lr = 1.0 / lambda;
    InnerSpec spec;
    const auto exact = meta_grad_under(fault, t, x, lambda);
    std::string s = fmt::format("A = {:.6g}, b = {:.6g}, lambda = {:.6g}, theta = 1\n", t.A()(0, 0), t.b()(0), lambda);
    s += fmt::format("  phi*(theta)          {:.12g}\n", reference_phi(t, x, lambda, 0.0)(0));
    s += fmt::format("  exact meta-gradient  {:.12g}\n", exact(0));
    auto line = [&](const char* name, const GradEstimate& e) {
      s += fmt::format("  {:<20} {:.12g}  (error {:.3g})\n", name, e.g(0), std::abs(e.g(0) - exact(0)));
    };
    line("fobmaml_forward", est_fobmaml_forward(t, x, hp, spec));
    line("fobmaml_symmetric", est_fobmaml_symmetric(t, x, hp, spec));
    line("fomaml", est_fomaml(t, x, hp, spec));
    line("reptile (K=1)", est_reptile(t, x, hp));
    line("maml (K=1)", est_maml_unrolled(t, x, hp));
    line("imaml_cg (cg=1)", est_imaml(t, x, hp, spec, 1));
    *scalar_report = s;
  }
  return out;
}

}  // namespace fobmaml
