#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "fobmaml/errors.hpp"
#include "fobmaml/experiment.hpp"

using namespace fobmaml;

namespace {

const char* kSmall = R"(
family:
  d: 10
  num_tasks: 4
  sigma_max: 0.5
  kappa: 100
lambda: 1.0
methods: [fobmaml_forward, fobmaml_symmetric, fomaml, reptile, imaml_cg, maml_unrolled]
inner:
  grid: [5, 10, 20, 40, 80]
cg_steps_grid: [2, 10]
seeds: [1, 2]
)";

std::string strip_wall(const std::vector<RunRecord>& records) {
  std::ostringstream out;
  write_records(records, out);
  std::istringstream in(out.str());
  std::string line, kept;
  while (std::getline(in, line)) kept += line.substr(0, line.rfind(',')) + "\n";
  return kept;
}

}  // namespace

TEST_CASE("config parsing") {
  const SweepConfig c = parse_config(kSmall);
  CHECK(c.family.dim == 10);
  CHECK(c.family.sigma_min == doctest::Approx(0.005));
  CHECK(c.methods.size() == 6);
  CHECK(c.inner_budget_grid.size() == 5);
  CHECK(c.seeds == std::vector<std::uint64_t>{1, 2});

  const SweepConfig o = parse_config(kSmall, {"family.d=3", "lambda=2.5", "seeds=[7]", "nu.mode=fixed", "nu.value=0.01"});
  CHECK(o.family.dim == 3);
  CHECK(o.lambda == 2.5);
  CHECK(o.seeds == std::vector<std::uint64_t>{7});
  CHECK(o.nu_mode == NuMode::Fixed);
  CHECK(o.nu_value == 0.01);
}

TEST_CASE("config errors name the field") {
  auto message = [](const std::string& text, std::vector<std::string> over = {}) {
    try {
      parse_config(text, over);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  std::string no_lambda = kSmall;
  no_lambda.replace(no_lambda.find("lambda: 1.0"), 11, "");
  CHECK(message(no_lambda).find("'lambda'") != std::string::npos);
  CHECK(message(std::string(kSmall) + "lamda: 2\n").find("lamda") != std::string::npos);
  CHECK(message(kSmall, {"family.dimension=3"}).find("family.dimension") != std::string::npos);
  CHECK(message(kSmall, {"methods=[]"}).find("methods") != std::string::npos);
  CHECK(message(kSmall, {"methods=[sgd]"}).find("sgd") != std::string::npos);
  CHECK(message(kSmall, {"seeds=[]"}).find("seeds") != std::string::npos);
  CHECK(message(kSmall, {"inner.grid=[]"}).find("inner.grid") != std::string::npos);
  CHECK(message(kSmall, {"family.sigma_min=0.1"}).find("kappa") != std::string::npos);
  CHECK(message(kSmall, {"batch_size=9"}).find("batch_size") != std::string::npos);
  CHECK(message(kSmall, {"novalue"}).find("novalue") != std::string::npos);
  CHECK_THROWS_AS(read_config("/nonexistent/config.yaml"), ConfigError);
  try {
    read_config("/nonexistent/config.yaml");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/config.yaml") != std::string::npos);
  }
}

TEST_CASE("effective config echo parses back to the same config") {
  const SweepConfig c = parse_config(kSmall, {"outer.lr_grid=[0.5, 1]", "inner.solver=nesterov", "trust_radius=2"});
  const std::string yaml = config_to_yaml(c, {"a note"});
  const SweepConfig d = parse_config(yaml);
  CHECK(config_to_yaml(d, {"a note"}) == yaml);
  CHECK(d.solver == SolverKind::Nesterov);
  CHECK(d.outer_lr_grid == std::vector<double>{0.5, 1.0});
  CHECK(d.family.sigma_min == c.family.sigma_min);
  CHECK(yaml.find("a note") != std::string::npos);
}

TEST_CASE("records round trip through CSV") {
  std::vector<RunRecord> rs(3);
  rs[0].seed = 18446744073709551615ull;
  rs[0].method = "fobmaml_forward";
  rs[0].inner_iters = 20;
  rs[0].nu = 1.2345678901234567e-5;
  rs[0].bias_abs = 0.1 + 0.2;
  rs[0].bias_rel = 1e-300;
  rs[1].method = "imaml_cg";
  rs[1].cg_steps = 5;
  rs[1].delta = 3e-9;
  rs[1].hvp_evals = 42;
  rs[2].method = "fomaml";
  rs[2].bias_abs = std::nan("");
  rs[2].outer_loss = -INFINITY;
  std::ostringstream out;
  write_records(rs, out);
  CHECK(out.str().rfind(std::string(kCsvHeader) + "\n", 0) == 0);
  CHECK(out.str().find('\r') == std::string::npos);
  std::istringstream in(out.str());
  const auto back = read_records(in);
  REQUIRE(back.size() == 3);
  std::ostringstream again;
  write_records(back, again);
  CHECK(again.str() == out.str());
  CHECK(back[0].seed == rs[0].seed);
  CHECK(back[0].nu == rs[0].nu);
  CHECK(back[0].bias_abs == rs[0].bias_abs);
  CHECK_FALSE(back[0].cg_steps);
  CHECK(back[1].cg_steps == 5u);
  CHECK(std::isnan(back[2].bias_abs));

  std::istringstream bad_header("seed,method\n");
  CHECK_THROWS_AS(read_records(bad_header), IoError);
  std::istringstream short_row(std::string(kCsvHeader) + "\n1,fomaml,3\n");
  CHECK_THROWS_AS(read_records(short_row), IoError);
  CHECK_THROWS_AS(write_records(rs, std::string("/nonexistent/dir/out.csv")), IoError);
}

TEST_CASE("log-log fits") {
  const auto f = fit_loglog_slope({1, 2, 3, 4}, {1, 4, 9, 16});
  CHECK(f.slope == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(f.r2 == doctest::Approx(1.0).epsilon(1e-12));
  const auto g = fit_loglog_slope({1, 2, 3, 4, 5, 6}, {0, 2, 3, -1, 5, 6});
  CHECK(g.filtered == 2);
  CHECK(g.slope == doctest::Approx(1.0));
  CHECK_THROWS_AS(fit_loglog_slope({1, 2, 3, 4}, {1, 2, 3, 0}), FitError);
  CHECK_THROWS_AS(fit_loglog_slope({2, 2, 2, 2}, {1, 2, 3, 4}), FitError);
}

TEST_CASE("bias sweep: linear single task is exact") {
  const SweepConfig c = parse_config(kSmall, {"family.d=1", "family.num_tasks=1", "family.linear=true",
                                              "methods=[fobmaml_forward, fobmaml_symmetric, fomaml]"});
  const auto rs = run_bias_sweep(c, 2);
  CHECK(rs.size() == 3 * 5 * 2);
  for (const auto& r : rs) {
    CHECK(r.error.empty());
    CHECK(r.bias_abs <= 1e-10);
  }
}

TEST_CASE("bias sweep shape, accounting and determinism") {
  const SweepConfig c = parse_config(kSmall);
  const auto rs = run_bias_sweep(c, 4);
  const auto again = run_bias_sweep(c, 1);
  CHECK(strip_wall(rs) == strip_wall(again));

  // grouped by (seed, variant) in grid order
  const std::size_t ng = 5;
  REQUIRE(rs.size() % ng == 0);
  for (std::size_t i = 0; i < rs.size(); i += ng) {
    const RunRecord& head = rs[i];
    std::vector<double> bias;
    for (std::size_t k = 0; k < ng; ++k) {
      const RunRecord& r = rs[i + k];
      CHECK(r.seed == head.seed);
      CHECK(r.method == head.method);
      CHECK(r.inner_iters == c.inner_budget_grid[k]);
      CHECK(r.error.empty());
      CHECK(r.bias_rel == doctest::Approx(r.bias_abs / std::max(r.grad_norm, 1e-30)));
      // every method spends N inner gradients per task, up to one
      const double per_task = static_cast<double>(r.grad_evals) / 4.0;
      CHECK(std::abs(per_task - c.inner_budget_grid[k]) <= 1.0);
      if (r.method == "fobmaml_forward" || r.method == "fobmaml_symmetric" || r.method == "fomaml" ||
          r.method == "reptile")
        CHECK(r.hvp_evals == 0);
      bias.push_back(r.bias_abs);
    }
    if (head.method.rfind("fobmaml", 0) == 0)
      for (std::size_t k = 1; k < ng; ++k) CHECK(bias[k] < bias[k - 1]);
    if (head.method == "fomaml" || head.method == "reptile")
      for (std::size_t k = 3; k < ng; ++k) CHECK(std::abs(bias[k] - bias[2]) <= 0.1 * bias[2]);
    if (head.method == "imaml_cg" && head.cg_steps == 10u) CHECK(bias[ng - 1] <= 1e-6);
  }
}

TEST_CASE("delta axis records certified precisions") {
  const SweepConfig c = parse_config(kSmall, {"inner.axis=delta", "inner.grid=[1e-4, 1e-6, 1e-8]",
                                              "methods=[fobmaml_forward, fobmaml_symmetric]", "inner.solver=nesterov"});
  const auto rs = run_bias_sweep(c);
  for (const auto& r : rs) {
    CHECK(r.error.empty());
    CHECK(r.delta.has_value());
    CHECK(r.inner_iters.has_value());
    CHECK(r.nu.has_value());
  }
}

TEST_CASE("estimator failures become flagged records") {
  // the symmetric solve at −ν loses strong convexity for this fixed ν
  const SweepConfig c = parse_config(kSmall, {"nu.mode=fixed", "nu.value=5", "methods=[fobmaml_symmetric, fomaml]"});
  const auto rs = run_bias_sweep(c);
  std::size_t flagged = 0;
  for (const auto& r : rs) {
    if (r.method == "fobmaml_symmetric") {
      CHECK_FALSE(r.error.empty());
      CHECK(std::isnan(r.bias_abs));
      ++flagged;
    } else {
      CHECK(r.error.empty());
    }
  }
  CHECK(flagged == 10);
}

TEST_CASE("training with exact gradients and the theory schedule descends") {
  const SweepConfig c = parse_config(kSmall, {"methods=[exact]", "outer.schedule=theory", "outer.iters=40",
                                              "outer.theta0_scale=1"});
  const auto rs = run_training(c);
  CHECK(rs.size() == 2 * 41);
  for (std::size_t i = 1; i < rs.size(); ++i)
    if (rs[i].outer_iter > 0) CHECK(rs[i].outer_loss <= rs[i - 1].outer_loss);
}

TEST_CASE("training picks the best rate and flags divergence") {
  const SweepConfig c = parse_config(kSmall, {"methods=[fomaml]", "outer.lr_grid=[0.5, 2, 1e5]", "outer.iters=20",
                                              "seeds=[3]"});
  const auto rs = run_training(c);
  REQUIRE(rs.size() == 21);
  CHECK(*rs.back().outer_lr == 2.0);
  for (const auto& r : rs) CHECK(r.error.empty());

  const SweepConfig d = parse_config(kSmall, {"methods=[fomaml]", "outer.lr_grid=[1e5]", "outer.iters=20", "seeds=[3]"});
  const auto bad = run_training(d);
  CHECK(bad.size() < 21);
  CHECK(bad.back().error == "diverged");
}

TEST_CASE("training is deterministic with shuffled batches") {
  const SweepConfig c = parse_config(kSmall, {"batch_size=2", "methods=[fobmaml_symmetric, imaml_cg]", "outer.iters=10",
                                              "outer.lr_grid=[1, 3]"});
  CHECK(strip_wall(run_training(c, 4)) == strip_wall(run_training(c, 1)));
}

TEST_CASE("smoothness probe on a quadratic family") {
  TaskFamily f;
  f.dim = 10;
  f.num_tasks = 4;
  f.sigma_min = 0.01;
  f.sigma_max = 0.5;
  const auto tasks = sample_family(f);
  const auto rep = smoothness_probe(tasks, 1.0, 100, 2.0, Vector::Zero(10), 7);
  CHECK(rep.pairs == 100);
  CHECK(rep.max_ratio <= 1.0);
  CHECK(rep.max_ratio > 0.0);
  CHECK(rep.max_local_lipschitz <= 4.0 * rep.constants.cal_L0() * (1 + 1e-6));
  CHECK(rep.constants.cal_L1() == 0.0);
  const auto none = smoothness_probe(tasks, 1.0, 0, 2.0, Vector::Zero(10), 7);
  CHECK(none.max_ratio == 0.0);
}

TEST_CASE("smoothness probe on the nonquadratic family") {
  TaskFamily f;
  f.dim = 10;
  f.num_tasks = 4;
  f.sigma_min = 0.01;
  f.sigma_max = 0.1;
  f.ramp_weight = 1.0;
  f.b_scale = 0.1;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    f.seed = seed;
    const auto tasks = sample_family(f);
    const auto rep = smoothness_probe(tasks, 2.2, 60, 2.0, Vector::Zero(10), seed);
    CHECK(rep.constants.cal_L1() > 0.0);
    CHECK(rep.max_ratio <= 1.0);
    CHECK(rep.lipschitz_slope > 0.0);
  }
}

TEST_CASE("gradient check suite") {
  const SweepConfig c = parse_config(kSmall);
  for (const auto& r : run_gradient_checks(c)) CHECK_MESSAGE(r.passed, r.name << ": " << r.detail);

  const auto faulty = run_gradient_checks(c, Fault::FlipMetaGradSign);
  bool fd_failed = false;
  for (const auto& r : faulty)
    if (r.name == "fd_meta_grad") fd_failed = !r.passed;
  CHECK(fd_failed);

  const SweepConfig s = parse_config(kSmall, {"family.d=1", "family.num_tasks=1", "family.kappa=1"});
  std::string report;
  for (const auto& r : run_gradient_checks(s, Fault::None, &report)) CHECK_MESSAGE(r.passed, r.name << ": " << r.detail);
  CHECK(report.find("exact meta-gradient") != std::string::npos);
  CHECK(report.find("fobmaml_symmetric") != std::string::npos);
}
