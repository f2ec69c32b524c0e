#include <algorithm>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "fobmaml/errors.hpp"
#include "fobmaml/experiment.hpp"

namespace fobmaml {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  return parts;
}

void set_path(YAML::Node node, const std::vector<std::string>& keys, std::size_t i, const YAML::Node& value) {
  if (i + 1 == keys.size()) {
    node[keys[i]] = value;
    return;
  }
  if (!node[keys[i]].IsMap()) node[keys[i]] = YAML::Node(YAML::NodeType::Map);
  set_path(node[keys[i]], keys, i + 1, value);
}

void apply_override(YAML::Node& root, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(fmt::format("override '{}' is not key=value", kv));
  const auto keys = split(kv.substr(0, eq), '.');
  if (std::any_of(keys.begin(), keys.end(), [](const std::string& k) { return k.empty(); }))
    throw ConfigError(fmt::format("override '{}' has an empty key segment", kv));
  YAML::Node value;
  try {
    value = YAML::Load(kv.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw ConfigError(fmt::format("override '{}': {}", kv, e.what()));
  }
  if (!root.IsMap()) root = YAML::Node(YAML::NodeType::Map);
  set_path(root, keys, 0, value);
}

void check_keys(const YAML::Node& map, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!map.IsMap()) throw ConfigError(fmt::format("'{}' must be a mapping", where));
  for (const auto& kv : map) {
    const auto key = kv.first.as<std::string>();
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(fmt::format("unknown config key '{}{}'", where.empty() ? "" : where + ".", key));
  }
}

std::string join(const std::string& where, const char* key) { return where.empty() ? key : where + "." + key; }

template <class T>
T as(const YAML::Node& n, const std::string& path) {
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(fmt::format("config field '{}' has an invalid value", path));
  }
}

template <class T>
void read(const YAML::Node& map, const char* key, const std::string& where, T& out) {
  if (const auto n = map[key]; n) out = as<T>(n, join(where, key));
}

template <class T>
void read_list(const YAML::Node& map, const char* key, const std::string& where, std::vector<T>& out) {
  const auto n = map[key];
  if (!n) return;
  const auto path = join(where, key);
  if (!n.IsSequence()) throw ConfigError(fmt::format("config field '{}' must be a list", path));
  out.clear();
  for (const auto& item : n) out.push_back(as<T>(item, path));
}

YAML::Node require(const YAML::Node& map, const char* key) {
  const auto n = map[key];
  if (!n) throw ConfigError(fmt::format("config is missing required field '{}'", key));
  return n;
}

SweepConfig from_yaml(const YAML::Node& root) {
  check_keys(root,
             {"family", "lambda", "batch_size", "methods", "inner", "nu", "cg_steps_grid", "outer", "epsilon",
              "seeds", "theta_scale", "trust_radius", "output", "metadata"},
             "");
  SweepConfig c;

  const auto fam = require(root, "family");
  check_keys(fam,
             {"d", "num_tasks", "sigma_min", "sigma_max", "kappa", "allow_negative_eigs", "linear", "b_scale",
              "ramp_weight", "test_noise", "seed"},
             "family");
  read(fam, "d", "family", c.family.dim);
  read(fam, "num_tasks", "family", c.family.num_tasks);
  read(fam, "sigma_max", "family", c.family.sigma_max);
  read(fam, "sigma_min", "family", c.family.sigma_min);
  if (fam["kappa"]) {
    if (fam["sigma_min"]) throw ConfigError("config sets both 'family.kappa' and 'family.sigma_min'");
    const double kappa = as<double>(fam["kappa"], "family.kappa");
    if (!(kappa >= 1.0)) throw ConfigError("config field 'family.kappa' must be >= 1");
    c.family.sigma_min = c.family.sigma_max / kappa;
  }
  read(fam, "allow_negative_eigs", "family", c.family.allow_negative_eigs);
  read(fam, "linear", "family", c.family.linear);
  read(fam, "b_scale", "family", c.family.b_scale);
  read(fam, "ramp_weight", "family", c.family.ramp_weight);
  read(fam, "test_noise", "family", c.family.test_noise);
  read(fam, "seed", "family", c.family.seed);

  c.lambda = as<double>(require(root, "lambda"), "lambda");
  read(root, "batch_size", "", c.batch_size);

  const auto methods = require(root, "methods");
  if (!methods.IsSequence()) throw ConfigError("config field 'methods' must be a list");
  for (const auto& m : methods) c.methods.push_back(parse_method(as<std::string>(m, "methods")));

  c.inner_budget_grid = {5, 10, 20, 40, 80};
  if (const auto inner = root["inner"]; inner) {
    check_keys(inner, {"solver", "axis", "grid", "max_iters", "step_size", "steps", "reptile_horizon"}, "inner");
    if (inner["solver"]) {
      const auto s = as<std::string>(inner["solver"], "inner.solver");
      if (s == "gd")
        c.solver = SolverKind::GradientDescent;
      else if (s == "nesterov")
        c.solver = SolverKind::Nesterov;
      else
        throw ConfigError(fmt::format("config field 'inner.solver' must be gd or nesterov, got '{}'", s));
    }
    if (inner["axis"]) {
      const auto a = as<std::string>(inner["axis"], "inner.axis");
      if (a == "iterations")
        c.axis = BudgetAxis::Iterations;
      else if (a == "delta")
        c.axis = BudgetAxis::Delta;
      else
        throw ConfigError(fmt::format("config field 'inner.axis' must be iterations or delta, got '{}'", a));
    }
    read_list(inner, "grid", "inner", c.inner_budget_grid);
    read(inner, "max_iters", "inner", c.max_inner_iters);
    if (inner["step_size"]) c.inner_step_size = as<double>(inner["step_size"], "inner.step_size");
    read(inner, "steps", "inner", c.inner_steps);
    if (inner["reptile_horizon"]) c.reptile_horizon = as<double>(inner["reptile_horizon"], "inner.reptile_horizon");
  }

  if (const auto nu = root["nu"]; nu) {
    check_keys(nu, {"mode", "value", "grid", "min"}, "nu");
    if (nu["mode"]) {
      const auto m = as<std::string>(nu["mode"], "nu.mode");
      if (m == "auto")
        c.nu_mode = NuMode::Auto;
      else if (m == "fixed")
        c.nu_mode = NuMode::Fixed;
      else if (m == "grid")
        c.nu_mode = NuMode::Grid;
      else
        throw ConfigError(fmt::format("config field 'nu.mode' must be auto, fixed or grid, got '{}'", m));
    }
    read(nu, "value", "nu", c.nu_value);
    read_list(nu, "grid", "nu", c.nu_grid);
    read(nu, "min", "nu", c.nu_min);
  }
  read_list(root, "cg_steps_grid", "", c.cg_steps_grid);

  if (const auto outer = root["outer"]; outer) {
    check_keys(outer, {"optimizer", "schedule", "lr_grid", "clip", "beta", "iters", "budget", "warm_start", "theta0_scale"},
               "outer");
    if (outer["optimizer"]) c.outer_variant = parse_variant(as<std::string>(outer["optimizer"], "outer.optimizer"));
    if (outer["schedule"]) {
      const auto s = as<std::string>(outer["schedule"], "outer.schedule");
      if (s != "grid" && s != "theory")
        throw ConfigError(fmt::format("config field 'outer.schedule' must be grid or theory, got '{}'", s));
      c.theory_schedule = s == "theory";
    }
    read_list(outer, "lr_grid", "outer", c.outer_lr_grid);
    read(outer, "clip", "outer", c.clip);
    read(outer, "beta", "outer", c.beta);
    read(outer, "iters", "outer", c.outer_iters);
    read(outer, "budget", "outer", c.training_budget);
    read(outer, "warm_start", "outer", c.warm_start);
    read(outer, "theta0_scale", "outer", c.theta0_scale);
  }

  read(root, "epsilon", "", c.epsilon);
  read_list(root, "seeds", "", c.seeds);
  if (!root["seeds"]) throw ConfigError("config is missing required field 'seeds'");
  read(root, "theta_scale", "", c.theta_scale);
  read(root, "trust_radius", "", c.trust_radius);
  read(root, "output", "", c.output_path);
  validate_config(c);
  return c;
}

SweepConfig parse_node(YAML::Node root, const std::vector<std::string>& overrides) {
  if (!root || root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  for (const auto& kv : overrides) apply_override(root, kv);
  return from_yaml(root);
}

std::string num(double v) { return fmt::format("{}", v); }

}  // namespace

void validate_config(const SweepConfig& c) {
  validate_family(c.family);
  if (!(c.lambda > 0.0) || !std::isfinite(c.lambda)) throw ConfigError("config field 'lambda' must be positive");
  if (c.methods.empty()) throw ConfigError("config field 'methods' must list at least one method");
  if (c.seeds.empty()) throw ConfigError("config field 'seeds' must not be empty");
  if (c.inner_budget_grid.empty()) throw ConfigError("config field 'inner.grid' must not be empty");
  for (double v : c.inner_budget_grid) {
    if (c.axis == BudgetAxis::Iterations && !(v >= 1.0 && v == std::floor(v)))
      throw ConfigError(fmt::format("config field 'inner.grid' needs positive integers on the iterations axis, got {}", v));
    if (c.axis == BudgetAxis::Delta && !(v > 0.0))
      throw ConfigError(fmt::format("config field 'inner.grid' needs positive deltas, got {}", v));
  }
  if (c.batch_size > c.family.num_tasks)
    throw ConfigError(fmt::format("config field 'batch_size' ({}) exceeds family.num_tasks ({})", c.batch_size,
                                  c.family.num_tasks));
  if (c.nu_mode == NuMode::Grid && c.nu_grid.empty()) throw ConfigError("config field 'nu.grid' must not be empty");
  if (c.nu_mode == NuMode::Fixed && c.nu_value == 0.0) throw ConfigError("config field 'nu.value' must be nonzero");
  if (!(c.nu_min > 0.0)) throw ConfigError("config field 'nu.min' must be positive");
  if (std::find(c.methods.begin(), c.methods.end(), Method::ImamlCg) != c.methods.end() && c.cg_steps_grid.empty())
    throw ConfigError("config field 'cg_steps_grid' must not be empty when imaml_cg is requested");
  if (!c.theory_schedule && c.outer_lr_grid.empty()) throw ConfigError("config field 'outer.lr_grid' must not be empty");
  for (double v : c.outer_lr_grid)
    if (!(v > 0.0)) throw ConfigError("config field 'outer.lr_grid' needs positive rates");
  if (c.training_budget < 2) throw ConfigError("config field 'outer.budget' must be at least 2");
  if (c.inner_steps < 1) throw ConfigError("config field 'inner.steps' must be at least 1");
  if (c.reptile_horizon && !(*c.reptile_horizon > 0.0))
    throw ConfigError("config field 'inner.reptile_horizon' must be positive");
  if (c.inner_step_size && !(*c.inner_step_size > 0.0))
    throw ConfigError("config field 'inner.step_size' must be positive");
  if (!(c.epsilon > 0.0)) throw ConfigError("config field 'epsilon' must be positive");
  if (!(c.trust_radius >= 0.0)) throw ConfigError("config field 'trust_radius' must be nonnegative");
  if (!(c.theta_scale >= 0.0)) throw ConfigError("config field 'theta_scale' must be nonnegative");
}

SweepConfig parse_config(const std::string& text, const std::vector<std::string>& overrides) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(fmt::format("config is not valid YAML: {}", e.what()));
  }
  return parse_node(root, overrides);
}

SweepConfig read_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config file '{}'", path));
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), overrides);
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
}

std::string config_to_yaml(const SweepConfig& c, const std::vector<std::string>& notes) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "family" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "d" << YAML::Value << c.family.dim;
  out << YAML::Key << "num_tasks" << YAML::Value << c.family.num_tasks;
  out << YAML::Key << "sigma_min" << YAML::Value << num(c.family.sigma_min);
  out << YAML::Key << "sigma_max" << YAML::Value << num(c.family.sigma_max);
  out << YAML::Key << "allow_negative_eigs" << YAML::Value << c.family.allow_negative_eigs;
  out << YAML::Key << "linear" << YAML::Value << c.family.linear;
  out << YAML::Key << "b_scale" << YAML::Value << num(c.family.b_scale);
  out << YAML::Key << "ramp_weight" << YAML::Value << num(c.family.ramp_weight);
  out << YAML::Key << "test_noise" << YAML::Value << num(c.family.test_noise);
  out << YAML::Key << "seed" << YAML::Value << c.family.seed;
  out << YAML::EndMap;
  out << YAML::Key << "lambda" << YAML::Value << num(c.lambda);
  out << YAML::Key << "batch_size" << YAML::Value << c.batch_size;
  out << YAML::Key << "methods" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (auto m : c.methods) out << std::string(method_name(m));
  out << YAML::EndSeq;

  out << YAML::Key << "inner" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "solver" << YAML::Value << (c.solver == SolverKind::GradientDescent ? "gd" : "nesterov");
  out << YAML::Key << "axis" << YAML::Value << (c.axis == BudgetAxis::Iterations ? "iterations" : "delta");
  out << YAML::Key << "grid" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (double v : c.inner_budget_grid) out << num(v);
  out << YAML::EndSeq;
  out << YAML::Key << "max_iters" << YAML::Value << c.max_inner_iters;
  if (c.inner_step_size) out << YAML::Key << "step_size" << YAML::Value << num(*c.inner_step_size);
  out << YAML::Key << "steps" << YAML::Value << c.inner_steps;
  if (c.reptile_horizon) out << YAML::Key << "reptile_horizon" << YAML::Value << num(*c.reptile_horizon);
  out << YAML::EndMap;

  out << YAML::Key << "nu" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "mode" << YAML::Value
      << (c.nu_mode == NuMode::Auto ? "auto" : c.nu_mode == NuMode::Fixed ? "fixed" : "grid");
  out << YAML::Key << "value" << YAML::Value << num(c.nu_value);
  out << YAML::Key << "grid" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (double v : c.nu_grid) out << num(v);
  out << YAML::EndSeq;
  out << YAML::Key << "min" << YAML::Value << num(c.nu_min);
  out << YAML::EndMap;

  out << YAML::Key << "cg_steps_grid" << YAML::Value << YAML::Flow << c.cg_steps_grid;

  out << YAML::Key << "outer" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "optimizer" << YAML::Value << std::string(variant_name(c.outer_variant));
  out << YAML::Key << "schedule" << YAML::Value << (c.theory_schedule ? "theory" : "grid");
  out << YAML::Key << "lr_grid" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (double v : c.outer_lr_grid) out << num(v);
  out << YAML::EndSeq;
  out << YAML::Key << "clip" << YAML::Value << num(c.clip);
  out << YAML::Key << "beta" << YAML::Value << num(c.beta);
  out << YAML::Key << "iters" << YAML::Value << c.outer_iters;
  out << YAML::Key << "budget" << YAML::Value << c.training_budget;
  out << YAML::Key << "warm_start" << YAML::Value << c.warm_start;
  out << YAML::Key << "theta0_scale" << YAML::Value << num(c.theta0_scale);
  out << YAML::EndMap;

  out << YAML::Key << "epsilon" << YAML::Value << num(c.epsilon);
  out << YAML::Key << "seeds" << YAML::Value << YAML::Flow << c.seeds;
  out << YAML::Key << "theta_scale" << YAML::Value << num(c.theta_scale);
  out << YAML::Key << "trust_radius" << YAML::Value << num(c.trust_radius);
  out << YAML::Key << "output" << YAML::Value << c.output_path;
  if (!notes.empty()) {
    out << YAML::Key << "metadata" << YAML::Value << YAML::BeginSeq;
    for (const auto& n : notes) out << n;
    out << YAML::EndSeq;
  }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace fobmaml
