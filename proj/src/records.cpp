#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <fmt/format.h>

#include "fobmaml/errors.hpp"
#include "fobmaml/experiment.hpp"

namespace fobmaml {

namespace {

std::string cell(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); }

std::string cell(const std::optional<std::size_t>& v) { return v ? fmt::format("{}", *v) : std::string(); }

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, std::size_t line, const char* col) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError(fmt::format("line {}: column {} is not a number: '{}'", line, col, s));
  }
}

std::size_t parse_count(const std::string& s, std::size_t line, const char* col) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw IoError(fmt::format("line {}: column {} is not a count: '{}'", line, col, s));
  }
}

}  // namespace

void write_records(const std::vector<RunRecord>& records, std::ostream& out) {
  out << kCsvHeader << '\n';
  for (const auto& r : records) {
    out << fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", r.seed, r.method, cell(r.inner_iters),
                       cell(r.delta), cell(r.nu), cell(r.cg_steps), r.outer_iter, r.bias_abs, r.bias_rel,
                       r.outer_loss, r.grad_norm, r.grad_evals, r.hvp_evals, r.wall_ms);
  }
  if (!out) throw IoError("failed while writing records");
}

void write_records(const std::vector<RunRecord>& records, const std::string& path) {
  if (path == "-") {
    write_records(records, std::cout);
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path));
  write_records(records, out);
  out.close();
  if (!out) throw IoError(fmt::format("failed while writing '{}'", path));
}

std::vector<RunRecord> read_records(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty record file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader) throw IoError("unexpected CSV header");
  std::vector<RunRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 14) throw IoError(fmt::format("line {}: expected 14 fields, got {}", lineno, f.size()));
    RunRecord r;
    r.seed = parse_count(f[0], lineno, "seed");
    r.method = f[1];
    if (!f[2].empty()) r.inner_iters = parse_double(f[2], lineno, "inner_iters");
    if (!f[3].empty()) r.delta = parse_double(f[3], lineno, "delta");
    if (!f[4].empty()) r.nu = parse_double(f[4], lineno, "nu");
    if (!f[5].empty()) r.cg_steps = parse_count(f[5], lineno, "cg_steps");
    r.outer_iter = parse_count(f[6], lineno, "outer_iter");
    r.bias_abs = parse_double(f[7], lineno, "bias_abs");
    r.bias_rel = parse_double(f[8], lineno, "bias_rel");
    r.outer_loss = parse_double(f[9], lineno, "outer_loss");
    r.grad_norm = parse_double(f[10], lineno, "grad_norm");
    r.grad_evals = parse_count(f[11], lineno, "grad_evals");
    r.hvp_evals = parse_count(f[12], lineno, "hvp_evals");
    r.wall_ms = parse_double(f[13], lineno, "wall_ms");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<RunRecord> read_records(const std::string& path) {
  if (path == "-") return read_records(std::cin);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path));
  return read_records(in);
}

std::optional<double> record_field(const RunRecord& r, std::string_view field) {
  auto d = [](std::size_t v) { return std::optional<double>(static_cast<double>(v)); };
  if (field == "seed") return d(r.seed);
  if (field == "inner_iters") return r.inner_iters;
  if (field == "delta") return r.delta;
  if (field == "nu") return r.nu;
  if (field == "cg_steps") return r.cg_steps ? d(*r.cg_steps) : std::nullopt;
  if (field == "outer_iter") return d(r.outer_iter);
  if (field == "bias_abs") return r.bias_abs;
  if (field == "bias_rel") return r.bias_rel;
  if (field == "outer_loss") return r.outer_loss;
  if (field == "grad_norm") return r.grad_norm;
  if (field == "grad_evals") return d(r.grad_evals);
  if (field == "hvp_evals") return d(r.hvp_evals);
  if (field == "wall_ms") return r.wall_ms;
  throw ContractViolation(fmt::format("unknown record field '{}'", field));
}

SlopeFit fit_loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractViolation("fit_loglog_slope needs equally long inputs");
  std::vector<double> lx, ly;
  SlopeFit fit;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0 && y[i] > 0.0 && std::isfinite(x[i]) && std::isfinite(y[i])) {
      lx.push_back(std::log10(x[i]));
      ly.push_back(std::log10(y[i]));
    } else {
      ++fit.filtered;
    }
  }
  fit.used = lx.size();
  if (fit.used < 4)
    throw FitError(fmt::format("log-log fit needs at least 4 positive points, {} left after filtering", fit.used));
  const double n = static_cast<double>(fit.used);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (sxx == 0.0) throw FitError("log-log fit needs at least two distinct x values");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.r2 = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return fit;
}

SlopeFit fit_loglog_slope(const std::vector<RunRecord>& records, std::string_view x_field, std::string_view y_field) {
  std::vector<double> x, y;
  std::size_t missing = 0;
  for (const auto& r : records) {
    const auto a = record_field(r, x_field), b = record_field(r, y_field);
    if (!a || !b) {
      ++missing;
      continue;
    }
    x.push_back(*a);
    y.push_back(*b);
  }
  SlopeFit fit = fit_loglog_slope(x, y);
  fit.filtered += missing;
  return fit;
}

}  // namespace fobmaml
