#include "fobmaml/outer_opt.hpp"

#include <cmath>

#include <fmt/format.h>

#include "fobmaml/errors.hpp"

namespace fobmaml {

std::string_view variant_name(OuterVariant v) {
  switch (v) {
    case OuterVariant::GD: return "gd";
    case OuterVariant::ClippedGD: return "clipped_gd";
    case OuterVariant::NormalizedGD: return "normalized_gd";
  }
  return "unknown";
}

OuterVariant parse_variant(std::string_view name) {
  if (name == "gd") return OuterVariant::GD;
  if (name == "clipped_gd") return OuterVariant::ClippedGD;
  if (name == "normalized_gd") return OuterVariant::NormalizedGD;
  throw ConfigError(fmt::format("unknown outer optimizer '{}'", name));
}

OuterOptimizer::OuterOptimizer(OuterVariant variant, double eta, double clip, double beta)
    : variant_(variant), eta_(eta), clip_(clip), beta_(beta) {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw ParameterError("outer learning rate must be positive");
  if (variant == OuterVariant::ClippedGD && !(clip > 0.0)) throw ParameterError("clip level must be positive");
  if (variant == OuterVariant::NormalizedGD && !(beta >= 0.0)) throw ParameterError("normalizer beta must be >= 0");
}

Vector OuterOptimizer::step(const Vector& theta, const Vector& g) {
  if (theta.size() != g.size())
    throw ContractViolation(fmt::format("gradient has dimension {}, theta {}", g.size(), theta.size()));
  if (!g.allFinite()) throw NumericalError("outer step received a non-finite gradient");
  const double gn = g.norm();
  double scale = eta_;
  switch (variant_) {
    case OuterVariant::GD: break;
    case OuterVariant::ClippedGD:
      if (gn > clip_) scale = eta_ * clip_ / gn;
      break;
    case OuterVariant::NormalizedGD:
      if (gn == 0.0 && beta_ == 0.0) {
        ++steps_;
        return theta;
      }
      scale = eta_ / (beta_ + gn);
      break;
  }
  ++steps_;
  return theta - scale * g;
}

OuterOptimizer schedule_from_constants(const SmoothnessConstants& c, OuterVariant variant) {
  const double l0 = c.cal_L0(), l1 = c.cal_L1();
  if (!(l0 > 0.0) || !std::isfinite(l0)) throw ParameterError("schedule needs a finite positive smoothness constant");
  switch (variant) {
    case OuterVariant::GD: {
      const double bound = l1 > 0.0 ? l0 + c.G() * l1 : l0;
      return OuterOptimizer::gd(1.0 / bound);
    }
    case OuterVariant::NormalizedGD:
      if (l1 > 0.0) return OuterOptimizer::normalized(1.0 / l1, l0 / l1);
      return OuterOptimizer::gd(1.0 / l0);
    case OuterVariant::ClippedGD:
      if (l1 > 0.0) return OuterOptimizer::clipped(0.5 / l0, l0 / l1);
      return OuterOptimizer::gd(1.0 / l0);
  }
  throw ContractViolation("unhandled outer variant");
}

std::size_t budget_bound(const ConvergenceBudget& b, const SmoothnessConstants& c, OuterVariant variant) {
  if (!(b.epsilon > 0.0)) throw ParameterError("budget needs epsilon > 0");
  if (!(b.delta_gap >= 0.0)) throw ParameterError("budget needs a nonnegative optimality gap");
  if (b.delta_gap == 0.0) return 0;
  const double l0 = c.cal_L0(), l1 = c.cal_L1();
  if (!(l0 > 0.0)) throw ParameterError("budget needs a positive smoothness constant");
  const double eps2 = b.epsilon * b.epsilon;
  double k = 0.0;
  if (variant == OuterVariant::GD)
    k = 2.0 * (l0 + (l1 > 0.0 ? c.G() * l1 : 0.0)) * b.delta_gap / eps2;
  else
    k = 4.0 * l0 * b.delta_gap / eps2 + 4.0 * l1 * l1 * b.delta_gap / l0;
  // shave rounding noise so 400.00000000000006 counts as 400
  return static_cast<std::size_t>(std::ceil(k * (1.0 - 1e-12)));
}

}  // namespace fobmaml
