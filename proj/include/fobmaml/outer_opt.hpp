#pragma once

#include <cstddef>
#include <string_view>

#include "fobmaml/task_model.hpp"

namespace fobmaml {

enum class OuterVariant { GD, ClippedGD, NormalizedGD };

std::string_view variant_name(OuterVariant v);
OuterVariant parse_variant(std::string_view name);  // ConfigError on unknown names

class OuterOptimizer {
 public:
  // GD(η); ClippedGD(η, c) reads `clip`; NormalizedGD(η, β) reads `beta`.
  OuterOptimizer(OuterVariant variant, double eta, double clip = 1.0, double beta = 0.0);

  static OuterOptimizer gd(double eta) { return {OuterVariant::GD, eta}; }
  static OuterOptimizer clipped(double eta, double clip) { return {OuterVariant::ClippedGD, eta, clip}; }
  static OuterOptimizer normalized(double eta, double beta) { return {OuterVariant::NormalizedGD, eta, 1.0, beta}; }

  Vector step(const Vector& theta, const Vector& g);

  OuterVariant variant() const { return variant_; }
  double eta() const { return eta_; }
  double clip() const { return clip_; }
  double beta() const { return beta_; }
  std::size_t step_count() const { return steps_; }

 private:
  OuterVariant variant_;
  double eta_;
  double clip_;
  double beta_;
  std::size_t steps_ = 0;
};

// NormalizedGD: η = 1/𝓛₁, β = 𝓛₀/𝓛₁ (GD with η = 1/𝓛₀ when 𝓛₁ = 0).
// GD: η = 1/(𝓛₀ + G𝓛₁).
// ClippedGD: η = 1/(2𝓛₀), c = 𝓛₀/𝓛₁, whose step never exceeds the normalized one.
OuterOptimizer schedule_from_constants(const SmoothnessConstants& constants, OuterVariant variant);

struct ConvergenceBudget {
  double delta_gap = 0.0;  // Δ = F(θ₀) − F*
  double epsilon = 1e-3;
};

// ceil(4𝓛₀Δ/ε² + 4𝓛₁²Δ/𝓛₀) for the normalized and clipped variants,
// ceil(2(𝓛₀ + G𝓛₁)Δ/ε²) for GD.
std::size_t budget_bound(const ConvergenceBudget& budget, const SmoothnessConstants& constants,
                         OuterVariant variant);

}  // namespace fobmaml
