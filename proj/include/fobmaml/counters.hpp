#pragma once

#include <cstddef>

namespace fobmaml {

// Shadow tally of oracle calls, per thread. Estimators report their own counts; this
// one is bumped inside the oracles so the two can be compared.
struct EvalCounts {
  std::size_t grad = 0;
  std::size_t hvp = 0;
};

EvalCounts& shadow_counts();
inline void reset_shadow_counts() { shadow_counts() = EvalCounts{}; }

}  // namespace fobmaml
