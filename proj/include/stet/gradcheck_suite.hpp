#pragma once

#include <string>
#include <vector>

#include "stet/gradcheck.hpp"

namespace stet {

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
};

// Finite-difference checks of every differentiable layer type, each loss, and
// the full model's classification and regression losses at a small size
// (t=16, c=4, h=8, 2 heads, short windows [5, 3]).
std::vector<GradCheckCase> run_gradcheck_suite(double rel_tol, std::uint64_t seed = 5);

}  // namespace stet
