#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "stet/tensor.hpp"

namespace stet {

using NamedTensor = std::pair<std::string, Tensor>;

struct GradCheckOptions {
  double step = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-7;
  // Entries checked per tensor; 0 checks all.
  std::size_t max_entries_per_tensor = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_entry;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
  bool passed = false;
};

// Compares taped gradients of the scalar `f` against central differences for
// every entry of `params`. `f` must be deterministic: seed any randomness
// inside it. Throws NumericError naming the entry when a loss is non-finite.
GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<NamedTensor>& params, double rel_tol,
                                  const GradCheckOptions& options = {});

}  // namespace stet
