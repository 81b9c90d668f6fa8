#include "stet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "stet/errors.hpp"

namespace stet {

namespace {

double evaluate(const std::function<Tensor()>& f, const std::string& where) {
  NoGradGuard guard;
  const double v = f().item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss at " + where);
  return v;
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<NamedTensor>& params, double rel_tol,
                                  const GradCheckOptions& options) {
  Tape& tape = Tape::current();
  tape.reset();
  for (auto [name, p] : params) p.zero_grad();
  const Tensor loss = f();
  if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: non-finite base loss");
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, p] : params) {
    const auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
  }
  tape.reset();

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k].second;
    const std::size_t n = options.max_entries_per_tensor
                              ? std::min(options.max_entries_per_tensor, p.numel())
                              : p.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const std::string where = params[k].first + "[" + std::to_string(i) + "]";
      const double original = p[i];
      p[i] = original + options.step;
      const double up = evaluate(f, where);
      p[i] = original - options.step;
      const double down = evaluate(f, where);
      p[i] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[k][i];
      if (!std::isfinite(a)) throw NumericError("finite_diff_check: non-finite gradient at " + where);
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.entries_checked;
      if (rel > report.max_rel_error || report.worst_entry.empty()) {
        report.max_rel_error = std::max(rel, report.max_rel_error);
        if (rel >= report.max_rel_error) {
          report.worst_entry = where;
          report.worst_analytic = a;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  report.passed = report.max_rel_error < rel_tol;
  return report;
}

}  // namespace stet
