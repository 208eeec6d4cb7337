#include "irformer/gradcheck.hpp"

#include <cmath>

namespace irformer {

GradCheckReport grad_check(
    const std::function<TensorD(const std::vector<TensorD>&)>& f,
    std::vector<TensorD> inputs, double eps, double tol) {
  if (inputs.empty()) throw ContractError("grad_check: no inputs");
  if (eps <= 0 || tol <= 0) throw ContractError("grad_check: eps/tol must be positive");

  for (auto& t : inputs) t.set_requires_grad(true);

  // Analytic pass.
  TensorD loss = f(inputs);
  if (loss.numel() != 1)
    throw ContractError("grad_check: f must be scalar-valued");
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) {
    if (t.has_grad()) {
      auto g = t.grad();
      analytic.emplace_back(g.begin(), g.end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
    t.zero_grad();
  }

  GradCheckReport report;
  report.tol = tol;

  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto values = inputs[ti].data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + eps;
      const double f_plus = f(inputs).item();
      values[j] = saved - eps;
      const double f_minus = f(inputs).item();
      values[j] = saved;

      const double fd = (f_plus - f_minus) / (2.0 * eps);
      const double an = analytic[ti][j];
      const double abs_diff = std::abs(fd - an);
      const double rel =
          abs_diff / std::max({1.0, std::abs(fd), std::abs(an)});
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.max_abs_diff = abs_diff;
        report.worst_coord = "input[" + std::to_string(ti) + "][" +
                             std::to_string(j) + "]";
      }
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace irformer
