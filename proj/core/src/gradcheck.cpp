#include "promptdet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace promptdet {

GradCheckReport finite_diff_check(const std::function<DiffTensor()>& fn, std::vector<DiffTensor> leaves,
                                  GradCheckOptions options) {
  StopGradientFreeze freeze;
  for (auto& leaf : leaves) leaf.zero_grad();
  backward(fn());
  auto eval = [&] {
    freeze.replay();
    return fn().item();
  };
  std::vector<std::vector<double>> analytic;
  std::size_t total = 0;
  for (const auto& leaf : leaves) {
    analytic.push_back(leaf.grad());
    total += leaf.numel();
  }

  const std::size_t stride =
      options.max_coordinates == 0 || total <= options.max_coordinates ? 1 : total / options.max_coordinates;
  GradCheckReport report;
  const double h = options.step;
  std::size_t flat = 0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i, ++flat) {
      if (flat % stride != 0) continue;
      const double orig = values[i];
      const double f0 = eval();
      values[i] = orig + h;
      const double fp = eval();
      values[i] = orig - h;
      const double fm = eval();
      values[i] = orig;

      const double numeric = (fp - fm) / (2.0 * h);
      const double right = (fp - f0) / h;
      const double left = (f0 - fm) / h;
      const double slope_scale = std::max({std::abs(left), std::abs(right), options.relative_floor});
      if (std::abs(right - left) > options.kink_tolerance * slope_scale) {
        // Smooth curvature only separates the one-sided slopes by ~h |f''|.
        report.kinks.push_back(flat);
        continue;
      }
      const double a = analytic[l][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.relative_floor});
      ++report.checked;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_index = flat;
      }
    }
  }
  report.passed = report.max_relative_error < options.tolerance;
  return report;
}

GradCheckReport finite_diff_check(const std::function<DiffTensor(const DiffTensor&)>& fn, DiffTensor x,
                                  GradCheckOptions options) {
  if (!x.requires_grad()) x = x.detached(true);
  return finite_diff_check([&fn, x]() { return fn(x); }, std::vector<DiffTensor>{x}, options);
}

}  // namespace promptdet
