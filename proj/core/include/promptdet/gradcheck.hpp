#pragma once

#include <functional>
#include <vector>

#include "promptdet/diffnum.hpp"

namespace promptdet {

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  /// Gradients smaller than this are compared in absolute terms.
  double relative_floor = 1e-2;
  /// A coordinate is a kink when its one-sided slopes differ by more than this
  /// fraction of their magnitude. Kinks are reported and excluded from the error.
  double kink_tolerance = 0.1;
  /// Check at most this many coordinates (evenly strided); 0 checks all.
  std::size_t max_coordinates = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::vector<std::size_t> kinks;
  bool passed = false;
};

/// Compares the analytic gradient of a scalar fn at x against central
/// differences. fn must rebuild its graph from x on each call. Values passed
/// through stop_gradient are held at their unperturbed values (StopGradientFreeze).
GradCheckReport finite_diff_check(const std::function<DiffTensor(const DiffTensor&)>& fn, DiffTensor x,
                                  GradCheckOptions options = {});

/// Same check over several leaves at once; fn reads the leaves it captured.
GradCheckReport finite_diff_check(const std::function<DiffTensor()>& fn, std::vector<DiffTensor> leaves,
                                  GradCheckOptions options = {});

}  // namespace promptdet
