#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "deltascope/tensor.hpp"

namespace deltascope {

struct GradCheckResult {
    /// max |analytic - numeric| / max(f, |analytic| + |numeric|), where the floor
    /// f is 1e-6 of the largest analytic gradient (at least 1e-8). Entries with
    /// an exactly zero gradient, such as a bias feeding batch norm, are then
    /// judged against the gradient scale rather than their own rounding noise.
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    /// Perturbations that flipped a relu sign, pooling argmax or clamp; these
    /// sit on a kink where the central difference is meaningless.
    std::size_t excluded = 0;
};

/// Compares reverse-mode gradients with central differences.
///
/// `build` must construct the scalar loss from the tensors in `inputs`; each
/// input is perturbed in place. A graph whose value changes between two
/// identical evaluations (for example train-mode dropout sharing a live
/// generator) is rejected with UsageError.
GradCheckResult grad_check(const std::function<Tensor()>& build, std::vector<Tensor> inputs,
                           double eps = 1e-5);

}  // namespace deltascope
