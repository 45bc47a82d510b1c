#pragma once

#include <functional>
#include <string>
#include <vector>

#include "kd/tensor.hpp"

namespace kd {

// Central-difference verification of reverse-mode gradients.
//
// `f` rebuilds the scalar computation from the current leaf values on every
// call; it must be deterministic. Returns
//   max_i |analytic_i - (f(x+eps e_i) - f(x-eps e_i)) / (2 eps)| / max(1, |analytic_i|)
// over the coordinates of every leaf with requires_grad set.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                  double eps);

// Named check for the registry-driven runner (the gradcheck CLI command and
// the acceptance gradient suite share it).
struct GradCheckCase {
    std::string name;
    // builds leaves and the closure for one seed, returns max relative error
    std::function<double(uint64_t seed)> run;
    double tolerance = 1e-3;
    int seeds = 20;
};

std::vector<GradCheckCase> gradcheck_registry();

struct GradCheckResult {
    std::string name;
    double max_error = 0.0;
    double tolerance = 0.0;
    bool ok = false;
};

// Runs every registered case whose name contains `filter` (all when empty).
std::vector<GradCheckResult> run_gradcheck(const std::vector<GradCheckCase>& cases,
                                           const std::string& filter, uint64_t seed);

}  // namespace kd
