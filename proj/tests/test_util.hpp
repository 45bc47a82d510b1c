#pragma once

#include <vector>

#include "kd/rng.hpp"
#include "kd/tensor.hpp"

namespace kdtest {

inline kd::Tensor random_tensor(kd::Rng& rng, kd::Shape shape, double lo = -1.0, double hi = 1.0,
                                bool requires_grad = true) {
    std::vector<double> data(static_cast<size_t>(kd::shape_numel(shape)));
    for (double& v : data) v = rng.uniform(lo, hi);
    return kd::Tensor::from(std::move(shape), std::move(data), requires_grad);
}

inline kd::Tensor random_normal_tensor(kd::Rng& rng, kd::Shape shape, double stddev = 1.0,
                                       bool requires_grad = true) {
    std::vector<double> data(static_cast<size_t>(kd::shape_numel(shape)));
    for (double& v : data) v = rng.normal(0.0, stddev);
    return kd::Tensor::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace kdtest
