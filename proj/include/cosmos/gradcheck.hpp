#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cosmos/tensor.hpp"

namespace cosmos {

struct GradCheckReport {
    struct Entry {
        std::string name;
        double max_rel_err = 0.0;
        std::size_t worst_index = 0;
    };
    std::vector<Entry> per_param;
    double eps = 0.0;
    double tolerance = 0.0;
    bool pass = false;

    std::string to_json() const;
};

// Central-difference check of reverse-mode gradients, always in 64-bit.
//
// loss_builder must rebuild the scalar loss from the current values of the
// given parameter tensors; it runs once under a fresh tape for the analytic
// gradients and twice per parameter element for the differences. The builder
// is evaluated twice up front at the same point and must return bitwise equal
// values, otherwise the check aborts with ContractError.
//
// Relative error per element is |a - fd| / max(|a|, |fd|, 1e-6).
GradCheckReport finite_diff_check(
    const std::vector<std::pair<std::string, Tensor<double>>>& params,
    const std::function<Tensor<double>()>& loss_builder, double eps, double tolerance);

}  // namespace cosmos
