#pragma once

#include "convneur/tape.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace convneur {

struct NamedTensor {
    std::string name;
    Tensor* tensor;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t probes = 0;
};

// Builds a scalar loss on `tape`, binding parameters with tape.parameter().
using ScalarFunction = std::function<Var(Tape&)>;

// Compares reverse-mode gradients with central differences,
// |analytic - numeric| / max(1, |numeric|), maximized over every element of
// every parameter. eps must lie in [1e-7, 1e-3].
GradCheckResult grad_check(const ScalarFunction& f, std::span<const NamedTensor> params, double eps);

}  // namespace convneur
