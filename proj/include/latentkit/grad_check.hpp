#pragma once

#include <functional>
#include <span>
#include <string>

#include "latentkit/param.hpp"

namespace latentkit {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    int64_t checked = 0;
};

// Compares the analytic gradients already stored in each param against central
// finite differences (f(p+h) - f(p-h)) / 2h, element by element. f must be a
// pure function of the param values. Differences below abs_floor count as a
// match; this is the finite-difference resolution floor, not a tolerance on
// real gradients.
GradCheckResult grad_check(const std::function<double()>& f, std::span<Param* const> params,
                           double step, double abs_floor = 1e-9);

} // namespace latentkit
