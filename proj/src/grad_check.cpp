#include "latentkit/grad_check.hpp"

#include <cmath>

namespace latentkit {

GradCheckResult grad_check(const std::function<double()>& f, std::span<Param* const> params,
                           double step, double abs_floor) {
    if (step <= 0.0) throw UsageError("grad_check: step must be positive");
    GradCheckResult r;
    for (Param* p : params) {
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            const double saved = p->value.data[i];
            p->value.data[i] = saved + step;
            const double fp = f();
            p->value.data[i] = saved - step;
            const double fm = f();
            p->value.data[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericError("grad_check: non-finite evaluation at param " + p->name);
            }
            const double fd = (fp - fm) / (2.0 * step);
            const double an = p->grad.data[i];
            const double diff = std::abs(fd - an);
            const double rel = diff <= abs_floor ? 0.0 : diff / std::max(std::abs(fd) + std::abs(an), 1e-8);
            ++r.checked;
            if (rel > r.max_rel_err) {
                r.max_rel_err = rel;
                r.worst_param = p->name;
                r.worst_index = static_cast<int64_t>(i);
                r.analytic = an;
                r.numeric = fd;
            }
        }
    }
    return r;
}

} // namespace latentkit
