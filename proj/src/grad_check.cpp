#include "kd/grad_check.hpp"

#include <cmath>

namespace kd {

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                  double eps) {
    std::vector<Tensor> tracked;
    for (const Tensor& t : leaves)
        if (t.requires_grad()) tracked.push_back(t);

    // analytic gradients
    for (Tensor& t : tracked) t.zero_grad();
    {
        Tape tape;
        Tensor loss = f();
        if (!std::isfinite(loss.value()))
            throw NumericalError("grad_check: non-finite value at base point");
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (Tensor& t : tracked) analytic.emplace_back(t.grad().begin(), t.grad().end());

    // central differences, forward-only evaluations
    double max_rel = 0.0;
    for (size_t ti = 0; ti < tracked.size(); ++ti) {
        Tensor& t = tracked[ti];
        auto vals = t.values_mut();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + eps;
            const double fp = f().value();
            vals[i] = saved - eps;
            const double fm = f().value();
            vals[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericalError("grad_check: non-finite value at perturbed point");
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[ti][i];
            const double rel = std::fabs(a - numeric) / std::max(1.0, std::fabs(a));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

std::vector<GradCheckResult> run_gradcheck(const std::vector<GradCheckCase>& cases,
                                           const std::string& filter, uint64_t seed) {
    std::vector<GradCheckResult> results;
    for (const GradCheckCase& c : cases) {
        if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
        GradCheckResult r;
        r.name = c.name;
        r.tolerance = c.tolerance;
        for (int s = 0; s < c.seeds; ++s)
            r.max_error = std::max(r.max_error, c.run(seed + static_cast<uint64_t>(s)));
        r.ok = r.max_error < c.tolerance;
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace kd
