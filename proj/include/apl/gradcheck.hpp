#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "apl/optim.hpp"
#include "apl/tensor.hpp"

namespace apl {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;

    bool pass(double tol) const { return max_rel_error < tol; }
};

// Central-difference check of reverse-mode gradients. `f` must rebuild the
// forward graph from the current parameter values and return the scalar
// output; it is re-evaluated 2 times per coordinate at w +/- h. Relative
// error uses max(|analytic|, |numeric|, denom_floor) as denominator so
// coordinates with near-zero gradient do not divide by noise.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Parameter> params,
                                  double h = 1e-5, double denom_floor = 1e-6) {
    zero_grads(params);
    Tensor y = f();
    if (!std::isfinite(y.value())) throw std::runtime_error("grad_check: non-finite function value");
    backward(y);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Parameter& p : params) {
        analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    }

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto w = params[pi].tensor.data_mut();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double saved = w[i];
            w[i] = saved + h;
            const double fp = f().value();
            w[i] = saved - h;
            const double fm = f().value();
            w[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw std::runtime_error("grad_check: non-finite value at perturbed point of " +
                                         params[pi].name);
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
            const double rel = std::abs(a - numeric) / denom;
            ++report.coords_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = params[pi].name;
                report.worst_coord = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    zero_grads(params);
    return report;
}

}  // namespace apl
