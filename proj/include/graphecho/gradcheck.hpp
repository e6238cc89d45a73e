#pragma once

#include <cmath>
#include <limits>

#include "graphecho/autodiff.hpp"

namespace graphecho {

// Central-difference comparison of reverse-mode gradients over every element
// of every differentiable leaf. Returns the worst relative error, with
// denominator max(|a|,|b|,1e-8); any NaN encountered reports +inf.
// Requires the 64-bit instantiation: finite differences at eps=1e-5 lose too
// many digits in float.
template <typename S>
double check_gradients(const Graph<S>& g, const Bindings<S>& bindings, double eps = 1e-5) {
    static_assert(sizeof(S) == 8, "check_gradients requires the 64-bit scalar mode");
    const GradMap<S> analytic = gradient(g, bindings);
    double worst = 0.0;
    for (const auto& [name, grad] : analytic) {
        Bindings<S> b = bindings;
        Tensor<S>& t = b.at(name);
        for (int64_t i = 0; i < t.numel(); ++i) {
            const S saved = t.data[i];
            t.data[i] = saved + S(eps);
            const double fp = double(evaluate(g, b).data[0]);
            t.data[i] = saved - S(eps);
            const double fm = double(evaluate(g, b).data[0]);
            t.data[i] = saved;
            const double fd = (fp - fm) / (2.0 * eps);
            const double an = double(grad.data[i]);
            if (!std::isfinite(fd) || !std::isfinite(an))
                return std::numeric_limits<double>::infinity();
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            worst = std::max(worst, std::abs(fd - an) / denom);
        }
    }
    return worst;
}

}  // namespace graphecho
