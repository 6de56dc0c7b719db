#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "muse/param.hpp"

namespace muse {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
};

// Central finite differences against the analytic gradients produced by
// `loss` (which must run forward + backward and return the scalar loss).
// rel err = |analytic - central| / (|analytic| + |central| + 1e-12).
// Intended for 64-bit builds at small dims.
template <class Real>
inline GradCheckReport finite_diff_gradcheck(const std::function<Real()>& loss,
                                             const ParamList<Real>& params,
                                             Real h) {
    zero_grads(params);
    Real base = loss();
    if (!std::isfinite(static_cast<double>(base)))
        throw std::runtime_error("gradcheck: non-finite loss at base point");

    std::vector<Tensor<Real>> analytic;
    analytic.reserve(params.size());
    for (auto* p : params) analytic.push_back(p->grad);

    GradCheckReport rep;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<Real>* p = params[pi];
        for (int64_t i = 0; i < p->value.size(); ++i) {
            const Real keep = p->value.data[static_cast<size_t>(i)];
            p->value.data[static_cast<size_t>(i)] = keep + h;
            zero_grads(params);
            Real fp = loss();
            p->value.data[static_cast<size_t>(i)] = keep - h;
            zero_grads(params);
            Real fm = loss();
            p->value.data[static_cast<size_t>(i)] = keep;
            if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
                throw std::runtime_error("gradcheck: non-finite loss while perturbing " + p->name);
            const double central = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * static_cast<double>(h));
            const double a = static_cast<double>(analytic[pi].data[static_cast<size_t>(i)]);
            const double rel = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = p->name;
                rep.worst_index = i;
            }
        }
    }
    return rep;
}

} // namespace muse
