#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "muse/param.hpp"

namespace muse {

// AdamW with decoupled weight decay and bias-corrected moments. Frozen or
// non-trainable parameters are never touched, including their moment slots.
template <class Real>
struct AdamW {
    Real lr = static_cast<Real>(1e-4);
    Real beta1 = static_cast<Real>(0.9);
    Real beta2 = static_cast<Real>(0.999);
    Real eps = static_cast<Real>(1e-8);
    Real weight_decay = 0;
    int64_t t = 0;

    std::map<std::string, Tensor<Real>> m;
    std::map<std::string, Tensor<Real>> v;

    void step(const ParamList<Real>& params) {
        t += 1;
        const Real bc1 = Real(1) - static_cast<Real>(std::pow(static_cast<double>(beta1), static_cast<double>(t)));
        const Real bc2 = Real(1) - static_cast<Real>(std::pow(static_cast<double>(beta2), static_cast<double>(t)));
        for (auto* p : params) {
            if (!p->trainable || p->frozen) continue;
            if (!p->grad.same_shape(p->value))
                throw std::invalid_argument("adamw: missing/mismatched grad for " + p->name);
            Tensor<Real>& mp = moment(m, *p);
            Tensor<Real>& vp = moment(v, *p);
            const int64_t n = p->value.size();
            Real* val = p->value.data.data();
            const Real* g = p->grad.data.data();
            Real* mm = mp.data.data();
            Real* vv = vp.data.data();
            for (int64_t i = 0; i < n; ++i) {
                if (weight_decay != Real(0)) val[i] -= lr * weight_decay * val[i];
                mm[i] = beta1 * mm[i] + (Real(1) - beta1) * g[i];
                vv[i] = beta2 * vv[i] + (Real(1) - beta2) * g[i] * g[i];
                const Real mhat = mm[i] / bc1;
                const Real vhat = vv[i] / bc2;
                val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    void reset() {
        t = 0;
        m.clear();
        v.clear();
    }

private:
    static Tensor<Real>& moment(std::map<std::string, Tensor<Real>>& slots, const Parameter<Real>& p) {
        auto it = slots.find(p.name);
        if (it == slots.end()) it = slots.emplace(p.name, Tensor<Real>(p.value.shape)).first;
        else if (!it->second.same_shape(p.value))
            throw std::invalid_argument("adamw: moment shape mismatch for " + p.name);
        return it->second;
    }
};

} // namespace muse
