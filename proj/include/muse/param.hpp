#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "muse/tensor.hpp"

namespace muse {

// Training-time parameter groups. base = the pretrained backbone analog,
// layout = text-grounding (CCA) additions, subject = image-grounding (DCA)
// additions. The groups partition every parameter of the full model.
enum class ParamGroup { base, layout, subject };

inline const char* param_group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::base: return "base";
        case ParamGroup::layout: return "layout";
        case ParamGroup::subject: return "subject";
    }
    return "?";
}

template <class Real>
struct Parameter {
    std::string name;
    ParamGroup group = ParamGroup::base;
    Tensor<Real> value;
    Tensor<Real> grad;
    bool trainable = true;
    bool frozen = false;

    void setup(std::string n, ParamGroup g, Tensor<Real> v) {
        name = std::move(n);
        group = g;
        value = std::move(v);
        grad = Tensor<Real>(value.shape);
    }

    void zero_grad() { grad.zero(); }
};

template <class Real>
using ParamList = std::vector<Parameter<Real>*>;

template <class Real>
inline Parameter<Real>* find_param(const ParamList<Real>& params, const std::string& name) {
    for (auto* p : params)
        if (p->name == name) return p;
    return nullptr;
}

template <class Real>
inline void zero_grads(const ParamList<Real>& params) {
    for (auto* p : params) p->zero_grad();
}

template <class Real>
inline int64_t param_count(const ParamList<Real>& params) {
    int64_t n = 0;
    for (auto* p : params) n += p->value.size();
    return n;
}

// FNV-1a over raw value bytes; used by the freeze-contract tests and by the
// trainer to assert frozen groups stay bit-identical across a stage.
template <class Real>
inline uint64_t group_hash(const ParamList<Real>& params, ParamGroup g) {
    uint64_t h = 1469598103934665603ull;
    for (auto* p : params) {
        if (p->group != g) continue;
        const unsigned char* bytes = reinterpret_cast<const unsigned char*>(p->value.data.data());
        size_t nb = p->value.data.size() * sizeof(Real);
        for (size_t i = 0; i < nb; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

template <class Real>
inline void set_group_frozen(const ParamList<Real>& params, ParamGroup g, bool frozen) {
    for (auto* p : params)
        if (p->group == g) p->frozen = frozen;
}

} // namespace muse
