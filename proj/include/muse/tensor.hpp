#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "muse/rng.hpp"

namespace muse {

// Dense row-major tensor. Real is float in training builds and double in
// test builds; the numerics below are precision-agnostic.
template <class Real>
struct Tensor {
    std::vector<int> shape;
    std::vector<Real> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(count(shape)), Real(0));
    }

    Tensor(std::vector<int> s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != count(shape))
            throw std::invalid_argument("tensor: data length does not match shape");
    }

    // Zero extents are legal: a (0, d) block is the canonical "dropped
    // condition" representation.
    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int e : s) {
            if (e < 0) throw std::invalid_argument("tensor: negative extent");
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, Real v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor randn(std::vector<int> s, Rng& rng, Real scale = Real(1)) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = static_cast<Real>(rng.gaussian()) * scale;
        return t;
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    // 2-d helpers; most of the model works on row blocks
    int rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 0 : shape[0]); }
    int cols() const { return shape.size() == 2 ? shape[1] : (shape.size() == 1 ? shape[0] : 0); }

    Real* row(int r) { return data.data() + static_cast<size_t>(r) * cols(); }
    const Real* row(int r) const { return data.data() + static_cast<size_t>(r) * cols(); }

    Real& at(int i) { return data[static_cast<size_t>(i)]; }
    Real at(int i) const { return data[static_cast<size_t>(i)]; }
    Real& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    Real at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    void zero() { std::fill(data.begin(), data.end(), Real(0)); }

    bool all_finite() const {
        for (Real v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }
};

// ---- dense kernels (row-major, accumulate into c) ----

// c(m,n) += a(m,k) * b(k,n)
template <class Real>
inline void gemm_nn_acc(const Real* a, const Real* b, Real* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const Real* ai = a + static_cast<size_t>(i) * k;
        Real* ci = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const Real av = ai[p];
            const Real* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// Fixed 8-lane dot product. The lane split is part of the algorithm, so the
// summation order is deterministic while still vectorizing without
// -ffast-math.
template <class Real>
inline Real dot_lanes(const Real* x, const Real* y, int k) {
    Real lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    int p = 0;
    for (; p + 8 <= k; p += 8)
        for (int l = 0; l < 8; ++l) lane[l] += x[p + l] * y[p + l];
    Real s = ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
    for (; p < k; ++p) s += x[p] * y[p];
    return s;
}

// c(m,n) += a(m,k) * b(n,k)^T
template <class Real>
inline void gemm_nt_acc(const Real* a, const Real* b, Real* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const Real* ai = a + static_cast<size_t>(i) * k;
        Real* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) ci[j] += dot_lanes(ai, b + static_cast<size_t>(j) * k, k);
    }
}

// c(m,n) += a(k,m)^T * b(k,n)
template <class Real>
inline void gemm_tn_acc(const Real* a, const Real* b, Real* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const Real* ap = a + static_cast<size_t>(p) * m;
        const Real* bp = b + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const Real av = ap[i];
            Real* ci = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <class Real>
inline void axpy(Real alpha, const Real* x, Real* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class Real>
inline Real dot(const Real* x, const Real* y, int64_t n) {
    return dot_lanes(x, y, static_cast<int>(n));
}

} // namespace muse
