#pragma once

#include <cmath>
#include <stdexcept>

#include "muse/param.hpp"
#include "muse/tensor.hpp"

namespace muse {

// ---- activations ----

template <class Real>
inline Real sigmoid(Real x) {
    return Real(1) / (Real(1) + std::exp(-x));
}

// silu(x) = x * sigmoid(x)
template <class Real>
inline Real silu(Real x) {
    return x * sigmoid(x);
}

template <class Real>
inline Real silu_grad(Real x) {
    Real s = sigmoid(x);
    return s * (Real(1) + x * (Real(1) - s));
}

// ---- softmax ----

// In-place row softmax over a raw buffer. Shift by the row max; exact
// shift-invariance is part of the contract.
template <class Real>
inline void softmax_rows_inplace(Real* m, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        Real* row = m + static_cast<size_t>(r) * cols;
        Real mx = row[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        Real sum = 0;
        for (int c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        Real inv = Real(1) / sum;
        for (int c = 0; c < cols; ++c) row[c] *= inv;
    }
}

template <class Real>
inline Tensor<Real> softmax_rows(const Tensor<Real>& m) {
    if (m.ndim() != 2) throw std::invalid_argument("softmax_rows: expected a matrix");
    if (!m.all_finite()) throw std::invalid_argument("softmax_rows: non-finite input");
    Tensor<Real> y = m;
    softmax_rows_inplace(y.data.data(), y.rows(), y.cols());
    return y;
}

// dL/dx given y = softmax(x) and gy = dL/dy:  gx = y .* (gy - rowdot(gy, y))
template <class Real>
inline void softmax_rows_backward_inplace(const Real* y, Real* gy, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const Real* yr = y + static_cast<size_t>(r) * cols;
        Real* gr = gy + static_cast<size_t>(r) * cols;
        Real d = dot(yr, gr, cols);
        for (int c = 0; c < cols; ++c) gr[c] = yr[c] * (gr[c] - d);
    }
}

template <class Real>
inline Tensor<Real> softmax_rows_backward(const Tensor<Real>& y, const Tensor<Real>& gy) {
    Tensor<Real> gx = gy;
    softmax_rows_backward_inplace(y.data.data(), gx.data.data(), y.rows(), y.cols());
    return gx;
}

// ---- linear layer ----

// y = x W + b with x (rows, in), W (in, out). Caches x for backward.
template <class Real>
struct Linear {
    Parameter<Real> w;
    Parameter<Real> b;
    int in_dim = 0, out_dim = 0;

    Tensor<Real> x_cache;

    void init(int in, int out, Rng& rng, const std::string& name, ParamGroup g, bool zero_init = false) {
        in_dim = in;
        out_dim = out;
        Real scale = zero_init ? Real(0) : static_cast<Real>(1.0 / std::sqrt(static_cast<double>(in)));
        w.setup(name + ".w", g, Tensor<Real>::randn({in, out}, rng, scale));
        b.setup(name + ".b", g, Tensor<Real>::zeros({out}));
    }

    void collect(ParamList<Real>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }

    Tensor<Real> forward(const Tensor<Real>& x) {
        if (x.cols() != in_dim) throw std::invalid_argument("linear " + w.name + ": input dim " + x.shape_str());
        x_cache = x;
        Tensor<Real> y({x.rows(), out_dim});
        gemm_nn_acc(x.data.data(), w.value.data.data(), y.data.data(), x.rows(), in_dim, out_dim);
        for (int r = 0; r < y.rows(); ++r) axpy(Real(1), b.value.data.data(), y.row(r), out_dim);
        return y;
    }

    // Pure forward against explicit input, no caching (used by samplers/oracles).
    Tensor<Real> forward_const(const Tensor<Real>& x) const {
        Tensor<Real> y({x.rows(), out_dim});
        gemm_nn_acc(x.data.data(), w.value.data.data(), y.data.data(), x.rows(), in_dim, out_dim);
        for (int r = 0; r < y.rows(); ++r) axpy(Real(1), b.value.data.data(), y.row(r), out_dim);
        return y;
    }

    Tensor<Real> backward(const Tensor<Real>& gy) {
        const int rows = gy.rows();
        // dW += x^T gy ; db += sum_rows gy ; gx = gy W^T
        gemm_tn_acc(x_cache.data.data(), gy.data.data(), w.grad.data.data(), in_dim, rows, out_dim);
        for (int r = 0; r < rows; ++r) axpy(Real(1), gy.row(r), b.grad.data.data(), out_dim);
        Tensor<Real> gx({rows, in_dim});
        gemm_nt_acc(gy.data.data(), w.value.data.data(), gx.data.data(), rows, out_dim, in_dim);
        return gx;
    }
};

// ---- 3-layer SiLU MLP ----

// Three linear layers, SiLU after the first two.
template <class Real>
struct MlpSiLU {
    Linear<Real> l1, l2, l3;
    int in_dim = 0, hidden_dim = 0, out_dim = 0;

    Tensor<Real> h1_pre, h2_pre;

    void init(int in, int hidden, int out, Rng& rng, const std::string& name, ParamGroup g) {
        in_dim = in;
        hidden_dim = hidden;
        out_dim = out;
        l1.init(in, hidden, rng, name + ".l1", g);
        l2.init(hidden, hidden, rng, name + ".l2", g);
        l3.init(hidden, out, rng, name + ".l3", g);
    }

    void collect(ParamList<Real>& out) {
        l1.collect(out);
        l2.collect(out);
        l3.collect(out);
    }

    Tensor<Real> forward(const Tensor<Real>& x) {
        if (x.cols() != in_dim)
            throw std::invalid_argument("mlp " + l1.w.name + ": input dim mismatch, got " + x.shape_str());
        h1_pre = l1.forward(x);
        Tensor<Real> h1 = h1_pre;
        for (auto& v : h1.data) v = silu(v);
        h2_pre = l2.forward(h1);
        Tensor<Real> h2 = h2_pre;
        for (auto& v : h2.data) v = silu(v);
        return l3.forward(h2);
    }

    Tensor<Real> backward(const Tensor<Real>& gy) {
        Tensor<Real> g2 = l3.backward(gy);
        for (int64_t i = 0; i < g2.size(); ++i) g2.at(static_cast<int>(i)) *= silu_grad(h2_pre.data[static_cast<size_t>(i)]);
        Tensor<Real> g1 = l2.backward(g2);
        for (int64_t i = 0; i < g1.size(); ++i) g1.at(static_cast<int>(i)) *= silu_grad(h1_pre.data[static_cast<size_t>(i)]);
        return l1.backward(g1);
    }
};

// ---- layer norm ----

template <class Real>
struct LayerNorm {
    Parameter<Real> gain;
    Parameter<Real> bias;
    int dim = 0;
    Real eps = static_cast<Real>(1e-5);

    Tensor<Real> x_hat;
    std::vector<Real> inv_std;

    void init(int d, const std::string& name, ParamGroup g) {
        dim = d;
        gain.setup(name + ".g", g, Tensor<Real>::full({d}, Real(1)));
        bias.setup(name + ".b", g, Tensor<Real>::zeros({d}));
    }

    void collect(ParamList<Real>& out) {
        out.push_back(&gain);
        out.push_back(&bias);
    }

    Tensor<Real> forward(const Tensor<Real>& x) {
        const int rows = x.rows();
        x_hat = Tensor<Real>({rows, dim});
        inv_std.assign(static_cast<size_t>(rows), Real(0));
        Tensor<Real> y({rows, dim});
        for (int r = 0; r < rows; ++r) {
            const Real* xr = x.row(r);
            Real mean = 0;
            for (int c = 0; c < dim; ++c) mean += xr[c];
            mean /= static_cast<Real>(dim);
            Real var = 0;
            for (int c = 0; c < dim; ++c) var += (xr[c] - mean) * (xr[c] - mean);
            var /= static_cast<Real>(dim);
            Real is = Real(1) / std::sqrt(var + eps);
            inv_std[static_cast<size_t>(r)] = is;
            Real* hr = x_hat.row(r);
            Real* yr = y.row(r);
            for (int c = 0; c < dim; ++c) {
                hr[c] = (xr[c] - mean) * is;
                yr[c] = hr[c] * gain.value.at(c) + bias.value.at(c);
            }
        }
        return y;
    }

    Tensor<Real> backward(const Tensor<Real>& gy) {
        const int rows = gy.rows();
        Tensor<Real> gx({rows, dim});
        for (int r = 0; r < rows; ++r) {
            const Real* gr = gy.row(r);
            const Real* hr = x_hat.row(r);
            Real* or_ = gx.row(r);
            Real sum_g = 0, sum_gh = 0;
            for (int c = 0; c < dim; ++c) {
                Real gh = gr[c] * gain.value.at(c);
                gain.grad.at(c) += gr[c] * hr[c];
                bias.grad.at(c) += gr[c];
                or_[c] = gh;
                sum_g += gh;
                sum_gh += gh * hr[c];
            }
            Real is = inv_std[static_cast<size_t>(r)];
            Real inv_n = Real(1) / static_cast<Real>(dim);
            for (int c = 0; c < dim; ++c)
                or_[c] = is * (or_[c] - inv_n * sum_g - hr[c] * inv_n * sum_gh);
        }
        return gx;
    }
};

} // namespace muse
