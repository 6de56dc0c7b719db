#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "muse/attention.hpp"
#include "muse/grounding.hpp"
#include "muse/nn.hpp"
#include "muse/world.hpp"

namespace muse {

// ---- diffusion schedule ----

template <class Real>
struct DiffusionSchedule {
    int T = 1000;
    std::vector<Real> beta, alpha_bar, sqrt_ab, sqrt_1mab;

    static DiffusionSchedule linear(int steps = 1000, Real beta0 = static_cast<Real>(1e-4),
                                    Real beta1 = static_cast<Real>(0.02)) {
        DiffusionSchedule s;
        s.T = steps;
        s.beta.resize(static_cast<size_t>(steps));
        s.alpha_bar.resize(static_cast<size_t>(steps));
        s.sqrt_ab.resize(static_cast<size_t>(steps));
        s.sqrt_1mab.resize(static_cast<size_t>(steps));
        Real ab = 1;
        for (int t = 0; t < steps; ++t) {
            Real b = beta0 + (beta1 - beta0) * static_cast<Real>(t) / static_cast<Real>(steps - 1);
            s.beta[static_cast<size_t>(t)] = b;
            ab *= (Real(1) - b);
            s.alpha_bar[static_cast<size_t>(t)] = ab;
            s.sqrt_ab[static_cast<size_t>(t)] = std::sqrt(ab);
            s.sqrt_1mab[static_cast<size_t>(t)] = std::sqrt(Real(1) - ab);
        }
        return s;
    }

    // alpha_bar(-1) = 1 by convention (the terminal DDIM target)
    Real alpha_bar_at(int t) const {
        if (t < -1 || t >= T) throw std::invalid_argument("schedule: t out of range");
        return t < 0 ? Real(1) : alpha_bar[static_cast<size_t>(t)];
    }
};

// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps
template <class Real>
inline Tensor<Real> q_sample(const Tensor<Real>& x0, int t, const Tensor<Real>& eps,
                             const DiffusionSchedule<Real>& sched) {
    if (t < 0 || t >= sched.T) throw std::invalid_argument("q_sample: t out of range");
    if (!x0.same_shape(eps)) throw std::invalid_argument("q_sample: eps shape mismatch");
    Tensor<Real> xt(x0.shape);
    const Real a = sched.sqrt_ab[static_cast<size_t>(t)], b = sched.sqrt_1mab[static_cast<size_t>(t)];
    for (int64_t i = 0; i < x0.size(); ++i)
        xt.data[static_cast<size_t>(i)] = a * x0.data[static_cast<size_t>(i)] + b * eps.data[static_cast<size_t>(i)];
    return xt;
}

// eps_u + w (eps_c - eps_u)
template <class Real>
inline Tensor<Real> cfg_combine(const Tensor<Real>& eps_u, const Tensor<Real>& eps_c, Real w) {
    if (!eps_u.same_shape(eps_c)) throw std::invalid_argument("cfg_combine: shape mismatch");
    Tensor<Real> out(eps_u.shape);
    for (int64_t i = 0; i < out.size(); ++i)
        out.data[static_cast<size_t>(i)] =
            eps_u.data[static_cast<size_t>(i)] + w * (eps_c.data[static_cast<size_t>(i)] - eps_u.data[static_cast<size_t>(i)]);
    return out;
}

// deterministic DDIM update (eta = 0)
template <class Real>
inline Tensor<Real> ddim_step(const Tensor<Real>& xt, const Tensor<Real>& eps_hat, int t, int t_prev,
                              const DiffusionSchedule<Real>& sched) {
    if (t_prev >= t) throw std::invalid_argument("ddim_step: t_prev must be < t");
    const Real ab_t = sched.alpha_bar_at(t);
    const Real ab_p = sched.alpha_bar_at(t_prev);
    if (ab_t <= Real(0)) throw std::invalid_argument("ddim_step: alpha_bar(t) is zero");
    const Real sa_t = std::sqrt(ab_t), sb_t = std::sqrt(Real(1) - ab_t);
    const Real sa_p = std::sqrt(ab_p), sb_p = std::sqrt(Real(1) - ab_p);
    Tensor<Real> out(xt.shape);
    for (int64_t i = 0; i < xt.size(); ++i) {
        const Real x0p = (xt.data[static_cast<size_t>(i)] - sb_t * eps_hat.data[static_cast<size_t>(i)]) / sa_t;
        out.data[static_cast<size_t>(i)] = sa_p * x0p + sb_p * eps_hat.data[static_cast<size_t>(i)];
    }
    return out;
}

// ---- self attention (block-internal, d_model to d_model) ----

template <class Real>
struct SelfAttention {
    int dim = 0, heads = 1;
    Parameter<Real> w_q, w_k, w_v, w_o;

    Tensor<Real> x_cache, q_, k_, v_, attn_, ctx_;

    void init(int d, int h, Rng& rng, const std::string& name) {
        dim = d;
        heads = h;
        auto rw = [&]() {
            return Tensor<Real>::randn({d, d}, rng, static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d))));
        };
        w_q.setup(name + ".w_q", ParamGroup::base, rw());
        w_k.setup(name + ".w_k", ParamGroup::base, rw());
        w_v.setup(name + ".w_v", ParamGroup::base, rw());
        w_o.setup(name + ".w_o", ParamGroup::base, rw());
    }

    void collect(ParamList<Real>& out) {
        out.push_back(&w_q);
        out.push_back(&w_k);
        out.push_back(&w_v);
        out.push_back(&w_o);
    }

    Tensor<Real> forward(const Tensor<Real>& x) {
        const int n = x.rows(), dh = dim / heads;
        const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh)));
        x_cache = x;
        q_ = matmul(x, w_q.value);
        k_ = matmul(x, w_k.value);
        v_ = matmul(x, w_v.value);
        attn_ = Tensor<Real>({heads * n, n});
        ctx_ = Tensor<Real>({n, dim});
        std::vector<Real> qh(static_cast<size_t>(n) * dh), kh(static_cast<size_t>(n) * dh), vh(static_cast<size_t>(n) * dh),
            oh(static_cast<size_t>(n) * dh);
        for (int h = 0; h < heads; ++h) {
            slice(q_, h, dh, qh);
            slice(k_, h, dh, kh);
            slice(v_, h, dh, vh);
            Real* a = attn_.row(h * n);
            std::fill(a, a + static_cast<size_t>(n) * n, Real(0));
            gemm_nt_acc(qh.data(), kh.data(), a, n, dh, n);
            for (int64_t i = 0; i < static_cast<int64_t>(n) * n; ++i) a[i] *= scale;
            softmax_rows_inplace(a, n, n);
            std::fill(oh.begin(), oh.end(), Real(0));
            gemm_nn_acc(a, vh.data(), oh.data(), n, n, dh);
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < dh; ++c) ctx_.at(r, h * dh + c) = oh[static_cast<size_t>(r) * dh + c];
        }
        return matmul(ctx_, w_o.value);
    }

    Tensor<Real> backward(const Tensor<Real>& gy) {
        const int n = gy.rows(), dh = dim / heads;
        const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh)));
        gemm_tn_acc(ctx_.data.data(), gy.data.data(), w_o.grad.data.data(), dim, n, dim);
        Tensor<Real> g_ctx({n, dim});
        gemm_nt_acc(gy.data.data(), w_o.value.data.data(), g_ctx.data.data(), n, dim, dim);
        Tensor<Real> gq({n, dim}), gk({n, dim}), gv({n, dim});
        std::vector<Real> qh(static_cast<size_t>(n) * dh), kh(static_cast<size_t>(n) * dh), vh(static_cast<size_t>(n) * dh),
            goh(static_cast<size_t>(n) * dh), ga(static_cast<size_t>(n) * n), tmp(static_cast<size_t>(n) * dh);
        for (int h = 0; h < heads; ++h) {
            slice(q_, h, dh, qh);
            slice(k_, h, dh, kh);
            slice(v_, h, dh, vh);
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < dh; ++c) goh[static_cast<size_t>(r) * dh + c] = g_ctx.at(r, h * dh + c);
            const Real* a = attn_.row(h * n);
            std::fill(ga.begin(), ga.end(), Real(0));
            gemm_nt_acc(goh.data(), vh.data(), ga.data(), n, dh, n);
            std::fill(tmp.begin(), tmp.end(), Real(0));
            gemm_tn_acc(a, goh.data(), tmp.data(), n, n, dh); // gV_h
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < dh; ++c) gv.at(r, h * dh + c) = tmp[static_cast<size_t>(r) * dh + c];
            softmax_rows_backward_inplace(a, ga.data(), n, n);
            for (auto& g : ga) g *= scale;
            std::fill(tmp.begin(), tmp.end(), Real(0));
            gemm_nn_acc(ga.data(), kh.data(), tmp.data(), n, n, dh); // gQ_h
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < dh; ++c) gq.at(r, h * dh + c) = tmp[static_cast<size_t>(r) * dh + c];
            std::fill(tmp.begin(), tmp.end(), Real(0));
            gemm_tn_acc(ga.data(), qh.data(), tmp.data(), n, n, dh); // gK_h
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < dh; ++c) gk.at(r, h * dh + c) = tmp[static_cast<size_t>(r) * dh + c];
        }
        gemm_tn_acc(x_cache.data.data(), gq.data.data(), w_q.grad.data.data(), dim, n, dim);
        gemm_tn_acc(x_cache.data.data(), gk.data.data(), w_k.grad.data.data(), dim, n, dim);
        gemm_tn_acc(x_cache.data.data(), gv.data.data(), w_v.grad.data.data(), dim, n, dim);
        Tensor<Real> gx({n, dim});
        gemm_nt_acc(gq.data.data(), w_q.value.data.data(), gx.data.data(), n, dim, dim);
        gemm_nt_acc(gk.data.data(), w_k.value.data.data(), gx.data.data(), n, dim, dim);
        gemm_nt_acc(gv.data.data(), w_v.value.data.data(), gx.data.data(), n, dim, dim);
        return gx;
    }

private:
    static Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
        Tensor<Real> c({a.rows(), b.cols()});
        gemm_nn_acc(a.data.data(), b.data.data(), c.data.data(), a.rows(), a.cols(), b.cols());
        return c;
    }
    static void slice(const Tensor<Real>& m, int h, int dh, std::vector<Real>& out) {
        for (int r = 0; r < m.rows(); ++r) {
            const Real* src = m.row(r) + static_cast<size_t>(h) * dh;
            std::copy(src, src + dh, out.begin() + static_cast<size_t>(r) * dh);
        }
    }
};

// ---- denoiser network ----

struct DenoiserConfig {
    int canvas = kCanvas;
    int patch = 4;
    int d_model = 64;
    int blocks = 2;
    int ff_mult = 2;
    int d_h = 32;
    int heads = 1;
    int d_text = 32;
    int d_img = 48;
    double lambda_scale = 0.8;
    int schedule_T = 1000;

    int tokens_per_side() const { return canvas / patch; }
    int token_count() const { return tokens_per_side() * tokens_per_side(); }
    int patch_dim() const { return patch * patch * 3; }
    int pixel_count() const { return canvas * canvas * 3; }
};

// Patch-transformer noise predictor. Each block: self-attention, a
// mode-switchable cross-attention sublayer hosting Eqs. 1-5, and a SiLU MLP,
// all pre-norm residual. Sinusoidal timestep embedding (through a small MLP)
// is added to every token.
template <class Real>
struct DenoiserNet {
    DenoiserConfig cfg;
    AttentionMode mode = AttentionMode::CA;

    Linear<Real> patch_embed; // patch_dim -> d_model
    Tensor<Real> pos_embed;   // fixed 2d sinusoidal, (tokens, d_model)
    Linear<Real> time_l1, time_l2;
    struct Block {
        LayerNorm<Real> ln1, ln2, ln3;
        SelfAttention<Real> self_attn;
        CrossAttentionLayer<Real> cross;
        Linear<Real> cross_out; // d_h -> d_model
        Linear<Real> ff1, ff2;
        Tensor<Real> ff_pre;
        bool cross_engaged = false;
    };
    std::vector<Block> blocks;
    LayerNorm<Real> ln_out;
    Linear<Real> head; // d_model -> patch_dim, zero-init

    mutable int64_t eval_count = 0;

    // forward caches
    Tensor<Real> time_emb_, time_h1_;

    void init(const DenoiserConfig& c, Rng& rng) {
        cfg = c;
        patch_embed.init(c.patch_dim(), c.d_model, rng, "net.patch_embed", ParamGroup::base);
        build_pos_embed();
        time_l1.init(c.d_model, c.d_model, rng, "net.time_l1", ParamGroup::base);
        time_l2.init(c.d_model, c.d_model, rng, "net.time_l2", ParamGroup::base);
        blocks.resize(static_cast<size_t>(c.blocks));
        for (int b = 0; b < c.blocks; ++b) {
            auto& blk = blocks[static_cast<size_t>(b)];
            std::string bn = "net.block" + std::to_string(b);
            blk.ln1.init(c.d_model, bn + ".ln1", ParamGroup::base);
            blk.ln2.init(c.d_model, bn + ".ln2", ParamGroup::base);
            blk.ln3.init(c.d_model, bn + ".ln3", ParamGroup::base);
            blk.self_attn.init(c.d_model, c.heads, rng, bn + ".self");
            blk.cross.init(c.d_model, c.d_text, c.d_img, c.d_h, c.heads, rng, bn + ".cross");
            blk.cross.lambda_scale = static_cast<Real>(c.lambda_scale);
            blk.cross_out.init(c.d_h, c.d_model, rng, bn + ".cross_out", ParamGroup::base);
            blk.ff1.init(c.d_model, c.d_model * c.ff_mult, rng, bn + ".ff1", ParamGroup::base);
            blk.ff2.init(c.d_model * c.ff_mult, c.d_model, rng, bn + ".ff2", ParamGroup::base);
        }
        ln_out.init(c.d_model, "net.ln_out", ParamGroup::base);
        head.init(c.d_model, c.patch_dim(), rng, "net.head", ParamGroup::base, /*zero_init=*/true);
    }

    void collect(ParamList<Real>& out) {
        patch_embed.collect(out);
        time_l1.collect(out);
        time_l2.collect(out);
        for (auto& blk : blocks) {
            blk.ln1.collect(out);
            blk.ln2.collect(out);
            blk.ln3.collect(out);
            blk.self_attn.collect(out);
            blk.cross.collect(out);
            blk.cross_out.collect(out);
            blk.ff1.collect(out);
            blk.ff2.collect(out);
        }
        ln_out.collect(out);
        head.collect(out);
    }

    void set_mode(AttentionMode m) {
        mode = m;
        for (auto& blk : blocks) blk.cross.mode = m;
    }

    void set_lambda(Real l) {
        for (auto& blk : blocks) blk.cross.lambda_scale = l;
    }

    // x_t: flat (canvas*canvas*3) tensor in model space -> predicted noise
    Tensor<Real> forward(const Tensor<Real>& x_t, int t, const ConditionBundle<Real>& bundle) {
        if (x_t.size() != cfg.pixel_count()) throw std::invalid_argument("denoiser: input size mismatch");
        ++eval_count;
        Tensor<Real> tokens = patchify(x_t);
        Tensor<Real> x = patch_embed.forward(tokens);
        // timestep embedding through a 2-layer SiLU mlp, added to every token
        Tensor<Real> temb = sinusoidal_time(t);
        time_h1_ = time_l1.forward(temb);
        Tensor<Real> th = time_h1_;
        for (auto& v : th.data) v = silu(v);
        time_emb_ = time_l2.forward(th);
        for (int r = 0; r < x.rows(); ++r) {
            axpy(Real(1), time_emb_.row(0), x.row(r), cfg.d_model);
            axpy(Real(1), pos_embed.row(r), x.row(r), cfg.d_model);
        }
        for (auto& blk : blocks) {
            Tensor<Real> a = blk.ln1.forward(x);
            Tensor<Real> sa = blk.self_attn.forward(a);
            add_inplace(x, sa);
            blk.cross_engaged = cross_engages(bundle);
            if (blk.cross_engaged) {
                Tensor<Real> b = blk.ln2.forward(x);
                blk.cross.cache_sources(bundle);
                Tensor<Real> cx = blk.cross.forward(b, bundle);
                Tensor<Real> co = blk.cross_out.forward(cx);
                add_inplace(x, co);
            }
            Tensor<Real> c = blk.ln3.forward(x);
            blk.ff_pre = blk.ff1.forward(c);
            Tensor<Real> f = blk.ff_pre;
            for (auto& v : f.data) v = silu(v);
            Tensor<Real> f2 = blk.ff2.forward(f);
            add_inplace(x, f2);
        }
        Tensor<Real> y = ln_out.forward(x);
        Tensor<Real> eps_tokens = head.forward(y);
        return unpatchify(eps_tokens);
    }

    struct NetGrads {
        Tensor<Real> grounding_text;
        Tensor<Real> grounding_image;
    };

    // g_eps: flat pixel grads; accumulates parameter grads, returns summed
    // grads for the grounding blocks
    NetGrads backward(const Tensor<Real>& g_eps) {
        NetGrads ng;
        Tensor<Real> g_tokens = patchify(g_eps);
        Tensor<Real> gx = head.backward(g_tokens);
        gx = ln_out.backward(gx);
        for (int b = static_cast<int>(blocks.size()) - 1; b >= 0; --b) {
            auto& blk = blocks[static_cast<size_t>(b)];
            Tensor<Real> gf2 = blk.ff2.backward(gx);
            for (int64_t i = 0; i < gf2.size(); ++i)
                gf2.data[static_cast<size_t>(i)] *= silu_grad(blk.ff_pre.data[static_cast<size_t>(i)]);
            Tensor<Real> gc = blk.ff1.backward(gf2);
            add_inplace(gx, blk.ln3.backward(gc));
            if (blk.cross_engaged) {
                Tensor<Real> gco = blk.cross_out.backward(gx);
                auto bg = blk.cross.backward(gco);
                accumulate_bundle(ng, bg);
                add_inplace(gx, blk.ln2.backward(bg.x));
            }
            Tensor<Real> gsa = blk.self_attn.backward(gx);
            add_inplace(gx, blk.ln1.backward(gsa));
        }
        // time embedding: summed over tokens
        Tensor<Real> g_temb({1, cfg.d_model});
        for (int r = 0; r < gx.rows(); ++r) axpy(Real(1), gx.row(r), g_temb.row(0), cfg.d_model);
        Tensor<Real> g_th = time_l2.backward(g_temb);
        for (int64_t i = 0; i < g_th.size(); ++i)
            g_th.data[static_cast<size_t>(i)] *= silu_grad(time_h1_.data[static_cast<size_t>(i)]);
        time_l1.backward(g_th);
        patch_embed.backward(gx);
        return ng;
    }

    bool cross_engages(const ConditionBundle<Real>& bundle) const {
        const bool concat = mode == AttentionMode::CCA || mode == AttentionMode::FCA;
        int primary = bundle.text.rows() + (concat ? bundle.grounding_text.rows() : 0);
        int dec = 0;
        if (mode == AttentionMode::DCALayout || mode == AttentionMode::FullDCA) dec += bundle.grounding_text.rows();
        if (mode == AttentionMode::FCA || mode == AttentionMode::FullDCA) dec += bundle.grounding_image.rows();
        return primary + dec > 0;
    }

    Tensor<Real> patchify(const Tensor<Real>& flat) const {
        const int side = cfg.tokens_per_side(), p = cfg.patch;
        Tensor<Real> tokens({cfg.token_count(), cfg.patch_dim()});
        for (int gy = 0; gy < side; ++gy)
            for (int gx = 0; gx < side; ++gx) {
                Real* row = tokens.row(gy * side + gx);
                int idx = 0;
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        for (int c = 0; c < 3; ++c)
                            row[idx++] = flat.data[(static_cast<size_t>(gy * p + py) * cfg.canvas + (gx * p + px)) * 3 +
                                                   static_cast<size_t>(c)];
            }
        return tokens;
    }

    Tensor<Real> unpatchify(const Tensor<Real>& tokens) const {
        const int side = cfg.tokens_per_side(), p = cfg.patch;
        Tensor<Real> flat({cfg.pixel_count()});
        for (int gy = 0; gy < side; ++gy)
            for (int gx = 0; gx < side; ++gx) {
                const Real* row = tokens.row(gy * side + gx);
                int idx = 0;
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        for (int c = 0; c < 3; ++c)
                            flat.data[(static_cast<size_t>(gy * p + py) * cfg.canvas + (gx * p + px)) * 3 +
                                      static_cast<size_t>(c)] = row[idx++];
            }
        return flat;
    }

private:
    void build_pos_embed() {
        const int side = cfg.tokens_per_side(), d = cfg.d_model;
        pos_embed = Tensor<Real>({cfg.token_count(), d});
        const int quarter = d / 4;
        for (int gy = 0; gy < side; ++gy)
            for (int gx = 0; gx < side; ++gx) {
                Real* row = pos_embed.row(gy * side + gx);
                for (int i = 0; i < quarter; ++i) {
                    double f = std::pow(10000.0, -static_cast<double>(i) / quarter);
                    row[2 * i] = static_cast<Real>(std::sin(gx * f));
                    row[2 * i + 1] = static_cast<Real>(std::cos(gx * f));
                    row[2 * quarter + 2 * i] = static_cast<Real>(std::sin(gy * f));
                    row[2 * quarter + 2 * i + 1] = static_cast<Real>(std::cos(gy * f));
                }
            }
    }

    Tensor<Real> sinusoidal_time(int t) const {
        Tensor<Real> emb({1, cfg.d_model});
        const int half = cfg.d_model / 2;
        for (int i = 0; i < half; ++i) {
            double f = std::pow(10000.0, -static_cast<double>(i) / half);
            emb.at(0, 2 * i) = static_cast<Real>(std::sin(t * f));
            emb.at(0, 2 * i + 1) = static_cast<Real>(std::cos(t * f));
        }
        return emb;
    }

    static void add_inplace(Tensor<Real>& x, const Tensor<Real>& y) {
        for (int64_t i = 0; i < x.size(); ++i) x.data[static_cast<size_t>(i)] += y.data[static_cast<size_t>(i)];
    }

    void accumulate_bundle(NetGrads& ng, const BundleGrads<Real>& bg) {
        auto acc = [](Tensor<Real>& dst, const Tensor<Real>& src) {
            if (src.size() == 0) return;
            if (dst.size() == 0) dst = src;
            else
                for (int64_t i = 0; i < dst.size(); ++i) dst.data[static_cast<size_t>(i)] += src.data[static_cast<size_t>(i)];
        };
        acc(ng.grounding_text, bg.grounding_text);
        acc(ng.grounding_image, bg.grounding_image);
    }
};

// image <-> model space
template <class Real>
inline Tensor<Real> image_to_model(const Image<Real>& img) {
    Tensor<Real> x({static_cast<int>(img.data.size())});
    for (size_t i = 0; i < img.data.size(); ++i) x.data[i] = Real(2) * img.data[i] - Real(1);
    return x;
}

template <class Real>
inline Image<Real> model_to_image(const Tensor<Real>& x, int canvas, bool clamp) {
    Image<Real> img(canvas, canvas);
    for (size_t i = 0; i < img.data.size(); ++i) {
        Real v = (x.data[i] + Real(1)) / Real(2);
        img.data[i] = clamp ? std::clamp(v, Real(0), Real(1)) : v;
    }
    return img;
}

template <class Real>
inline Tensor<Real> gaussian_image(int n, uint64_t seed) {
    Rng rng(seed);
    Tensor<Real> x({n});
    for (auto& v : x.data) v = static_cast<Real>(rng.gaussian());
    return x;
}

// predict_noise op: deterministic wrapper over the network forward
template <class Real>
inline Tensor<Real> predict_noise(DenoiserNet<Real>& net, const Tensor<Real>& x_t, int t,
                                  const ConditionBundle<Real>& bundle) {
    return net.forward(x_t, t, bundle);
}

// ---- sampling ----

struct SamplerConfig {
    int steps = 30;
    double cfg_weight = 7.5;
    double eta = 0.0;    // deterministic DDIM
    double lambda = 0.8; // image-branch scale at inference

    void validate() const {
        if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
        if (cfg_weight < 0) throw std::invalid_argument("sampler: cfg weight must be >= 0");
    }
};

inline std::vector<int> ddim_timesteps(int T, int steps) {
    std::vector<int> ts;
    for (int k = 0; k < steps; ++k) ts.push_back((k + 1) * T / steps - 1);
    return ts; // ascending; walked backwards by the sampler
}

// 30-step deterministic DDIM with classifier-free guidance. The
// unconditional pass uses the dropped-condition bundle (empty caption,
// empty-token grounding), matching training. Pixels are clamped to [0,1]
// only at the end.
template <class Real>
inline Image<Real> sample_image(DenoiserNet<Real>& net, const ConditionBundle<Real>& cond,
                                const ConditionBundle<Real>& uncond, const SamplerConfig& sc,
                                const DiffusionSchedule<Real>& sched, uint64_t seed) {
    sc.validate();
    net.set_lambda(static_cast<Real>(sc.lambda));
    Tensor<Real> x = gaussian_image<Real>(net.cfg.pixel_count(), derive_seed(seed, 0x5a3d1e));
    auto ts = ddim_timesteps(sched.T, sc.steps);
    const Real w = static_cast<Real>(sc.cfg_weight);
    for (int k = sc.steps - 1; k >= 0; --k) {
        const int t = ts[static_cast<size_t>(k)];
        const int t_prev = k > 0 ? ts[static_cast<size_t>(k - 1)] : -1;
        Tensor<Real> eps;
        if (w == Real(0)) {
            eps = net.forward(x, t, uncond);
        } else {
            Tensor<Real> eps_u = net.forward(x, t, uncond);
            Tensor<Real> eps_c = net.forward(x, t, cond);
            eps = cfg_combine(eps_u, eps_c, w);
        }
        x = ddim_step(x, eps, t, t_prev, sched);
    }
    return model_to_image(x, net.cfg.canvas, /*clamp=*/true);
}

} // namespace muse
