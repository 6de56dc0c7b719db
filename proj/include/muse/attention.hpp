#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include "muse/nn.hpp"
#include "muse/param.hpp"
#include "muse/tensor.hpp"

namespace muse {

// Layer modes.
//   CA        : softmax(Q K^T / sqrt(d)) V over text keys only
//   DCALayout : CA + lambda * attn(grounding-text keys)       (ablation arm)
//   CCA       : one softmax over [K, K_T] with values [V, V_T]
//   FCA       : CCA + lambda * attn(grounding-image keys)
//   FullDCA   : CA + lambda * attn(G_T) + lambda * attn(G_I)  (full-DCA arm)
enum class AttentionMode { CA, DCALayout, CCA, FCA, FullDCA };

inline const char* attention_mode_name(AttentionMode m) {
    switch (m) {
        case AttentionMode::CA: return "ca";
        case AttentionMode::DCALayout: return "dca_layout";
        case AttentionMode::CCA: return "cca";
        case AttentionMode::FCA: return "fca";
        case AttentionMode::FullDCA: return "full_dca";
    }
    return "?";
}

inline AttentionMode attention_mode_from_name(const std::string& s) {
    if (s == "ca") return AttentionMode::CA;
    if (s == "dca_layout") return AttentionMode::DCALayout;
    if (s == "cca") return AttentionMode::CCA;
    if (s == "fca") return AttentionMode::FCA;
    if (s == "full_dca") return AttentionMode::FullDCA;
    throw std::invalid_argument("unknown attention mode: " + s);
}

// Condition inputs for one sample. Any block may have zero rows; that is the
// dropped-condition representation and removes the block from the
// computation entirely.
template <class Real>
struct ConditionBundle {
    Tensor<Real> text;            // (L, d_text)
    Tensor<Real> grounding_text;  // (N, d_text) G_T rows
    Tensor<Real> grounding_image; // (4N, d_img) G_I rows

    static ConditionBundle empty(int d_text, int d_img) {
        ConditionBundle b;
        b.text = Tensor<Real>({0, d_text});
        b.grounding_text = Tensor<Real>({0, d_text});
        b.grounding_image = Tensor<Real>({0, d_img});
        return b;
    }
};

template <class Real>
struct BundleGrads {
    Tensor<Real> x;               // d loss / d query input
    Tensor<Real> grounding_text;  // d loss / d G_T rows
    Tensor<Real> grounding_image; // d loss / d G_I rows
};

// One cross-attention layer holding all projections of Eqs. 1-5. The mode
// selects which projections participate; lambda scales the decoupled terms.
template <class Real>
struct CrossAttentionLayer {
    AttentionMode mode = AttentionMode::CA;
    Real lambda_scale = static_cast<Real>(0.8);
    int d_model = 0, d_text = 0, d_img = 0, d_h = 0, n_heads = 1;

    Parameter<Real> w_q;  // (d_model, d_h)
    Parameter<Real> w_k;  // (d_text, d_h)
    Parameter<Real> w_v;  // (d_text, d_h)
    Parameter<Real> w_kt; // (d_text, d_h)  grounding-text key proj
    Parameter<Real> w_vt; // (d_text, d_h)
    Parameter<Real> w_ki; // (d_img, d_h)   grounding-image key proj
    Parameter<Real> w_vi; // (d_img, d_h)

    void init(int dm, int dt, int di, int dh, int heads, Rng& rng, const std::string& name) {
        if (dh % heads != 0) throw std::invalid_argument("attention: d_h must divide by heads");
        d_model = dm;
        d_text = dt;
        d_img = di;
        d_h = dh;
        n_heads = heads;
        auto randw = [&](int in) {
            return Tensor<Real>::randn({in, dh}, rng, static_cast<Real>(1.0 / std::sqrt(static_cast<double>(in))));
        };
        w_q.setup(name + ".w_q", ParamGroup::base, randw(dm));
        w_k.setup(name + ".w_k", ParamGroup::base, randw(dt));
        w_v.setup(name + ".w_v", ParamGroup::base, randw(dt));
        w_kt.setup(name + ".w_kt", ParamGroup::layout, randw(dt));
        w_vt.setup(name + ".w_vt", ParamGroup::layout, randw(dt));
        w_ki.setup(name + ".w_ki", ParamGroup::subject, randw(di));
        w_vi.setup(name + ".w_vi", ParamGroup::subject, randw(di));
    }

    void collect(ParamList<Real>& out) {
        out.push_back(&w_q);
        out.push_back(&w_k);
        out.push_back(&w_v);
        out.push_back(&w_kt);
        out.push_back(&w_vt);
        out.push_back(&w_ki);
        out.push_back(&w_vi);
    }

    // Copies the pretrained text projections into the grounding-text
    // projections (stage-1 initialization).
    void init_grounding_text_from_base() {
        w_kt.value = w_k.value;
        w_vt.value = w_v.value;
    }

    bool uses_concat_grounding() const { return mode == AttentionMode::CCA || mode == AttentionMode::FCA; }
    bool uses_decoupled_grounding_text() const {
        return mode == AttentionMode::DCALayout || mode == AttentionMode::FullDCA;
    }
    bool uses_decoupled_image() const { return mode == AttentionMode::FCA || mode == AttentionMode::FullDCA; }

    // ---- forward ----

    // x: (L_q, d_model) -> (L_q, d_h). With every participating key block
    // empty the output is the zero tensor (the hosting network treats the
    // sublayer as absent); the compute_* wrappers enforce the op-level error
    // contracts instead.
    Tensor<Real> forward(const Tensor<Real>& x, const ConditionBundle<Real>& bundle) {
        if (x.cols() != d_model) throw std::invalid_argument("attention: query dim mismatch " + x.shape_str());
        check_block(bundle.text, d_text, "text");
        check_block(bundle.grounding_text, d_text, "grounding_text");
        check_block(bundle.grounding_image, d_img, "grounding_image");

        const int lq = x.rows();
        x_cache_ = x;
        q_ = Tensor<Real>({lq, d_h});
        gemm_nn_acc(x.data.data(), w_q.value.data.data(), q_.data.data(), lq, d_model, d_h);

        primary_.reset();
        dec_text_.reset();
        dec_img_.reset();

        // primary keys: text, plus G_T rows when the mode concatenates
        const int l_text = bundle.text.rows();
        const int n_gt = bundle.grounding_text.rows();
        const bool concat = uses_concat_grounding();
        const int l_primary = l_text + (concat ? n_gt : 0);

        Tensor<Real> out({lq, d_h});
        if (l_primary > 0) {
            primary_.k = Tensor<Real>({l_primary, d_h});
            primary_.v = Tensor<Real>({l_primary, d_h});
            if (l_text > 0) {
                gemm_nn_acc(bundle.text.data.data(), w_k.value.data.data(), primary_.k.data.data(), l_text, d_text, d_h);
                gemm_nn_acc(bundle.text.data.data(), w_v.value.data.data(), primary_.v.data.data(), l_text, d_text, d_h);
            }
            if (concat && n_gt > 0) {
                gemm_nn_acc(bundle.grounding_text.data.data(), w_kt.value.data.data(), primary_.k.row(l_text), n_gt,
                            d_text, d_h);
                gemm_nn_acc(bundle.grounding_text.data.data(), w_vt.value.data.data(), primary_.v.row(l_text), n_gt,
                            d_text, d_h);
            }
            attn_term_forward(primary_, Real(1), out);
        }
        if (uses_decoupled_grounding_text() && n_gt > 0 && lambda_scale != Real(0)) {
            dec_text_.k = Tensor<Real>({n_gt, d_h});
            dec_text_.v = Tensor<Real>({n_gt, d_h});
            gemm_nn_acc(bundle.grounding_text.data.data(), w_kt.value.data.data(), dec_text_.k.data.data(), n_gt,
                        d_text, d_h);
            gemm_nn_acc(bundle.grounding_text.data.data(), w_vt.value.data.data(), dec_text_.v.data.data(), n_gt,
                        d_text, d_h);
            attn_term_forward(dec_text_, lambda_scale, out);
        }
        const int n_gi = bundle.grounding_image.rows();
        if (uses_decoupled_image() && n_gi > 0 && lambda_scale != Real(0)) {
            dec_img_.k = Tensor<Real>({n_gi, d_h});
            dec_img_.v = Tensor<Real>({n_gi, d_h});
            gemm_nn_acc(bundle.grounding_image.data.data(), w_ki.value.data.data(), dec_img_.k.data.data(), n_gi,
                        d_img, d_h);
            gemm_nn_acc(bundle.grounding_image.data.data(), w_vi.value.data.data(), dec_img_.v.data.data(), n_gi,
                        d_img, d_h);
            attn_term_forward(dec_img_, lambda_scale, out);
        }
        bundle_shape_ = {l_text, n_gt, n_gi};
        return out;
    }

    // ---- backward ----

    BundleGrads<Real> backward(const Tensor<Real>& gy) {
        const int lq = gy.rows();
        const int l_text = bundle_shape_[0], n_gt = bundle_shape_[1], n_gi = bundle_shape_[2];
        Tensor<Real> gq({lq, d_h});
        BundleGrads<Real> grads;
        grads.grounding_text = Tensor<Real>({n_gt, d_text});
        grads.grounding_image = Tensor<Real>({n_gi, d_img});

        if (primary_.active()) {
            Tensor<Real> gk, gv;
            attn_term_backward(primary_, Real(1), gy, gq, gk, gv);
            if (l_text > 0) {
                // text encoder is frozen; only the projection grads are needed
                gemm_tn_acc(x_text_ptr_cache(), gk.data.data(), w_k.grad.data.data(), d_text, l_text, d_h);
                gemm_tn_acc(x_text_ptr_cache(), gv.data.data(), w_v.grad.data.data(), d_text, l_text, d_h);
            }
            if (uses_concat_grounding() && n_gt > 0) {
                const Real* gt = gtext_ptr_cache();
                gemm_tn_acc(gt, gk.row(l_text), w_kt.grad.data.data(), d_text, n_gt, d_h);
                gemm_tn_acc(gt, gv.row(l_text), w_vt.grad.data.data(), d_text, n_gt, d_h);
                gemm_nt_acc(gk.row(l_text), w_kt.value.data.data(), grads.grounding_text.data.data(), n_gt, d_h, d_text);
                gemm_nt_acc(gv.row(l_text), w_vt.value.data.data(), grads.grounding_text.data.data(), n_gt, d_h, d_text);
            }
        }
        if (dec_text_.active()) {
            Tensor<Real> gk, gv;
            attn_term_backward(dec_text_, lambda_scale, gy, gq, gk, gv);
            const Real* gt = gtext_ptr_cache();
            gemm_tn_acc(gt, gk.data.data(), w_kt.grad.data.data(), d_text, n_gt, d_h);
            gemm_tn_acc(gt, gv.data.data(), w_vt.grad.data.data(), d_text, n_gt, d_h);
            gemm_nt_acc(gk.data.data(), w_kt.value.data.data(), grads.grounding_text.data.data(), n_gt, d_h, d_text);
            gemm_nt_acc(gv.data.data(), w_vt.value.data.data(), grads.grounding_text.data.data(), n_gt, d_h, d_text);
        }
        if (dec_img_.active()) {
            Tensor<Real> gk, gv;
            attn_term_backward(dec_img_, lambda_scale, gy, gq, gk, gv);
            const Real* gi = gimg_ptr_cache();
            gemm_tn_acc(gi, gk.data.data(), w_ki.grad.data.data(), d_img, n_gi, d_h);
            gemm_tn_acc(gi, gv.data.data(), w_vi.grad.data.data(), d_img, n_gi, d_h);
            gemm_nt_acc(gk.data.data(), w_ki.value.data.data(), grads.grounding_image.data.data(), n_gi, d_h, d_img);
            gemm_nt_acc(gv.data.data(), w_vi.value.data.data(), grads.grounding_image.data.data(), n_gi, d_h, d_img);
        }

        gemm_tn_acc(x_cache_.data.data(), gq.data.data(), w_q.grad.data.data(), d_model, lq, d_h);
        grads.x = Tensor<Real>({lq, d_model});
        gemm_nt_acc(gq.data.data(), w_q.value.data.data(), grads.x.data.data(), lq, d_h, d_model);
        return grads;
    }

    // Keeps the encoded source blocks alive for backward.
    void cache_sources(const ConditionBundle<Real>& bundle) {
        text_src_ = bundle.text;
        gtext_src_ = bundle.grounding_text;
        gimg_src_ = bundle.grounding_image;
    }

    // attention weights of the last forward (debug/inspection)
    const Tensor<Real>& last_primary_attn() const { return primary_.attn; }
    const Tensor<Real>& last_decoupled_text_attn() const { return dec_text_.attn; }
    const Tensor<Real>& last_decoupled_image_attn() const { return dec_img_.attn; }

private:
    struct AttnTerm {
        Tensor<Real> k, v;
        Tensor<Real> attn; // (heads * L_q, L_k) softmaxed weights
        void reset() {
            k = Tensor<Real>();
            v = Tensor<Real>();
            attn = Tensor<Real>();
        }
        bool active() const { return k.ndim() == 2 && k.rows() > 0; }
    };

    static void check_block(const Tensor<Real>& t, int want_cols, const char* what) {
        if (t.ndim() != 2 || (t.rows() > 0 && t.cols() != want_cols))
            throw std::invalid_argument(std::string("attention: bad ") + what + " block shape " + t.shape_str());
    }

    void attn_term_forward(AttnTerm& term, Real coeff, Tensor<Real>& out) {
        const int lq = q_.rows();
        const int lk = term.k.rows();
        const int dh_head = d_h / n_heads;
        const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh_head)));
        term.attn = Tensor<Real>({n_heads * lq, lk});
        std::vector<Real> qh(static_cast<size_t>(lq) * dh_head), kh(static_cast<size_t>(lk) * dh_head),
            vh(static_cast<size_t>(lk) * dh_head), oh(static_cast<size_t>(lq) * dh_head);
        for (int h = 0; h < n_heads; ++h) {
            slice_head(q_, h, dh_head, qh);
            slice_head(term.k, h, dh_head, kh);
            slice_head(term.v, h, dh_head, vh);
            Real* a = term.attn.row(h * lq);
            std::fill(a, a + static_cast<size_t>(lq) * lk, Real(0));
            gemm_nt_acc(qh.data(), kh.data(), a, lq, dh_head, lk);
            for (int64_t i = 0; i < static_cast<int64_t>(lq) * lk; ++i) a[i] *= scale;
            softmax_rows_inplace(a, lq, lk);
            std::fill(oh.begin(), oh.end(), Real(0));
            gemm_nn_acc(a, vh.data(), oh.data(), lq, lk, dh_head);
            for (int r = 0; r < lq; ++r)
                for (int c = 0; c < dh_head; ++c)
                    out.at(r, h * dh_head + c) += coeff * oh[static_cast<size_t>(r) * dh_head + c];
        }
    }

    void attn_term_backward(AttnTerm& term, Real coeff, const Tensor<Real>& gy, Tensor<Real>& gq_full,
                            Tensor<Real>& gk_full, Tensor<Real>& gv_full) {
        const int lq = gy.rows();
        const int lk = term.k.rows();
        const int dh_head = d_h / n_heads;
        const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh_head)));
        gk_full = Tensor<Real>({lk, d_h});
        gv_full = Tensor<Real>({lk, d_h});
        std::vector<Real> qh(static_cast<size_t>(lq) * dh_head), kh(static_cast<size_t>(lk) * dh_head),
            vh(static_cast<size_t>(lk) * dh_head), goh(static_cast<size_t>(lq) * dh_head);
        std::vector<Real> ga(static_cast<size_t>(lq) * lk), gkh(static_cast<size_t>(lk) * dh_head),
            gvh(static_cast<size_t>(lk) * dh_head), gqh(static_cast<size_t>(lq) * dh_head);
        for (int h = 0; h < n_heads; ++h) {
            slice_head(q_, h, dh_head, qh);
            slice_head(term.k, h, dh_head, kh);
            slice_head(term.v, h, dh_head, vh);
            for (int r = 0; r < lq; ++r)
                for (int c = 0; c < dh_head; ++c)
                    goh[static_cast<size_t>(r) * dh_head + c] = coeff * gy.at(r, h * dh_head + c);
            const Real* a = term.attn.row(h * lq);
            std::fill(ga.begin(), ga.end(), Real(0));
            gemm_nt_acc(goh.data(), vh.data(), ga.data(), lq, dh_head, lk);
            std::fill(gvh.begin(), gvh.end(), Real(0));
            gemm_tn_acc(a, goh.data(), gvh.data(), lk, lq, dh_head); // gV = A^T gOut
            softmax_rows_backward_inplace(a, ga.data(), lq, lk);
            for (auto& g : ga) g *= scale;
            std::fill(gqh.begin(), gqh.end(), Real(0));
            gemm_nn_acc(ga.data(), kh.data(), gqh.data(), lq, lk, dh_head);
            std::fill(gkh.begin(), gkh.end(), Real(0));
            gemm_tn_acc(ga.data(), qh.data(), gkh.data(), lk, lq, dh_head);
            for (int r = 0; r < lq; ++r)
                for (int c = 0; c < dh_head; ++c) gq_full.at(r, h * dh_head + c) += gqh[static_cast<size_t>(r) * dh_head + c];
            for (int r = 0; r < lk; ++r)
                for (int c = 0; c < dh_head; ++c) {
                    gk_full.at(r, h * dh_head + c) += gkh[static_cast<size_t>(r) * dh_head + c];
                    gv_full.at(r, h * dh_head + c) += gvh[static_cast<size_t>(r) * dh_head + c];
                }
        }
    }

    static void slice_head(const Tensor<Real>& m, int h, int dh_head, std::vector<Real>& out) {
        const int rows = m.rows();
        for (int r = 0; r < rows; ++r) {
            const Real* src = m.row(r) + static_cast<size_t>(h) * dh_head;
            std::copy(src, src + dh_head, out.begin() + static_cast<size_t>(r) * dh_head);
        }
    }

    const Real* x_text_ptr_cache() const { return text_src_.data.data(); }
    const Real* gtext_ptr_cache() const { return gtext_src_.data.data(); }
    const Real* gimg_ptr_cache() const { return gimg_src_.data.data(); }

    Tensor<Real> x_cache_, q_;
    Tensor<Real> text_src_, gtext_src_, gimg_src_;
    AttnTerm primary_, dec_text_, dec_img_;
    std::array<int, 3> bundle_shape_ = {0, 0, 0};
};

// ---- op-level wrappers (contract-checked entry points) ----

// Eq. 1
template <class Real>
inline Tensor<Real> compute_ca(CrossAttentionLayer<Real>& layer, const Tensor<Real>& x, const Tensor<Real>& text) {
    if (text.rows() == 0) throw std::invalid_argument("compute_ca: empty text tokens");
    AttentionMode keep = layer.mode;
    layer.mode = AttentionMode::CA;
    ConditionBundle<Real> b = ConditionBundle<Real>::empty(layer.d_text, layer.d_img);
    b.text = text;
    layer.cache_sources(b);
    Tensor<Real> out = layer.forward(x, b);
    layer.mode = keep;
    return out;
}

// Eq. 2 (image-decoupled variant)
template <class Real>
inline Tensor<Real> compute_dca(CrossAttentionLayer<Real>& layer, const Tensor<Real>& x, const Tensor<Real>& text,
                                const Tensor<Real>& image_tokens) {
    if (text.rows() == 0) throw std::invalid_argument("compute_dca: empty text tokens");
    AttentionMode keep = layer.mode;
    layer.mode = AttentionMode::FCA; // FCA with no grounding text is exactly Eq. 2
    ConditionBundle<Real> b = ConditionBundle<Real>::empty(layer.d_text, layer.d_img);
    b.text = text;
    b.grounding_image = image_tokens;
    layer.cache_sources(b);
    Tensor<Real> out = layer.forward(x, b);
    layer.mode = keep;
    return out;
}

// Eq. 4
template <class Real>
inline Tensor<Real> compute_cca(CrossAttentionLayer<Real>& layer, const Tensor<Real>& x, const Tensor<Real>& text,
                                const Tensor<Real>& grounding_text) {
    if (text.rows() == 0 && grounding_text.rows() == 0)
        throw std::invalid_argument("compute_cca: both token blocks empty");
    AttentionMode keep = layer.mode;
    layer.mode = AttentionMode::CCA;
    ConditionBundle<Real> b = ConditionBundle<Real>::empty(layer.d_text, layer.d_img);
    b.text = text;
    b.grounding_text = grounding_text;
    layer.cache_sources(b);
    Tensor<Real> out = layer.forward(x, b);
    layer.mode = keep;
    return out;
}

// Eq. 5
template <class Real>
inline Tensor<Real> compute_fca(CrossAttentionLayer<Real>& layer, const Tensor<Real>& x,
                                const ConditionBundle<Real>& bundle) {
    if (bundle.text.rows() == 0 && bundle.grounding_text.rows() == 0)
        throw std::invalid_argument("compute_fca: no primary tokens");
    AttentionMode keep = layer.mode;
    layer.mode = AttentionMode::FCA;
    layer.cache_sources(bundle);
    Tensor<Real> out = layer.forward(x, bundle);
    layer.mode = keep;
    return out;
}

} // namespace muse
