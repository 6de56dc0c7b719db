#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "muse/attention.hpp"
#include "muse/nn.hpp"
#include "muse/param.hpp"
#include "muse/rng.hpp"

namespace muse {

inline constexpr int kMaxSubjects = 10;    // padded subject slots per sample
inline constexpr int kResamplerTokens = 4; // image tokens per subject

struct BoundingBox {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    bool valid() const { return 0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0; }
    double area() const { return (x1 - x0) * (y1 - y0); }
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }
};

// sin(2^j pi c), cos(2^j pi c) for j = 0..freq_count/2-1 per coordinate;
// 4 * freq_count values total (64 at the default frequency of 16).
template <class Real>
inline Tensor<Real> fourier_embed(const BoundingBox& b, int freq_count = 16) {
    if (!b.valid()) throw std::invalid_argument("fourier_embed: coordinates outside [0,1] or degenerate box");
    if (freq_count <= 0 || freq_count % 2 != 0) throw std::invalid_argument("fourier_embed: freq_count must be even");
    const double coords[4] = {b.x0, b.y0, b.x1, b.y1};
    Tensor<Real> out({4 * freq_count});
    int idx = 0;
    for (double c : coords) {
        for (int j = 0; j < freq_count / 2; ++j) {
            const double w = std::ldexp(3.14159265358979323846, j) * c; // 2^j * pi * c
            out.at(idx++) = static_cast<Real>(std::sin(w));
            out.at(idx++) = static_cast<Real>(std::cos(w));
        }
    }
    return out;
}

// ---- perceiver resampler ----

// Forward caches live outside the module so several subjects can be
// resampled per sample before any backward runs.
template <class Real>
struct ResamplerState {
    struct LayerState {
        Tensor<Real> q_in, q, k, v, attn, attn_out;
    };
    std::vector<LayerState> layers;
    Tensor<Real> patches;
};

// Learnable query tokens attending over subject patch tokens; emits exactly
// kResamplerTokens tokens of dim d_img regardless of patch count.
template <class Real>
struct Resampler {
    int d_img = 0, depth = 0;
    Parameter<Real> queries; // (4, d_img)

    struct Layer {
        Parameter<Real> w_q, w_k, w_v, w_o; // all (d_img, d_img)
    };
    std::vector<Layer> layers;

    void init(int di, int d, Rng& rng, const std::string& name) {
        d_img = di;
        depth = d;
        queries.setup(name + ".queries", ParamGroup::subject,
                      Tensor<Real>::randn({kResamplerTokens, di}, rng, static_cast<Real>(0.5)));
        layers.resize(static_cast<size_t>(depth));
        for (int l = 0; l < depth; ++l) {
            auto randw = [&]() {
                return Tensor<Real>::randn({di, di}, rng, static_cast<Real>(1.0 / std::sqrt(static_cast<double>(di))));
            };
            std::string ln = name + ".layer" + std::to_string(l);
            layers[static_cast<size_t>(l)].w_q.setup(ln + ".w_q", ParamGroup::subject, randw());
            layers[static_cast<size_t>(l)].w_k.setup(ln + ".w_k", ParamGroup::subject, randw());
            layers[static_cast<size_t>(l)].w_v.setup(ln + ".w_v", ParamGroup::subject, randw());
            layers[static_cast<size_t>(l)].w_o.setup(ln + ".w_o", ParamGroup::subject, randw());
        }
    }

    void collect(ParamList<Real>& out) {
        out.push_back(&queries);
        for (auto& l : layers) {
            out.push_back(&l.w_q);
            out.push_back(&l.w_k);
            out.push_back(&l.w_v);
            out.push_back(&l.w_o);
        }
    }

    // patch_tokens: (P, d_img), P >= 1 -> (4, d_img). Per layer:
    // x <- x + W_o * attn(x W_q, patches W_k, patches W_v)
    Tensor<Real> forward(const Tensor<Real>& patch_tokens, ResamplerState<Real>& st) const {
        if (patch_tokens.rows() < 1) throw std::invalid_argument("resampler: empty patch token set");
        if (patch_tokens.cols() != d_img) throw std::invalid_argument("resampler: patch dim mismatch");
        st.layers.assign(static_cast<size_t>(depth), {});
        st.patches = patch_tokens;
        Tensor<Real> x = queries.value;
        const int p = patch_tokens.rows();
        const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d_img)));
        for (int li = 0; li < depth; ++li) {
            const Layer& l = layers[static_cast<size_t>(li)];
            auto& ls = st.layers[static_cast<size_t>(li)];
            ls.q_in = x;
            ls.q = matmul(x, l.w_q.value);
            ls.k = matmul(patch_tokens, l.w_k.value);
            ls.v = matmul(patch_tokens, l.w_v.value);
            Tensor<Real> scores({kResamplerTokens, p});
            gemm_nt_acc(ls.q.data.data(), ls.k.data.data(), scores.data.data(), kResamplerTokens, d_img, p);
            for (auto& s : scores.data) s *= scale;
            softmax_rows_inplace(scores.data.data(), kResamplerTokens, p);
            ls.attn = scores;
            ls.attn_out = matmul(scores, ls.v);
            Tensor<Real> proj = matmul(ls.attn_out, l.w_o.value);
            for (int64_t i = 0; i < x.size(); ++i) x.data[static_cast<size_t>(i)] += proj.data[static_cast<size_t>(i)];
        }
        return x;
    }

    // gy: (4, d_img) -> gradient w.r.t. patch tokens; accumulates weight grads.
    Tensor<Real> backward(const Tensor<Real>& gy, const ResamplerState<Real>& st) {
        const Real scale = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d_img)));
        const int p = st.patches.rows();
        Tensor<Real> gx = gy;
        Tensor<Real> g_patches({p, d_img});
        for (int li = depth - 1; li >= 0; --li) {
            Layer& l = layers[static_cast<size_t>(li)];
            const auto& ls = st.layers[static_cast<size_t>(li)];
            Tensor<Real> g_proj = gx; // residual passes gx through unchanged
            gemm_tn_acc(ls.attn_out.data.data(), g_proj.data.data(), l.w_o.grad.data.data(), d_img, kResamplerTokens,
                        d_img);
            Tensor<Real> g_attn_out({kResamplerTokens, d_img});
            gemm_nt_acc(g_proj.data.data(), l.w_o.value.data.data(), g_attn_out.data.data(), kResamplerTokens, d_img,
                        d_img);
            Tensor<Real> ga({kResamplerTokens, p});
            gemm_nt_acc(g_attn_out.data.data(), ls.v.data.data(), ga.data.data(), kResamplerTokens, d_img, p);
            Tensor<Real> gv({p, d_img});
            gemm_tn_acc(ls.attn.data.data(), g_attn_out.data.data(), gv.data.data(), p, kResamplerTokens, d_img);
            softmax_rows_backward_inplace(ls.attn.data.data(), ga.data.data(), kResamplerTokens, p);
            for (auto& g : ga.data) g *= scale;
            Tensor<Real> gq({kResamplerTokens, d_img});
            gemm_nn_acc(ga.data.data(), ls.k.data.data(), gq.data.data(), kResamplerTokens, p, d_img);
            Tensor<Real> gk({p, d_img});
            gemm_tn_acc(ga.data.data(), ls.q.data.data(), gk.data.data(), p, kResamplerTokens, d_img);
            gemm_tn_acc(ls.q_in.data.data(), gq.data.data(), l.w_q.grad.data.data(), d_img, kResamplerTokens, d_img);
            gemm_tn_acc(st.patches.data.data(), gk.data.data(), l.w_k.grad.data.data(), d_img, p, d_img);
            gemm_tn_acc(st.patches.data.data(), gv.data.data(), l.w_v.grad.data.data(), d_img, p, d_img);
            gemm_nt_acc(gk.data.data(), l.w_k.value.data.data(), g_patches.data.data(), p, d_img, d_img);
            gemm_nt_acc(gv.data.data(), l.w_v.value.data.data(), g_patches.data.data(), p, d_img, d_img);
            gemm_nt_acc(gq.data.data(), l.w_q.value.data.data(), gx.data.data(), kResamplerTokens, d_img, d_img);
        }
        for (int64_t i = 0; i < queries.value.size(); ++i)
            queries.grad.data[static_cast<size_t>(i)] += gx.data[static_cast<size_t>(i)];
        return g_patches;
    }

private:
    static Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
        Tensor<Real> c({a.rows(), b.cols()});
        gemm_nn_acc(a.data.data(), b.data.data(), c.data.data(), a.rows(), a.cols(), b.cols());
        return c;
    }
};

template <class Real>
inline Tensor<Real> resample_image(const Resampler<Real>& r, const Tensor<Real>& patch_tokens) {
    ResamplerState<Real> st;
    return r.forward(patch_tokens, st);
}

// ---- per-subject conditions, padding, dropout ----

template <class Real>
struct SubjectCondition {
    int class_token_id = -1;
    Tensor<Real> f_text;            // (d_text) encoded class token
    Tensor<Real> reference_patches; // (P, d_img) encoded reference patch tokens
    BoundingBox box;
    bool present = false;
};

// Subject list padded to kMaxSubjects; padding slots have present = false
// and are represented with the builder's trainable empty tokens.
template <class Real>
struct SubjectConditionSet {
    std::vector<SubjectCondition<Real>> subjects;

    void pad() { subjects.resize(kMaxSubjects); }

    int present_count() const {
        int n = 0;
        for (const auto& s : subjects)
            if (s.present) ++n;
        return n;
    }
};

struct DropoutDecision {
    bool drop_caption = false;
    bool drop_subject_conditions = false;
};

// Per-sample curriculum dropout: the caption and the whole subject-condition
// group are dropped independently with probability p_drop. Deterministic
// given the seed.
inline DropoutDecision pad_and_dropout_decision(double p_drop, uint64_t rng_seed) {
    if (p_drop < 0.0 || p_drop > 1.0) throw std::invalid_argument("pad_and_dropout: bad probability");
    Rng rng(derive_seed(rng_seed, 0x9d0u));
    DropoutDecision d;
    d.drop_caption = rng.bernoulli(p_drop);
    d.drop_subject_conditions = rng.bernoulli(p_drop);
    return d;
}

// ---- grounding token builders ----

// Trainable grounding machinery: Eq. 3 text-grounding MLP, Eq. 6 image box
// MLP, the Table-4 concat-fusion ablation MLP, the resampler, and the empty
// tokens used for padding.
template <class Real>
struct GroundingBuilder {
    int d_text = 0, d_img = 0, freq_count = 16, fourier_dim = 64;
    bool concat_image_grounding = false; // ablation arm switch

    MlpSiLU<Real> text_mlp;   // (d_text + 4*freq) -> d_text        [layout]
    MlpSiLU<Real> box_mlp;    // (4*freq) -> d_img                  [subject]
    MlpSiLU<Real> concat_mlp; // (d_img + 4*freq) -> d_img          [subject]
    Resampler<Real> resampler;

    Parameter<Real> empty_text_token;    // (1, d_text)   [layout]
    Parameter<Real> empty_box_embedding; // (1, d_img)    [layout]
    Parameter<Real> empty_image_tokens;  // (4, d_img)    [subject]

    void init(int dt, int di, int freq, int hidden, int resampler_depth, Rng& rng, const std::string& name) {
        d_text = dt;
        d_img = di;
        freq_count = freq;
        fourier_dim = 4 * freq;
        text_mlp.init(dt + fourier_dim, hidden, dt, rng, name + ".text_mlp", ParamGroup::layout);
        box_mlp.init(fourier_dim, hidden, di, rng, name + ".box_mlp", ParamGroup::subject);
        concat_mlp.init(di + fourier_dim, hidden, di, rng, name + ".concat_mlp", ParamGroup::subject);
        resampler.init(di, resampler_depth, rng, name + ".resampler");
        empty_text_token.setup(name + ".empty_text", ParamGroup::layout,
                               Tensor<Real>::randn({1, dt}, rng, static_cast<Real>(0.1)));
        empty_box_embedding.setup(name + ".empty_box", ParamGroup::layout,
                                  Tensor<Real>::randn({1, di}, rng, static_cast<Real>(0.1)));
        empty_image_tokens.setup(name + ".empty_image", ParamGroup::subject,
                                 Tensor<Real>::randn({kResamplerTokens, di}, rng, static_cast<Real>(0.1)));
    }

    void collect(ParamList<Real>& out) {
        text_mlp.collect(out);
        box_mlp.collect(out);
        concat_mlp.collect(out);
        resampler.collect(out);
        out.push_back(&empty_text_token);
        out.push_back(&empty_box_embedding);
        out.push_back(&empty_image_tokens);
    }

    // Eq. 3 for one subject: G_T = MLP([f_T, Fourier(B)]). Stand-alone op;
    // batched assembly below is what training uses.
    Tensor<Real> build_text_grounding(const Tensor<Real>& f_t, const BoundingBox& b) {
        if (f_t.size() != d_text) throw std::invalid_argument("build_text_grounding: f_T dim mismatch");
        Tensor<Real> cat({1, d_text + fourier_dim});
        fill_text_concat_row(cat.row(0), f_t, b);
        return text_mlp.forward(cat);
    }

    // Eq. 6: box embedding MLP(Fourier(B)) added to each of the 4 tokens.
    Tensor<Real> build_image_grounding(const Tensor<Real>& tokens, const BoundingBox& b) {
        check_tokens(tokens, "build_image_grounding");
        Tensor<Real> fe_row({1, fourier_dim});
        fill_fourier_row(fe_row.row(0), b);
        Tensor<Real> box_emb = box_mlp.forward(fe_row); // (1, d_img)
        Tensor<Real> out = tokens;
        for (int j = 0; j < kResamplerTokens; ++j) axpy(Real(1), box_emb.row(0), out.row(j), d_img);
        return out;
    }

    // Table-4 "Concatenated Grounding" arm: per-token concat+MLP fusion.
    Tensor<Real> build_concat_image_grounding(const Tensor<Real>& tokens, const BoundingBox& b) {
        check_tokens(tokens, "build_concat_image_grounding");
        Tensor<Real> cat({kResamplerTokens, d_img + fourier_dim});
        Tensor<Real> fe = fourier_embed<Real>(b, freq_count);
        for (int j = 0; j < kResamplerTokens; ++j) {
            for (int i = 0; i < d_img; ++i) cat.at(j, i) = tokens.at(j, i);
            for (int i = 0; i < fourier_dim; ++i) cat.at(j, d_img + i) = fe.at(i);
        }
        return concat_mlp.forward(cat);
    }

    void fill_text_concat_row(Real* row, const Tensor<Real>& f_t, const BoundingBox& b) {
        for (int i = 0; i < d_text; ++i) row[i] = f_t.data[static_cast<size_t>(i)];
        fill_fourier_row(row + d_text, b);
    }

    void fill_fourier_row(Real* row, const BoundingBox& b) {
        Tensor<Real> fe = fourier_embed<Real>(b, freq_count);
        std::copy(fe.data.begin(), fe.data.end(), row);
    }

private:
    void check_tokens(const Tensor<Real>& tokens, const char* who) const {
        if (tokens.rows() != kResamplerTokens || tokens.cols() != d_img)
            throw std::invalid_argument(std::string(who) + ": expected (4, d_img) tokens");
    }
};

// ---- per-sample bundle assembly (pad_and_dropout composed with builders) ----

// Builds the attention-ready ConditionBundle for one sample and retains the
// forward state needed to push gradients back into the grounding parameters.
template <class Real>
struct BundleAssembler {
    GroundingBuilder<Real>* gb = nullptr;
    bool include_image = false;
    bool include_text_grounding = true;

    ConditionBundle<Real> assemble(const Tensor<Real>& prompt_tokens, const SubjectConditionSet<Real>& conds,
                                   const DropoutDecision& drop) {
        if (static_cast<int>(conds.subjects.size()) != kMaxSubjects)
            throw std::invalid_argument("bundle: subject set must be padded to 10 slots");
        ConditionBundle<Real> bundle = ConditionBundle<Real>::empty(gb->d_text, gb->d_img);
        bundle.text = drop.drop_caption ? Tensor<Real>({0, gb->d_text}) : prompt_tokens;

        slot_is_real_.assign(kMaxSubjects, false);
        mlp_row_of_slot_.assign(kMaxSubjects, -1);
        rs_states_.clear();
        rs_slot_.clear();

        const bool use_real = !drop.drop_subject_conditions;
        int n_real = 0;
        for (int s = 0; s < kMaxSubjects; ++s)
            if (use_real && conds.subjects[static_cast<size_t>(s)].present) {
                slot_is_real_[static_cast<size_t>(s)] = true;
                mlp_row_of_slot_[static_cast<size_t>(s)] = n_real++;
            }

        if (include_text_grounding) {
            bundle.grounding_text = Tensor<Real>({kMaxSubjects, gb->d_text});
            if (n_real > 0) {
                Tensor<Real> cat({n_real, gb->d_text + gb->fourier_dim});
                for (int s = 0; s < kMaxSubjects; ++s)
                    if (slot_is_real_[static_cast<size_t>(s)]) {
                        const auto& sub = conds.subjects[static_cast<size_t>(s)];
                        gb->fill_text_concat_row(cat.row(mlp_row_of_slot_[static_cast<size_t>(s)]), sub.f_text, sub.box);
                    }
                gt_mlp_out_ = gb->text_mlp.forward(cat);
            }
            for (int s = 0; s < kMaxSubjects; ++s) {
                const Real* src = slot_is_real_[static_cast<size_t>(s)]
                                      ? gt_mlp_out_.row(mlp_row_of_slot_[static_cast<size_t>(s)])
                                      : gb->empty_text_token.value.row(0);
                std::copy(src, src + gb->d_text, bundle.grounding_text.row(s));
            }
        }

        if (include_image) {
            bundle.grounding_image = Tensor<Real>({kMaxSubjects * kResamplerTokens, gb->d_img});
            // resample present subjects, then fuse box embeddings
            std::vector<Tensor<Real>> tokens_of_slot(kMaxSubjects);
            for (int s = 0; s < kMaxSubjects; ++s)
                if (slot_is_real_[static_cast<size_t>(s)]) {
                    rs_states_.emplace_back();
                    rs_slot_.push_back(s);
                    tokens_of_slot[static_cast<size_t>(s)] =
                        gb->resampler.forward(conds.subjects[static_cast<size_t>(s)].reference_patches, rs_states_.back());
                }
            if (gb->concat_image_grounding) {
                if (n_real > 0) {
                    Tensor<Real> cat({n_real * kResamplerTokens, gb->d_img + gb->fourier_dim});
                    for (int s = 0; s < kMaxSubjects; ++s)
                        if (slot_is_real_[static_cast<size_t>(s)]) {
                            const int r0 = mlp_row_of_slot_[static_cast<size_t>(s)] * kResamplerTokens;
                            Tensor<Real> fe = fourier_embed<Real>(conds.subjects[static_cast<size_t>(s)].box, gb->freq_count);
                            for (int j = 0; j < kResamplerTokens; ++j) {
                                Real* row = cat.row(r0 + j);
                                const Real* tok = tokens_of_slot[static_cast<size_t>(s)].row(j);
                                std::copy(tok, tok + gb->d_img, row);
                                std::copy(fe.data.begin(), fe.data.end(), row + gb->d_img);
                            }
                        }
                    gi_fused_ = gb->concat_mlp.forward(cat);
                }
            } else {
                if (n_real > 0) {
                    Tensor<Real> fe_rows({n_real, gb->fourier_dim});
                    for (int s = 0; s < kMaxSubjects; ++s)
                        if (slot_is_real_[static_cast<size_t>(s)])
                            gb->fill_fourier_row(fe_rows.row(mlp_row_of_slot_[static_cast<size_t>(s)]),
                                                 conds.subjects[static_cast<size_t>(s)].box);
                    box_emb_ = gb->box_mlp.forward(fe_rows); // (n_real, d_img)
                }
            }
            for (int s = 0; s < kMaxSubjects; ++s) {
                Real* dst = bundle.grounding_image.row(s * kResamplerTokens);
                if (slot_is_real_[static_cast<size_t>(s)]) {
                    const int mr = mlp_row_of_slot_[static_cast<size_t>(s)];
                    if (gb->concat_image_grounding) {
                        std::copy(gi_fused_.row(mr * kResamplerTokens),
                                  gi_fused_.row(mr * kResamplerTokens) + kResamplerTokens * gb->d_img, dst);
                    } else {
                        const Tensor<Real>& toks = tokens_of_slot[static_cast<size_t>(s)];
                        for (int j = 0; j < kResamplerTokens; ++j)
                            for (int c = 0; c < gb->d_img; ++c)
                                dst[static_cast<size_t>(j) * gb->d_img + c] = toks.at(j, c) + box_emb_.at(mr, c);
                    }
                } else {
                    for (int j = 0; j < kResamplerTokens; ++j)
                        for (int c = 0; c < gb->d_img; ++c)
                            dst[static_cast<size_t>(j) * gb->d_img + c] =
                                gb->empty_image_tokens.value.at(j, c) + gb->empty_box_embedding.value.at(0, c);
                }
            }
        }
        return bundle;
    }

    // Push bundle-block gradients into the grounding parameters.
    void backward(const Tensor<Real>& g_gtext, const Tensor<Real>& g_gimg) {
        const int n_real = count_real();
        if (include_text_grounding && g_gtext.rows() == kMaxSubjects) {
            if (n_real > 0) {
                Tensor<Real> g_rows({n_real, gb->d_text});
                for (int s = 0; s < kMaxSubjects; ++s)
                    if (slot_is_real_[static_cast<size_t>(s)])
                        std::copy(g_gtext.row(s), g_gtext.row(s) + gb->d_text,
                                  g_rows.row(mlp_row_of_slot_[static_cast<size_t>(s)]));
                gb->text_mlp.backward(g_rows);
            }
            for (int s = 0; s < kMaxSubjects; ++s)
                if (!slot_is_real_[static_cast<size_t>(s)])
                    axpy(Real(1), g_gtext.row(s), gb->empty_text_token.grad.row(0), gb->d_text);
        }

        if (include_image && g_gimg.rows() == kMaxSubjects * kResamplerTokens) {
            Tensor<Real> g_box_rows;
            Tensor<Real> g_fused_rows;
            if (n_real > 0) {
                if (gb->concat_image_grounding)
                    g_fused_rows = Tensor<Real>({n_real * kResamplerTokens, gb->d_img});
                else
                    g_box_rows = Tensor<Real>({n_real, gb->d_img});
            }
            size_t rs_i = 0;
            for (int s = 0; s < kMaxSubjects; ++s) {
                const Real* g = g_gimg.row(s * kResamplerTokens);
                if (slot_is_real_[static_cast<size_t>(s)]) {
                    const int mr = mlp_row_of_slot_[static_cast<size_t>(s)];
                    if (gb->concat_image_grounding) {
                        std::copy(g, g + kResamplerTokens * gb->d_img, g_fused_rows.row(mr * kResamplerTokens));
                    } else {
                        Tensor<Real> g_tokens({kResamplerTokens, gb->d_img},
                                              std::vector<Real>(g, g + kResamplerTokens * gb->d_img));
                        for (int j = 0; j < kResamplerTokens; ++j)
                            axpy(Real(1), g_tokens.row(j), g_box_rows.row(mr), gb->d_img);
                        gb->resampler.backward(g_tokens, rs_states_[rs_i]);
                        ++rs_i;
                    }
                } else {
                    for (int j = 0; j < kResamplerTokens; ++j) {
                        axpy(Real(1), g + static_cast<size_t>(j) * gb->d_img, gb->empty_image_tokens.grad.row(j),
                             gb->d_img);
                        axpy(Real(1), g + static_cast<size_t>(j) * gb->d_img, gb->empty_box_embedding.grad.row(0),
                             gb->d_img);
                    }
                }
            }
            if (n_real > 0) {
                if (gb->concat_image_grounding) {
                    Tensor<Real> g_cat = gb->concat_mlp.backward(g_fused_rows);
                    // token part of the concat rows flows back into the resampler
                    rs_i = 0;
                    for (int s = 0; s < kMaxSubjects; ++s)
                        if (slot_is_real_[static_cast<size_t>(s)]) {
                            const int mr = mlp_row_of_slot_[static_cast<size_t>(s)];
                            Tensor<Real> g_tokens({kResamplerTokens, gb->d_img});
                            for (int j = 0; j < kResamplerTokens; ++j)
                                std::copy(g_cat.row(mr * kResamplerTokens + j),
                                          g_cat.row(mr * kResamplerTokens + j) + gb->d_img, g_tokens.row(j));
                            gb->resampler.backward(g_tokens, rs_states_[rs_i]);
                            ++rs_i;
                        }
                } else {
                    gb->box_mlp.backward(g_box_rows);
                }
            }
        }
    }

private:
    int count_real() const {
        int n = 0;
        for (bool b : slot_is_real_)
            if (b) ++n;
        return n;
    }

    std::vector<bool> slot_is_real_;
    std::vector<int> mlp_row_of_slot_;
    std::vector<ResamplerState<Real>> rs_states_;
    std::vector<int> rs_slot_;
    Tensor<Real> gt_mlp_out_, box_emb_, gi_fused_;
};

} // namespace muse
