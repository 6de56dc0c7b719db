#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "muse/gradcheck.hpp"
#include "muse/grounding.hpp"

using namespace muse;

namespace {

GroundingBuilder<double> make_builder(uint64_t seed, int d_text = 6, int d_img = 5, int freq = 16, int hidden = 7,
                                      int depth = 2) {
    GroundingBuilder<double> gb;
    Rng rng(seed);
    gb.init(d_text, d_img, freq, hidden, depth, rng, "ground");
    return gb;
}

SubjectConditionSet<double> two_subject_set(const GroundingBuilder<double>& gb, uint64_t seed) {
    Rng rng(seed);
    SubjectConditionSet<double> conds;
    conds.pad();
    for (int s = 0; s < 2; ++s) {
        auto& sub = conds.subjects[static_cast<size_t>(s)];
        sub.present = true;
        sub.class_token_id = s + 3;
        sub.f_text = Tensor<double>::randn({gb.d_text}, rng);
        sub.reference_patches = Tensor<double>::randn({3 + s, gb.d_img}, rng);
        sub.box = BoundingBox{0.1 + 0.3 * s, 0.2, 0.4 + 0.3 * s, 0.7};
    }
    return conds;
}

} // namespace

TEST_CASE("fourier_embed examples", "[grounding]") {
    SECTION("unit box has analytic sin/cos values") {
        // coords ordered x0, y0, x1, y1; for c = 0 all sines are 0 and all
        // cosines 1; for c = 1, j = 0 gives cos(pi) = -1 and j >= 1 gives 1
        auto e = fourier_embed<double>(BoundingBox{0, 0, 1, 1}, 16);
        REQUIRE(e.size() == 64);
        for (int coord = 0; coord < 2; ++coord)
            for (int j = 0; j < 8; ++j) {
                REQUIRE(e.at(coord * 16 + 2 * j) == 0.0);
                REQUIRE(e.at(coord * 16 + 2 * j + 1) == 1.0);
            }
        for (int coord = 2; coord < 4; ++coord)
            for (int j = 0; j < 8; ++j) {
                REQUIRE(e.at(coord * 16 + 2 * j) == Catch::Approx(0.0).margin(1e-9));
                double want_cos = (j == 0) ? -1.0 : 1.0;
                REQUIRE(e.at(coord * 16 + 2 * j + 1) == Catch::Approx(want_cos).margin(1e-9));
            }
    }

    SECTION("default frequency of 16 gives exactly 64 dims") {
        Rng rng(3);
        for (int it = 0; it < 20; ++it) {
            double x0 = rng.uniform(0.0, 0.5), y0 = rng.uniform(0.0, 0.5);
            auto e = fourier_embed<double>(BoundingBox{x0, y0, x0 + 0.3, y0 + 0.3}, 16);
            REQUIRE(e.size() == 64);
            for (auto v : e.data) {
                REQUIRE(v <= 1.0);
                REQUIRE(v >= -1.0);
            }
        }
    }

    SECTION("matches a hand-evaluated sin/cos table") {
        BoundingBox b{0.25, 0.0, 0.5, 1.0};
        auto e = fourier_embed<double>(b, 16);
        const double coords[4] = {0.25, 0.0, 0.5, 1.0};
        int idx = 0;
        for (double c : coords)
            for (int j = 0; j < 8; ++j) {
                double w = std::pow(2.0, j) * 3.14159265358979323846 * c;
                REQUIRE(e.at(idx++) == Catch::Approx(std::sin(w)).margin(1e-12));
                REQUIRE(e.at(idx++) == Catch::Approx(std::cos(w)).margin(1e-12));
            }
    }

    SECTION("out-of-range coordinates and odd frequency are errors") {
        REQUIRE_THROWS_AS(fourier_embed<double>(BoundingBox{-0.1, 0, 0.5, 0.5}, 16), std::invalid_argument);
        REQUIRE_THROWS_AS(fourier_embed<double>(BoundingBox{0.6, 0, 0.5, 0.5}, 16), std::invalid_argument);
        REQUIRE_THROWS_AS(fourier_embed<double>(BoundingBox{0, 0, 1, 1}, 15), std::invalid_argument);
    }

    SECTION("dim is 4 * freq_count") {
        REQUIRE(fourier_embed<double>(BoundingBox{0.1, 0.1, 0.9, 0.9}, 8).size() == 32);
        REQUIRE(fourier_embed<double>(BoundingBox{0.1, 0.1, 0.9, 0.9}, 20).size() == 80);
    }
}

TEST_CASE("build_text_grounding examples", "[grounding]") {
    SECTION("all-zero mlp gives a zero token") {
        auto gb = make_builder(21);
        for (auto* l : {&gb.text_mlp.l1, &gb.text_mlp.l2, &gb.text_mlp.l3}) {
            l->w.value.zero();
            l->b.value.zero();
        }
        Rng rng(4);
        auto g = gb.build_text_grounding(Tensor<double>::randn({gb.d_text}, rng), BoundingBox{0.1, 0.1, 0.6, 0.6});
        for (auto v : g.data) REQUIRE(v == 0.0);
    }

    SECTION("equals the MLP applied to the concatenated feature") {
        auto gb = make_builder(22);
        Rng rng(5);
        Tensor<double> f_t = Tensor<double>::randn({gb.d_text}, rng);
        BoundingBox b{0.2, 0.3, 0.7, 0.9};
        auto got = gb.build_text_grounding(f_t, b);
        Tensor<double> cat({1, gb.d_text + 64});
        for (int i = 0; i < gb.d_text; ++i) cat.at(0, i) = f_t.at(i);
        auto fe = fourier_embed<double>(b, 16);
        for (int i = 0; i < 64; ++i) cat.at(0, gb.d_text + i) = fe.at(i);
        auto want = gb.text_mlp.forward(cat);
        REQUIRE(got.data == want.data);
        REQUIRE(got.cols() == gb.d_text);
    }

    SECTION("paper-scale dims: 768+64 in, 768 out") {
        GroundingBuilder<double> gb;
        Rng rng(6);
        gb.init(768, 2048, 16, 32, 1, rng, "paper");
        REQUIRE(gb.text_mlp.in_dim == 832);
        REQUIRE(gb.text_mlp.out_dim == 768);
        Tensor<double> f_t = Tensor<double>::randn({768}, rng, 0.1);
        auto g = gb.build_text_grounding(f_t, BoundingBox{0.25, 0.25, 0.75, 0.75});
        REQUIRE(g.rows() == 1);
        REQUIRE(g.cols() == 768);
    }

    SECTION("dimension mismatch is an error") {
        auto gb = make_builder(23);
        Tensor<double> wrong({gb.d_text + 1});
        REQUIRE_THROWS_AS(gb.build_text_grounding(wrong, BoundingBox{0.1, 0.1, 0.5, 0.5}), std::invalid_argument);
    }
}

TEST_CASE("resample_image examples", "[grounding]") {
    SECTION("single patch gets attention weight 1; output is its per-layer transform") {
        GroundingBuilder<double> gb = make_builder(31, 6, 5, 16, 7, 1);
        Rng rng(7);
        Tensor<double> patch = Tensor<double>::randn({1, gb.d_img}, rng);
        ResamplerState<double> st;
        auto out = gb.resampler.forward(patch, st);
        REQUIRE(out.rows() == 4);
        REQUIRE(out.cols() == gb.d_img);
        for (int r = 0; r < 4; ++r) REQUIRE(st.layers[0].attn.at(r, 0) == Catch::Approx(1.0).margin(1e-15));
        // hand-evaluated single layer: out = queries + (patch W_v) W_o
        const auto& L = gb.resampler.layers[0];
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < gb.d_img; ++c) {
                double v = 0;
                for (int k = 0; k < gb.d_img; ++k) {
                    double pv = 0;
                    for (int k2 = 0; k2 < gb.d_img; ++k2) pv += patch.at(0, k2) * L.w_v.value.at(k2, k);
                    v += pv * L.w_o.value.at(k, c);
                }
                REQUIRE(out.at(r, c) == Catch::Approx(gb.resampler.queries.value.at(r, c) + v).margin(1e-10));
            }
    }

    SECTION("identical patches repeated match the single-patch result") {
        auto gb = make_builder(32);
        Rng rng(8);
        Tensor<double> one = Tensor<double>::randn({1, gb.d_img}, rng);
        Tensor<double> many({5, gb.d_img});
        for (int r = 0; r < 5; ++r)
            for (int c = 0; c < gb.d_img; ++c) many.at(r, c) = one.at(0, c);
        ResamplerState<double> s1, s2;
        auto o1 = gb.resampler.forward(one, s1);
        auto o2 = gb.resampler.forward(many, s2);
        for (int64_t i = 0; i < o1.size(); ++i)
            REQUIRE(o2.data[static_cast<size_t>(i)] == Catch::Approx(o1.data[static_cast<size_t>(i)]).margin(1e-12));
    }

    SECTION("always 4 output tokens") {
        auto gb = make_builder(33);
        Rng rng(9);
        for (int p : {1, 2, 7, 19}) {
            auto out = resample_image(gb.resampler, Tensor<double>::randn({p, gb.d_img}, rng));
            REQUIRE(out.rows() == 4);
            REQUIRE(out.cols() == gb.d_img);
        }
    }

    SECTION("empty patch set is an error") {
        auto gb = make_builder(34);
        Tensor<double> empty({0, gb.d_img});
        ResamplerState<double> st;
        REQUIRE_THROWS_AS(gb.resampler.forward(empty, st), std::invalid_argument);
    }

    SECTION("differentiable through queries and attention weights") {
        GroundingBuilder<double> gb = make_builder(35, 6, 5, 16, 7, 2);
        Rng rng(10);
        Tensor<double> patches = Tensor<double>::randn({3, gb.d_img}, rng);
        ParamList<double> params;
        gb.resampler.collect(params);
        ResamplerState<double> st;
        auto loss = [&]() {
            auto y = gb.resampler.forward(patches, st);
            double s = 0;
            Tensor<double> gy(y.shape);
            for (int64_t i = 0; i < y.size(); ++i) {
                s += std::sin(y.data[static_cast<size_t>(i)]);
                gy.data[static_cast<size_t>(i)] = std::cos(y.data[static_cast<size_t>(i)]);
            }
            gb.resampler.backward(gy, st);
            return s;
        };
        REQUIRE(finite_diff_gradcheck<double>(loss, params, 1e-6).max_rel_err < 1e-3);
    }
}

TEST_CASE("build_image_grounding examples", "[grounding]") {
    SECTION("zero box mlp leaves tokens unchanged") {
        auto gb = make_builder(41);
        for (auto* l : {&gb.box_mlp.l1, &gb.box_mlp.l2, &gb.box_mlp.l3}) {
            l->w.value.zero();
            l->b.value.zero();
        }
        Rng rng(11);
        Tensor<double> tokens = Tensor<double>::randn({4, gb.d_img}, rng);
        auto out = gb.build_image_grounding(tokens, BoundingBox{0.1, 0.2, 0.5, 0.8});
        REQUIRE(out.data == tokens.data);
    }

    SECTION("the same box embedding is added to every token (composition oracle)") {
        auto gb = make_builder(42);
        Rng rng(12);
        Tensor<double> tokens = Tensor<double>::randn({4, gb.d_img}, rng);
        BoundingBox b{0.15, 0.25, 0.6, 0.9};
        auto out = gb.build_image_grounding(tokens, b);
        Tensor<double> fe_row({1, 64});
        auto fe = fourier_embed<double>(b, 16);
        for (int i = 0; i < 64; ++i) fe_row.at(0, i) = fe.at(i);
        auto emb = gb.box_mlp.forward(fe_row);
        for (int j = 0; j < 4; ++j)
            for (int c = 0; c < gb.d_img; ++c)
                REQUIRE(out.at(j, c) == Catch::Approx(tokens.at(j, c) + emb.at(0, c)).margin(1e-12));
    }

    SECTION("additivity: the box embedding cancels exactly across token sets") {
        auto gb = make_builder(43);
        Rng rng(13);
        Tensor<double> t1 = Tensor<double>::randn({4, gb.d_img}, rng);
        Tensor<double> t2 = Tensor<double>::randn({4, gb.d_img}, rng);
        BoundingBox b{0.3, 0.1, 0.8, 0.5};
        auto o1 = gb.build_image_grounding(t1, b);
        auto o2 = gb.build_image_grounding(t2, b);
        for (int64_t i = 0; i < o1.size(); ++i)
            REQUIRE(o1.data[static_cast<size_t>(i)] - o2.data[static_cast<size_t>(i)] ==
                    Catch::Approx(t1.data[static_cast<size_t>(i)] - t2.data[static_cast<size_t>(i)]).margin(1e-12));
    }

    SECTION("same reference, different boxes differ only by the box embeddings") {
        auto gb = make_builder(44);
        Rng rng(14);
        Tensor<double> tokens = Tensor<double>::randn({4, gb.d_img}, rng);
        BoundingBox b1{0.05, 0.05, 0.45, 0.45}, b2{0.5, 0.5, 0.95, 0.95};
        auto o1 = gb.build_image_grounding(tokens, b1);
        auto o2 = gb.build_image_grounding(tokens, b2);
        auto emb = [&](const BoundingBox& b) {
            Tensor<double> fe_row({1, 64});
            auto fe = fourier_embed<double>(b, 16);
            for (int i = 0; i < 64; ++i) fe_row.at(0, i) = fe.at(i);
            return gb.box_mlp.forward(fe_row);
        };
        auto e1 = emb(b1), e2 = emb(b2);
        for (int j = 0; j < 4; ++j)
            for (int c = 0; c < gb.d_img; ++c)
                REQUIRE(o1.at(j, c) - o2.at(j, c) == Catch::Approx(e1.at(0, c) - e2.at(0, c)).margin(1e-12));
    }

    SECTION("dimension mismatch is an error") {
        auto gb = make_builder(45);
        Tensor<double> wrong({3, gb.d_img});
        REQUIRE_THROWS_AS(gb.build_image_grounding(wrong, BoundingBox{0.1, 0.1, 0.5, 0.5}), std::invalid_argument);
    }
}

TEST_CASE("build_concat_image_grounding examples", "[grounding]") {
    SECTION("zero mlp gives zero tokens") {
        auto gb = make_builder(51);
        for (auto* l : {&gb.concat_mlp.l1, &gb.concat_mlp.l2, &gb.concat_mlp.l3}) {
            l->w.value.zero();
            l->b.value.zero();
        }
        Rng rng(15);
        auto out = gb.build_concat_image_grounding(Tensor<double>::randn({4, gb.d_img}, rng),
                                                   BoundingBox{0.1, 0.2, 0.5, 0.8});
        for (auto v : out.data) REQUIRE(v == 0.0);
    }

    SECTION("identical tokens produce identical fused rows") {
        auto gb = make_builder(52);
        Rng rng(16);
        Tensor<double> tokens({4, gb.d_img});
        Tensor<double> one = Tensor<double>::randn({1, gb.d_img}, rng);
        for (int j = 0; j < 4; ++j)
            for (int c = 0; c < gb.d_img; ++c) tokens.at(j, c) = one.at(0, c);
        auto out = gb.build_concat_image_grounding(tokens, BoundingBox{0.2, 0.2, 0.7, 0.7});
        for (int j = 1; j < 4; ++j)
            for (int c = 0; c < gb.d_img; ++c) REQUIRE(out.at(j, c) == out.at(0, c));
    }

    SECTION("matches the per-token Eq.3-style oracle") {
        auto gb = make_builder(53);
        Rng rng(17);
        Tensor<double> tokens = Tensor<double>::randn({4, gb.d_img}, rng);
        BoundingBox b{0.25, 0.3, 0.6, 0.85};
        auto out = gb.build_concat_image_grounding(tokens, b);
        auto fe = fourier_embed<double>(b, 16);
        for (int j = 0; j < 4; ++j) {
            Tensor<double> cat({1, gb.d_img + 64});
            for (int c = 0; c < gb.d_img; ++c) cat.at(0, c) = tokens.at(j, c);
            for (int i = 0; i < 64; ++i) cat.at(0, gb.d_img + i) = fe.at(i);
            auto want = gb.concat_mlp.forward(cat);
            for (int c = 0; c < gb.d_img; ++c) REQUIRE(out.at(j, c) == Catch::Approx(want.at(0, c)).margin(1e-12));
        }
    }
}

TEST_CASE("pad_and_dropout examples", "[grounding]") {
    SECTION("p = 0 never drops") {
        for (uint64_t s = 0; s < 1000; ++s) {
            auto d = pad_and_dropout_decision(0.0, s);
            REQUIRE_FALSE(d.drop_caption);
            REQUIRE_FALSE(d.drop_subject_conditions);
        }
    }

    SECTION("p = 1 always drops") {
        for (uint64_t s = 0; s < 1000; ++s) {
            auto d = pad_and_dropout_decision(1.0, s);
            REQUIRE(d.drop_caption);
            REQUIRE(d.drop_subject_conditions);
        }
    }

    SECTION("p = 0.1 empirical rate over 10000 seeded draws") {
        int cap = 0, cond = 0;
        const int n = 10000;
        for (uint64_t s = 0; s < n; ++s) {
            auto d = pad_and_dropout_decision(0.1, s);
            cap += d.drop_caption ? 1 : 0;
            cond += d.drop_subject_conditions ? 1 : 0;
        }
        REQUIRE(static_cast<double>(cap) / n > 0.09);
        REQUIRE(static_cast<double>(cap) / n < 0.11);
        REQUIRE(static_cast<double>(cond) / n > 0.09);
        REQUIRE(static_cast<double>(cond) / n < 0.11);
    }

    SECTION("deterministic given seed") {
        for (uint64_t s = 0; s < 100; ++s) {
            auto a = pad_and_dropout_decision(0.5, s);
            auto b = pad_and_dropout_decision(0.5, s);
            REQUIRE(a.drop_caption == b.drop_caption);
            REQUIRE(a.drop_subject_conditions == b.drop_subject_conditions);
        }
    }

    SECTION("invalid probability is an error") {
        REQUIRE_THROWS_AS(pad_and_dropout_decision(-0.1, 1), std::invalid_argument);
        REQUIRE_THROWS_AS(pad_and_dropout_decision(1.5, 1), std::invalid_argument);
    }
}

TEST_CASE("bundle assembly padding contracts", "[grounding]") {
    auto gb = make_builder(61);
    auto conds = two_subject_set(gb, 62);
    Rng rng(63);
    Tensor<double> prompt = Tensor<double>::randn({3, gb.d_text}, rng);

    BundleAssembler<double> as;
    as.gb = &gb;
    as.include_image = true;

    SECTION("padded G_T has 10 rows, G_I 40 rows; padding uses empty tokens") {
        auto bundle = as.assemble(prompt, conds, DropoutDecision{});
        REQUIRE(bundle.grounding_text.rows() == 10);
        REQUIRE(bundle.grounding_image.rows() == 40);
        // absent slots bypass the MLP and use the trainable empty tokens
        for (int s = 2; s < 10; ++s)
            for (int c = 0; c < gb.d_text; ++c)
                REQUIRE(bundle.grounding_text.at(s, c) == gb.empty_text_token.value.at(0, c));
        for (int s = 2; s < 10; ++s)
            for (int j = 0; j < 4; ++j)
                for (int c = 0; c < gb.d_img; ++c)
                    REQUIRE(bundle.grounding_image.at(s * 4 + j, c) ==
                            gb.empty_image_tokens.value.at(j, c) + gb.empty_box_embedding.value.at(0, c));
        // present slots carry Eq. 3 tokens
        auto g0 = gb.build_text_grounding(conds.subjects[0].f_text, conds.subjects[0].box);
        for (int c = 0; c < gb.d_text; ++c) REQUIRE(bundle.grounding_text.at(0, c) == Catch::Approx(g0.at(0, c)).margin(1e-12));
    }

    SECTION("dropped caption empties the text block") {
        DropoutDecision d;
        d.drop_caption = true;
        auto bundle = as.assemble(prompt, conds, d);
        REQUIRE(bundle.text.rows() == 0);
        REQUIRE(bundle.grounding_text.rows() == 10);
    }

    SECTION("dropped subject conditions use empty tokens in all 10 slots") {
        DropoutDecision d;
        d.drop_subject_conditions = true;
        auto bundle = as.assemble(prompt, conds, d);
        for (int s = 0; s < 10; ++s)
            for (int c = 0; c < gb.d_text; ++c)
                REQUIRE(bundle.grounding_text.at(s, c) == gb.empty_text_token.value.at(0, c));
        for (int s = 0; s < 10; ++s)
            for (int j = 0; j < 4; ++j)
                for (int c = 0; c < gb.d_img; ++c)
                    REQUIRE(bundle.grounding_image.at(s * 4 + j, c) ==
                            gb.empty_image_tokens.value.at(j, c) + gb.empty_box_embedding.value.at(0, c));
    }

    SECTION("deterministic given identical inputs") {
        auto b1 = as.assemble(prompt, conds, DropoutDecision{});
        auto b2 = as.assemble(prompt, conds, DropoutDecision{});
        REQUIRE(b1.grounding_text.data == b2.grounding_text.data);
        REQUIRE(b1.grounding_image.data == b2.grounding_image.data);
    }
}

TEST_CASE("grounding parameters pass finite differences through assembly", "[grounding][grad][acceptance2]") {
    GroundingBuilder<double> gb = make_builder(71, 5, 4, 4, 5, 1);
    auto conds = two_subject_set(gb, 72);
    Rng rng(73);
    Tensor<double> prompt = Tensor<double>::randn({2, gb.d_text}, rng);

    for (bool concat_arm : {false, true}) {
        gb.concat_image_grounding = concat_arm;
        BundleAssembler<double> as;
        as.gb = &gb;
        as.include_image = true;

        ParamList<double> params;
        gb.collect(params);

        auto loss = [&]() {
            auto bundle = as.assemble(prompt, conds, DropoutDecision{});
            double s = 0;
            Tensor<double> g_gt(bundle.grounding_text.shape), g_gi(bundle.grounding_image.shape);
            for (int64_t i = 0; i < bundle.grounding_text.size(); ++i) {
                s += std::sin(bundle.grounding_text.data[static_cast<size_t>(i)]);
                g_gt.data[static_cast<size_t>(i)] = std::cos(bundle.grounding_text.data[static_cast<size_t>(i)]);
            }
            for (int64_t i = 0; i < bundle.grounding_image.size(); ++i) {
                s += std::sin(bundle.grounding_image.data[static_cast<size_t>(i)]);
                g_gi.data[static_cast<size_t>(i)] = std::cos(bundle.grounding_image.data[static_cast<size_t>(i)]);
            }
            as.backward(g_gt, g_gi);
            return s;
        };
        auto rep = finite_diff_gradcheck<double>(loss, params, 1e-6);
        INFO("concat arm: " << concat_arm << ", worst: " << rep.worst_param);
        REQUIRE(rep.max_rel_err < 1e-3);
    }
}
