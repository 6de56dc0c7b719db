#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "muse/attention.hpp"
#include "muse/gradcheck.hpp"

using namespace muse;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat naive_matmul(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t k = 0; k < b.size(); ++k)
            for (size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
    return c;
}

Mat to_mat(const Tensor<double>& t) {
    Mat m(static_cast<size_t>(t.rows()), std::vector<double>(static_cast<size_t>(t.cols())));
    for (int r = 0; r < t.rows(); ++r)
        for (int c = 0; c < t.cols(); ++c) m[static_cast<size_t>(r)][static_cast<size_t>(c)] = t.at(r, c);
    return m;
}

// softmax(Q K^T * scale) V with plain loops, independent of the layer code
Mat naive_attention(const Mat& q, const Mat& k, const Mat& v, double scale) {
    Mat out(q.size(), std::vector<double>(v.empty() ? 0 : v[0].size(), 0.0));
    for (size_t i = 0; i < q.size(); ++i) {
        std::vector<double> s(k.size());
        double mx = -1e300;
        for (size_t j = 0; j < k.size(); ++j) {
            double d = 0;
            for (size_t c = 0; c < q[i].size(); ++c) d += q[i][c] * k[j][c];
            s[j] = d * scale;
            mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& x : s) {
            x = std::exp(x - mx);
            z += x;
        }
        for (size_t j = 0; j < k.size(); ++j)
            for (size_t c = 0; c < v[j].size(); ++c) out[i][c] += (s[j] / z) * v[j][c];
    }
    return out;
}

struct Fixture {
    CrossAttentionLayer<double> layer;
    Tensor<double> x, text, gtext, gimage;
    int d_model = 5, d_text = 4, d_img = 3, d_h = 4;

    explicit Fixture(uint64_t seed, int heads = 1, int lq = 2, int l = 3, int n = 2, int ni = 4) {
        Rng rng(seed);
        layer.init(d_model, d_text, d_img, d_h, heads, rng, "attn");
        x = Tensor<double>::randn({lq, d_model}, rng);
        text = Tensor<double>::randn({l, d_text}, rng);
        gtext = Tensor<double>::randn({n, d_text}, rng);
        gimage = Tensor<double>::randn({ni, d_img}, rng);
    }

    Mat project(const Tensor<double>& src, const Parameter<double>& w) const {
        return naive_matmul(to_mat(src), to_mat(w.value));
    }
    double scale() const { return 1.0 / std::sqrt(static_cast<double>(d_h / layer.n_heads)); }
};

void require_close(const Tensor<double>& got, const Mat& want, double tol) {
    REQUIRE(got.rows() == static_cast<int>(want.size()));
    for (int r = 0; r < got.rows(); ++r)
        for (int c = 0; c < got.cols(); ++c)
            REQUIRE(got.at(r, c) == Catch::Approx(want[static_cast<size_t>(r)][static_cast<size_t>(c)]).margin(tol));
}

} // namespace

TEST_CASE("compute_ca examples", "[attention]") {
    SECTION("single query, single key attends with weight 1") {
        Fixture f(31, 1, 1, 1, 0, 0);
        auto out = compute_ca(f.layer, f.x, f.text);
        Mat v = f.project(f.text, f.layer.w_v);
        require_close(out, {v[0]}, 1e-12);
        REQUIRE(f.layer.last_primary_attn().at(0, 0) == Catch::Approx(1.0).margin(1e-15));
    }

    SECTION("two identical keys average their value rows") {
        Fixture f(32, 1, 1, 2, 0, 0);
        for (int c = 0; c < f.d_text; ++c) f.text.at(1, c) = f.text.at(0, c);
        Tensor<double> distinct_v = f.text;
        // same key rows but make value rows differ by perturbing w_v input? keys
        // derive from the same rows, so value rows agree too; use the exact mean.
        auto out = compute_ca(f.layer, f.x, f.text);
        Mat v = f.project(f.text, f.layer.w_v);
        Mat mean{{0, 0, 0, 0}};
        for (int c = 0; c < f.d_h; ++c) mean[0][static_cast<size_t>(c)] = 0.5 * (v[0][static_cast<size_t>(c)] + v[1][static_cast<size_t>(c)]);
        require_close(out, mean, 1e-12);
    }

    SECTION("2 queries x 3 keys match the hand-evaluated softmax(QK^T/sqrt(d))V") {
        Fixture f(33);
        auto out = compute_ca(f.layer, f.x, f.text);
        Mat q = f.project(f.x, f.layer.w_q);
        Mat k = f.project(f.text, f.layer.w_k);
        Mat v = f.project(f.text, f.layer.w_v);
        require_close(out, naive_attention(q, k, v, f.scale()), 1e-12);
    }

    SECTION("empty text tokens are an error") {
        Fixture f(34);
        Tensor<double> empty({0, f.d_text});
        REQUIRE_THROWS_AS(compute_ca(f.layer, f.x, empty), std::invalid_argument);
    }
}

TEST_CASE("compute_dca examples", "[attention]") {
    Fixture f(41);

    SECTION("lambda = 0 equals compute_ca exactly") {
        f.layer.lambda_scale = 0.0;
        auto dca = compute_dca(f.layer, f.x, f.text, f.gimage);
        auto ca = compute_ca(f.layer, f.x, f.text);
        REQUIRE(dca.data == ca.data);
    }

    SECTION("empty image tokens equal compute_ca exactly") {
        f.layer.lambda_scale = 0.8;
        Tensor<double> empty({0, f.d_img});
        auto dca = compute_dca(f.layer, f.x, f.text, empty);
        auto ca = compute_ca(f.layer, f.x, f.text);
        REQUIRE(dca.data == ca.data);
    }

    SECTION("lambda = 0.8 matches the sum of two independent attention terms") {
        f.layer.lambda_scale = 0.8; // default control strength
        auto out = compute_dca(f.layer, f.x, f.text, f.gimage);
        Mat q = f.project(f.x, f.layer.w_q);
        Mat text_term = naive_attention(q, f.project(f.text, f.layer.w_k), f.project(f.text, f.layer.w_v), f.scale());
        Mat img_term = naive_attention(q, f.project(f.gimage, f.layer.w_ki), f.project(f.gimage, f.layer.w_vi), f.scale());
        Mat want = text_term;
        for (size_t r = 0; r < want.size(); ++r)
            for (size_t c = 0; c < want[r].size(); ++c) want[r][c] += 0.8 * img_term[r][c];
        require_close(out, want, 1e-12);
    }
}

TEST_CASE("compute_cca examples", "[attention]") {
    SECTION("empty grounding equals compute_ca exactly") {
        Fixture f(51);
        Tensor<double> empty({0, f.d_text});
        auto cca = compute_cca(f.layer, f.x, f.text, empty);
        auto ca = compute_ca(f.layer, f.x, f.text);
        REQUIRE(cca.data == ca.data);
    }

    SECTION("identical text and grounding keys average their value rows") {
        Fixture f(52, 1, 1, 1, 1, 0);
        f.layer.init_grounding_text_from_base(); // W_kT = W_k, W_vT = W_v
        for (int c = 0; c < f.d_text; ++c) f.gtext.at(0, c) = f.text.at(0, c);
        auto out = compute_cca(f.layer, f.x, f.text, f.gtext);
        Mat v = f.project(f.text, f.layer.w_v);
        Mat vt = f.project(f.gtext, f.layer.w_vt);
        Mat mean{std::vector<double>(static_cast<size_t>(f.d_h), 0.0)};
        for (int c = 0; c < f.d_h; ++c)
            mean[0][static_cast<size_t>(c)] = 0.5 * (v[0][static_cast<size_t>(c)] + vt[0][static_cast<size_t>(c)]);
        require_close(out, mean, 1e-12);
    }

    SECTION("L=2, N=2 matches the hand-evaluated joint softmax") {
        Fixture f(53, 1, 2, 2, 2, 0);
        auto out = compute_cca(f.layer, f.x, f.text, f.gtext);
        Mat q = f.project(f.x, f.layer.w_q);
        Mat k = f.project(f.text, f.layer.w_k);
        Mat kt = f.project(f.gtext, f.layer.w_kt);
        Mat v = f.project(f.text, f.layer.w_v);
        Mat vt = f.project(f.gtext, f.layer.w_vt);
        for (auto& row : kt) k.push_back(row);
        for (auto& row : vt) v.push_back(row);
        require_close(out, naive_attention(q, k, v, f.scale()), 1e-12);
    }

    SECTION("both token blocks empty is an error") {
        Fixture f(54);
        Tensor<double> e1({0, f.d_text}), e2({0, f.d_text});
        REQUIRE_THROWS_AS(compute_cca(f.layer, f.x, e1, e2), std::invalid_argument);
    }
}

TEST_CASE("compute_fca examples", "[attention]") {
    Fixture f(61);
    ConditionBundle<double> bundle = ConditionBundle<double>::empty(f.d_text, f.d_img);
    bundle.text = f.text;
    bundle.grounding_text = f.gtext;
    bundle.grounding_image = f.gimage;

    SECTION("no grounding at all equals compute_ca exactly") {
        ConditionBundle<double> b = ConditionBundle<double>::empty(f.d_text, f.d_img);
        b.text = f.text;
        auto fca = compute_fca(f.layer, f.x, b);
        auto ca = compute_ca(f.layer, f.x, f.text);
        REQUIRE(fca.data == ca.data);
    }

    SECTION("lambda = 0 equals compute_cca exactly") {
        f.layer.lambda_scale = 0.0;
        auto fca = compute_fca(f.layer, f.x, bundle);
        auto cca = compute_cca(f.layer, f.x, f.text, f.gtext);
        REQUIRE(fca.data == cca.data);
    }

    SECTION("full bundle equals CCA plus the scaled image attention term") {
        f.layer.lambda_scale = 0.8;
        auto fca = compute_fca(f.layer, f.x, bundle);
        Mat q = f.project(f.x, f.layer.w_q);
        Mat k = f.project(f.text, f.layer.w_k);
        Mat kt = f.project(f.gtext, f.layer.w_kt);
        Mat v = f.project(f.text, f.layer.w_v);
        Mat vt = f.project(f.gtext, f.layer.w_vt);
        for (auto& row : kt) k.push_back(row);
        for (auto& row : vt) v.push_back(row);
        Mat want = naive_attention(q, k, v, f.scale());
        Mat img = naive_attention(q, f.project(f.gimage, f.layer.w_ki), f.project(f.gimage, f.layer.w_vi), f.scale());
        for (size_t r = 0; r < want.size(); ++r)
            for (size_t c = 0; c < want[r].size(); ++c) want[r][c] += 0.8 * img[r][c];
        require_close(fca, want, 1e-12);
    }
}

TEST_CASE("reduction chain identities are bit-exact", "[attention][acceptance1]") {
    Fixture f(71);
    auto ca = compute_ca(f.layer, f.x, f.text);

    // DCA(lambda=0) == CA
    f.layer.lambda_scale = 0.0;
    REQUIRE(compute_dca(f.layer, f.x, f.text, f.gimage).data == ca.data);

    // CCA(no grounding) == CA
    Tensor<double> egt({0, f.d_text});
    REQUIRE(compute_cca(f.layer, f.x, f.text, egt).data == ca.data);

    // FCA(lambda=0) == CCA
    ConditionBundle<double> bundle = ConditionBundle<double>::empty(f.d_text, f.d_img);
    bundle.text = f.text;
    bundle.grounding_text = f.gtext;
    bundle.grounding_image = f.gimage;
    f.layer.lambda_scale = 0.0;
    auto cca = compute_cca(f.layer, f.x, f.text, f.gtext);
    REQUIRE(compute_fca(f.layer, f.x, bundle).data == cca.data);

    // FCA(lambda=0, no grounding text) == CA
    ConditionBundle<double> b2 = ConditionBundle<double>::empty(f.d_text, f.d_img);
    b2.text = f.text;
    b2.grounding_image = f.gimage;
    REQUIRE(compute_fca(f.layer, f.x, b2).data == ca.data);
}

TEST_CASE("CCA forms one distribution, DCA forms two", "[attention]") {
    Fixture f(81);
    f.layer.lambda_scale = 0.8;

    compute_cca(f.layer, f.x, f.text, f.gtext);
    const auto& joint = f.layer.last_primary_attn();
    REQUIRE(joint.cols() == f.text.rows() + f.gtext.rows());
    for (int r = 0; r < joint.rows(); ++r) {
        double sum = 0;
        for (int c = 0; c < joint.cols(); ++c) sum += joint.at(r, c);
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));
        // a single softmax: the text sub-block alone sums to under 1
        double text_part = 0;
        for (int c = 0; c < f.text.rows(); ++c) text_part += joint.at(r, c);
        REQUIRE(text_part < 1.0 - 1e-6);
    }

    f.layer.mode = AttentionMode::DCALayout;
    ConditionBundle<double> b = ConditionBundle<double>::empty(f.d_text, f.d_img);
    b.text = f.text;
    b.grounding_text = f.gtext;
    f.layer.cache_sources(b);
    f.layer.forward(f.x, b);
    const auto& prim = f.layer.last_primary_attn();
    const auto& dec = f.layer.last_decoupled_text_attn();
    REQUIRE(prim.cols() == f.text.rows());
    REQUIRE(dec.cols() == f.gtext.rows());
    for (int r = 0; r < prim.rows(); ++r) {
        double s1 = 0, s2 = 0;
        for (int c = 0; c < prim.cols(); ++c) s1 += prim.at(r, c);
        for (int c = 0; c < dec.cols(); ++c) s2 += dec.at(r, c);
        REQUIRE(s1 == Catch::Approx(1.0).margin(1e-9));
        REQUIRE(s2 == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("grounding row permutation equivariance", "[attention]") {
    Fixture f(91, 1, 3, 2, 4, 0);
    auto base = compute_cca(f.layer, f.x, f.text, f.gtext);
    // permute G_T rows; keys and values derive from the same rows, so the
    // output must be unchanged
    std::vector<int> perm{2, 0, 3, 1};
    Tensor<double> shuffled({4, f.d_text});
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < f.d_text; ++c) shuffled.at(r, c) = f.gtext.at(perm[static_cast<size_t>(r)], c);
    auto permuted = compute_cca(f.layer, f.x, f.text, shuffled);
    for (int64_t i = 0; i < base.size(); ++i)
        REQUIRE(permuted.data[static_cast<size_t>(i)] == Catch::Approx(base.data[static_cast<size_t>(i)]).margin(1e-12));
}

TEST_CASE("all modes pass finite-difference gradient checks", "[attention][grad][acceptance2]") {
    auto check_mode = [](AttentionMode mode, int heads) {
        Fixture f(100 + static_cast<int>(mode) * 7 + heads, heads);
        f.layer.mode = mode;
        f.layer.lambda_scale = 0.8;
        ConditionBundle<double> bundle = ConditionBundle<double>::empty(f.d_text, f.d_img);
        bundle.text = f.text;
        bundle.grounding_text = f.gtext;
        bundle.grounding_image = f.gimage;
        ParamList<double> params;
        f.layer.collect(params);
        auto loss = [&]() {
            f.layer.cache_sources(bundle);
            auto y = f.layer.forward(f.x, bundle);
            double s = 0;
            Tensor<double> gy(y.shape);
            for (int64_t i = 0; i < y.size(); ++i) {
                s += std::sin(y.data[static_cast<size_t>(i)]);
                gy.data[static_cast<size_t>(i)] = std::cos(y.data[static_cast<size_t>(i)]);
            }
            f.layer.backward(gy);
            return s;
        };
        auto rep = finite_diff_gradcheck<double>(loss, params, 1e-6);
        INFO(attention_mode_name(mode) << " heads=" << heads << " worst=" << rep.worst_param);
        // projections not used by the mode get zero analytic and zero FD grads
        REQUIRE(rep.max_rel_err < 1e-3);
    };
    for (int heads : {1, 2}) {
        check_mode(AttentionMode::CA, heads);
        check_mode(AttentionMode::DCALayout, heads);
        check_mode(AttentionMode::CCA, heads);
        check_mode(AttentionMode::FCA, heads);
        check_mode(AttentionMode::FullDCA, heads);
    }
}

TEST_CASE("bundle gradients reach grounding rows", "[attention][grad]") {
    // G_T and G_I rows feed trainable builders; their gradients must match
    // finite differences w.r.t. the row entries themselves.
    Fixture f(121);
    f.layer.mode = AttentionMode::FCA;
    f.layer.lambda_scale = 0.7;
    ConditionBundle<double> bundle = ConditionBundle<double>::empty(f.d_text, f.d_img);
    bundle.text = f.text;
    bundle.grounding_text = f.gtext;
    bundle.grounding_image = f.gimage;

    auto run = [&](const ConditionBundle<double>& b) {
        f.layer.cache_sources(b);
        auto y = f.layer.forward(f.x, b);
        double s = 0;
        for (auto v : y.data) s += std::sin(v);
        return s;
    };
    f.layer.cache_sources(bundle);
    auto y = f.layer.forward(f.x, bundle);
    Tensor<double> gy(y.shape);
    for (int64_t i = 0; i < y.size(); ++i) gy.data[static_cast<size_t>(i)] = std::cos(y.data[static_cast<size_t>(i)]);
    ParamList<double> params;
    f.layer.collect(params);
    zero_grads(params);
    auto grads = f.layer.backward(gy);

    const double h = 1e-6;
    for (int r = 0; r < bundle.grounding_text.rows(); ++r)
        for (int c = 0; c < f.d_text; ++c) {
            ConditionBundle<double> bp = bundle, bm = bundle;
            bp.grounding_text.at(r, c) += h;
            bm.grounding_text.at(r, c) -= h;
            double fd = (run(bp) - run(bm)) / (2 * h);
            REQUIRE(grads.grounding_text.at(r, c) == Catch::Approx(fd).margin(1e-5));
        }
    for (int r = 0; r < bundle.grounding_image.rows(); ++r)
        for (int c = 0; c < f.d_img; ++c) {
            ConditionBundle<double> bp = bundle, bm = bundle;
            bp.grounding_image.at(r, c) += h;
            bm.grounding_image.at(r, c) -= h;
            double fd = (run(bp) - run(bm)) / (2 * h);
            REQUIRE(grads.grounding_image.at(r, c) == Catch::Approx(fd).margin(1e-5));
        }
}
