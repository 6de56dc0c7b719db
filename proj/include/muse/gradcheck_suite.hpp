#pragma once

#include <string>
#include <vector>

#include "muse/gradcheck.hpp"
#include "muse/grounding.hpp"
#include "muse/denoiser.hpp"

namespace muse {

struct GradSuiteEntry {
    std::string name;
    double max_rel_err = 0.0;
};

// The finite-difference verification suite: every trainable parameter group
// in the attention layer (all modes), the grounding machinery including the
// resampler and empty tokens, and a one-block denoiser. Double precision,
// dims <= 8.
inline std::vector<GradSuiteEntry> run_gradcheck_suite() {
    std::vector<GradSuiteEntry> entries;

    auto scalar_loss = [](const Tensor<double>& y, Tensor<double>& gy) {
        double s = 0;
        gy = Tensor<double>(y.shape);
        for (int64_t i = 0; i < y.size(); ++i) {
            s += std::sin(y.data[static_cast<size_t>(i)]);
            gy.data[static_cast<size_t>(i)] = std::cos(y.data[static_cast<size_t>(i)]);
        }
        return s;
    };

    // attention layer in every mode
    for (AttentionMode mode : {AttentionMode::CA, AttentionMode::DCALayout, AttentionMode::CCA, AttentionMode::FCA,
                               AttentionMode::FullDCA}) {
        Rng rng(900 + static_cast<int>(mode));
        CrossAttentionLayer<double> layer;
        layer.init(5, 4, 3, 4, 1, rng, "attn");
        layer.mode = mode;
        layer.lambda_scale = 0.8;
        Tensor<double> x = Tensor<double>::randn({2, 5}, rng);
        ConditionBundle<double> bundle = ConditionBundle<double>::empty(4, 3);
        bundle.text = Tensor<double>::randn({3, 4}, rng);
        bundle.grounding_text = Tensor<double>::randn({2, 4}, rng);
        bundle.grounding_image = Tensor<double>::randn({4, 3}, rng);
        ParamList<double> params;
        layer.collect(params);
        auto loss = [&]() {
            layer.cache_sources(bundle);
            auto y = layer.forward(x, bundle);
            Tensor<double> gy;
            double s = scalar_loss(y, gy);
            layer.backward(gy);
            return s;
        };
        auto rep = finite_diff_gradcheck<double>(loss, params, 1e-6);
        entries.push_back({std::string("attention/") + attention_mode_name(mode), rep.max_rel_err});
    }

    // grounding assembly, both fusion arms, resampler and empty tokens included
    for (bool concat_arm : {false, true}) {
        GroundingBuilder<double> gb;
        Rng rng(950 + (concat_arm ? 1 : 0));
        gb.init(5, 4, 4, 5, 2, rng, "ground");
        gb.concat_image_grounding = concat_arm;
        SubjectConditionSet<double> conds;
        conds.pad();
        for (int s = 0; s < 2; ++s) {
            auto& sub = conds.subjects[static_cast<size_t>(s)];
            sub.present = true;
            sub.f_text = Tensor<double>::randn({5}, rng);
            sub.reference_patches = Tensor<double>::randn({3, 4}, rng);
            sub.box = BoundingBox{0.1 + 0.3 * s, 0.2, 0.4 + 0.3 * s, 0.7};
        }
        Tensor<double> prompt = Tensor<double>::randn({2, 5}, rng);
        BundleAssembler<double> as;
        as.gb = &gb;
        as.include_image = true;
        ParamList<double> params;
        gb.collect(params);
        auto loss = [&]() {
            auto bundle = as.assemble(prompt, conds, DropoutDecision{});
            Tensor<double> g_gt, g_gi;
            double s = scalar_loss(bundle.grounding_text, g_gt);
            s += scalar_loss(bundle.grounding_image, g_gi);
            as.backward(g_gt, g_gi);
            return s;
        };
        auto rep = finite_diff_gradcheck<double>(loss, params, 1e-6);
        entries.push_back({concat_arm ? "grounding/concat_arm" : "grounding/additive", rep.max_rel_err});
    }

    // one-block denoiser
    for (AttentionMode mode : {AttentionMode::CCA, AttentionMode::FullDCA}) {
        DenoiserConfig c;
        c.canvas = 8;
        c.d_model = 8;
        c.blocks = 1;
        c.d_h = 4;
        c.heads = 1;
        c.d_text = 5;
        c.d_img = 4;
        Rng rng(970 + static_cast<int>(mode));
        DenoiserNet<double> net;
        net.init(c, rng);
        net.set_mode(mode);
        net.head.w.value = Tensor<double>::randn({c.d_model, c.patch_dim()}, rng, 0.1);
        ConditionBundle<double> bundle = ConditionBundle<double>::empty(c.d_text, c.d_img);
        bundle.text = Tensor<double>::randn({3, c.d_text}, rng);
        bundle.grounding_text = Tensor<double>::randn({2, c.d_text}, rng);
        bundle.grounding_image = Tensor<double>::randn({4, c.d_img}, rng);
        Tensor<double> x_t = Tensor<double>::randn({c.pixel_count()}, rng, 0.5);
        ParamList<double> params;
        net.collect(params);
        auto loss = [&]() {
            auto y = net.forward(x_t, 17, bundle);
            Tensor<double> gy;
            double s = scalar_loss(y, gy);
            net.backward(gy);
            return s;
        };
        auto rep = finite_diff_gradcheck<double>(loss, params, 1e-5);
        entries.push_back({std::string("denoiser/") + attention_mode_name(mode), rep.max_rel_err});
    }

    return entries;
}

} // namespace muse
