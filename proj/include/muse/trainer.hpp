#pragma once

#include <chrono>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "muse/checkpoint.hpp"
#include "muse/denoiser.hpp"
#include "muse/evaluator.hpp"
#include "muse/grounding.hpp"
#include "muse/optim.hpp"
#include "muse/parallel.hpp"
#include "muse/world.hpp"

#include <json.hpp>

namespace muse {

// ---- the assembled model ----

struct ModelConfig {
    DenoiserConfig net;
    int freq_count = 16;
    int grounding_hidden = 64;
    int resampler_depth = 2;
    uint64_t init_seed = 1;
    uint64_t encoder_seed = 2;
};

template <class Real>
struct MuseModel {
    ModelConfig cfg;
    DenoiserNet<Real> net;
    GroundingBuilder<Real> gb;
    ToyEncoders<Real> enc; // frozen, not part of the parameter set
    ParamList<Real> params;

    void init(const ModelConfig& c) {
        cfg = c;
        Rng rng(derive_seed(c.init_seed, 0x111717));
        net.init(c.net, rng);
        gb.init(c.net.d_text, c.net.d_img, c.freq_count, c.grounding_hidden, c.resampler_depth, rng, "ground");
        enc.init(c.net.d_text, c.net.d_img, c.encoder_seed);
        collect();
    }

    void collect() {
        params.clear();
        net.collect(params);
        gb.collect(params);
    }

    uint64_t hash_group(ParamGroup g) const { return group_hash(params, g); }
};

// ---- per-sample condition construction ----

enum class ReferenceSource { gt_crop, canonical };

template <class Real>
struct ConditionPipeline {
    MuseModel<Real>* model = nullptr;
    bool include_image = false;
    bool include_text_grounding = true;
    double p_drop = 0.1;
    int condition_limit = kMaxSubjects;            // conditioned subject cap
    ReferenceSource ref_source = ReferenceSource::gt_crop;

    SubjectConditionSet<Real> conditions(const Scene<Real>& scene) const {
        SubjectConditionSet<Real> conds;
        conds.pad();
        int n = std::min({static_cast<int>(scene.subjects.size()), condition_limit, kMaxSubjects});
        for (int i = 0; i < n; ++i) {
            const auto& sub = scene.subjects[static_cast<size_t>(i)];
            auto& slot = conds.subjects[static_cast<size_t>(i)];
            slot.present = true;
            slot.class_token_id = sub.class_id;
            slot.box = sub.box;
            slot.f_text = model->enc.class_feature(sub.class_id);
            if (include_image) {
                Image<Real> ref = ref_source == ReferenceSource::gt_crop
                                      ? crop_image(scene.canvas, sub.box)
                                      : canonical_reference<Real>(sub.class_id, sub.identity_id);
                slot.reference_patches = model->enc.encode_reference(ref).first;
            }
        }
        if (conds.present_count() == 0) throw std::invalid_argument("conditions: no present subjects");
        return conds;
    }

    BundleAssembler<Real> make_assembler() const {
        BundleAssembler<Real> as;
        as.gb = &model->gb;
        as.include_image = include_image;
        as.include_text_grounding = include_text_grounding;
        return as;
    }

    // the dropped-condition bundle used for CFG unconditional passes
    ConditionBundle<Real> unconditional_bundle(const SubjectConditionSet<Real>& conds) const {
        BundleAssembler<Real> as = make_assembler();
        DropoutDecision drop;
        drop.drop_caption = true;
        drop.drop_subject_conditions = true;
        Tensor<Real> no_prompt({0, model->cfg.net.d_text});
        return as.assemble(no_prompt, conds, drop);
    }
};

// ---- training loss ----

// Noise-prediction MSE for one scene; fills parameter gradients when
// with_backward is set. Deterministic given (weights, seed).
template <class Real>
inline Real training_loss(MuseModel<Real>& model, const Scene<Real>& scene, const DiffusionSchedule<Real>& sched,
                          uint64_t seed, const ConditionPipeline<Real>& pipeline, bool with_backward = true) {
    Rng tr(derive_seed(seed, 0x7177));
    const int t = static_cast<int>(tr.uniform_int(0, sched.T - 1));
    Tensor<Real> eps = gaussian_image<Real>(model.cfg.net.pixel_count(), derive_seed(seed, 0xe952));
    Tensor<Real> x0 = image_to_model(scene.canvas);
    Tensor<Real> x_t = q_sample(x0, t, eps, sched);

    auto conds = pipeline.conditions(scene);
    auto drop = pad_and_dropout_decision(pipeline.p_drop, derive_seed(seed, 0xd209));
    BundleAssembler<Real> as = pipeline.make_assembler();
    Tensor<Real> prompt = model.enc.encode_prompt(scene.prompt_tokens);
    ConditionBundle<Real> bundle = as.assemble(prompt, conds, drop);

    Tensor<Real> eps_hat = model.net.forward(x_t, t, bundle);
    const int64_t n = eps_hat.size();
    Real loss = 0;
    for (int64_t i = 0; i < n; ++i) {
        const Real d = eps_hat.data[static_cast<size_t>(i)] - eps.data[static_cast<size_t>(i)];
        loss += d * d;
    }
    loss /= static_cast<Real>(n);
    if (with_backward) {
        Tensor<Real> g(eps_hat.shape);
        for (int64_t i = 0; i < n; ++i)
            g.data[static_cast<size_t>(i)] =
                Real(2) * (eps_hat.data[static_cast<size_t>(i)] - eps.data[static_cast<size_t>(i)]) / static_cast<Real>(n);
        auto ng = model.net.backward(g);
        if (bundle.grounding_text.rows() > 0 || bundle.grounding_image.rows() > 0) {
            Tensor<Real> g_gt = ng.grounding_text.size() > 0 ? ng.grounding_text
                                                             : Tensor<Real>({bundle.grounding_text.rows(),
                                                                             model.cfg.net.d_text});
            Tensor<Real> g_gi = ng.grounding_image.size() > 0 ? ng.grounding_image
                                                              : Tensor<Real>({bundle.grounding_image.rows(),
                                                                              model.cfg.net.d_img});
            as.backward(g_gt, g_gi);
        }
    }
    return loss;
}

// ---- strategies ----

enum class Strategy { two_stage, full_dca, single_stage, joint, reversed };
enum class StagePhase { pretrain, stage1, stage2 };

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::two_stage: return "two_stage";
        case Strategy::full_dca: return "full_dca";
        case Strategy::single_stage: return "single_stage";
        case Strategy::joint: return "joint";
        case Strategy::reversed: return "reversed";
    }
    return "?";
}

inline Strategy strategy_from_name(const std::string& s) {
    if (s == "two_stage") return Strategy::two_stage;
    if (s == "full_dca") return Strategy::full_dca;
    if (s == "single_stage") return Strategy::single_stage;
    if (s == "joint") return Strategy::joint;
    if (s == "reversed") return Strategy::reversed;
    throw std::invalid_argument("unknown strategy: " + s);
}

struct TrainConfig {
    Strategy strategy = Strategy::two_stage;
    StagePhase stage = StagePhase::stage1;
    double lr = 1e-4;
    int batch_size = 16;
    int steps = 10000;
    uint64_t seed = 1;
    double lambda = 0.8;
    double p_drop = 0.1;
    int log_every = 250;
    std::string log_path;
};

// Resolved per-stage behavior: attention mode, which parameter groups train,
// which condition blocks are built, and where the stage sits in the shared
// data stream.
struct StagePlan {
    AttentionMode mode = AttentionMode::CA;
    bool train_base = false, train_layout = false, train_subject = false;
    bool include_image = false, include_text_grounding = true;
    bool init_layout_from_base = false;
    int stream_offset = 0; // in steps; all strategies share one stream
};

inline StagePlan resolve_stage(Strategy strategy, StagePhase stage, int stage_steps) {
    StagePlan p;
    if (stage == StagePhase::pretrain) {
        p.mode = AttentionMode::CA;
        p.train_base = true;
        p.include_text_grounding = false;
        return p;
    }
    const bool s1 = stage == StagePhase::stage1;
    switch (strategy) {
        case Strategy::two_stage:
        case Strategy::joint: // identical first half; joint unfreezes layout in stage 2
            if (s1) {
                p.mode = AttentionMode::CCA;
                p.train_layout = true;
                p.init_layout_from_base = true;
            } else {
                p.mode = AttentionMode::FCA;
                p.train_subject = true;
                p.train_layout = strategy == Strategy::joint;
                p.include_image = true;
                p.stream_offset = stage_steps;
            }
            break;
        case Strategy::full_dca:
            if (s1) {
                p.mode = AttentionMode::DCALayout;
                p.train_layout = true;
                p.init_layout_from_base = true;
            } else {
                p.mode = AttentionMode::FullDCA;
                p.train_subject = true;
                p.include_image = true;
                p.stream_offset = stage_steps;
            }
            break;
        case Strategy::single_stage:
            if (!s1) throw std::invalid_argument("single_stage has no stage 2");
            p.mode = AttentionMode::FCA;
            p.train_layout = true;
            p.train_subject = true;
            p.init_layout_from_base = true;
            p.include_image = true;
            break;
        case Strategy::reversed:
            if (s1) { // subject synthesis first, no grounding text in the bundle
                p.mode = AttentionMode::FCA;
                p.train_subject = true;
                p.include_image = true;
                p.include_text_grounding = false;
            } else {
                p.mode = AttentionMode::FCA;
                p.train_layout = true;
                p.init_layout_from_base = true;
                p.include_image = true;
                p.stream_offset = stage_steps;
            }
            break;
    }
    return p;
}

template <class Real>
inline void apply_freezes(MuseModel<Real>& model, const StagePlan& plan) {
    set_group_frozen(model.params, ParamGroup::base, !plan.train_base);
    set_group_frozen(model.params, ParamGroup::layout, !plan.train_layout);
    set_group_frozen(model.params, ParamGroup::subject, !plan.train_subject);
}

// ---- the training loop ----

// One stage (or the pretrain phase) from start_step to cfg.steps. The data,
// noise, timestep and dropout draws are all counter-based on
// (seed, stream_offset + step, slot), so a resumed run replays the
// uninterrupted one exactly and all strategies consume identical streams.
template <class Real>
inline void run_stage(MuseModel<Real>& model, AdamW<Real>& opt, const TrainConfig& cfg,
                      const std::vector<Scene<Real>>& dataset, const DiffusionSchedule<Real>& sched,
                      int start_step = 0) {
    if (dataset.empty()) throw std::invalid_argument("run_stage: empty dataset");
    StagePlan plan = resolve_stage(cfg.strategy, cfg.stage, cfg.steps);
    model.net.set_mode(plan.mode);
    model.net.set_lambda(static_cast<Real>(cfg.lambda));
    apply_freezes(model, plan);
    if (plan.init_layout_from_base && start_step == 0)
        for (auto& blk : model.net.blocks) blk.cross.init_grounding_text_from_base();

    ConditionPipeline<Real> pipeline;
    pipeline.model = &model;
    pipeline.include_image = plan.include_image;
    pipeline.include_text_grounding = plan.include_text_grounding;
    pipeline.p_drop = cfg.p_drop;
    pipeline.ref_source = ReferenceSource::gt_crop;

    opt.lr = static_cast<Real>(cfg.lr);

    std::ofstream log;
    if (!cfg.log_path.empty()) log.open(cfg.log_path, start_step == 0 ? std::ios::trunc : std::ios::app);

    const uint64_t stream = derive_seed(cfg.seed, 0xda7a);
    for (int step = start_step; step < cfg.steps; ++step) {
        const int global = plan.stream_offset + step;
        zero_grads(model.params);
        Real loss_sum = 0;
        for (int slot = 0; slot < cfg.batch_size; ++slot) {
            const uint64_t draw = derive_seed(stream, static_cast<uint64_t>(global), static_cast<uint64_t>(slot));
            const auto& scene = dataset[static_cast<size_t>(draw % dataset.size())];
            const uint64_t sample_seed = derive_seed(stream, 0x5a, static_cast<uint64_t>(global), static_cast<uint64_t>(slot));
            loss_sum += training_loss(model, scene, sched, sample_seed, pipeline, /*with_backward=*/true);
        }
        const Real batch_loss = loss_sum / static_cast<Real>(cfg.batch_size);
        if (!std::isfinite(static_cast<double>(batch_loss)))
            throw std::runtime_error("run_stage: diverged (non-finite loss) at step " + std::to_string(step));
        for (auto* p : model.params)
            if (!p->frozen && p->trainable)
                for (auto& g : p->grad.data) g /= static_cast<Real>(cfg.batch_size);
        opt.step(model.params);
        if (log.is_open() && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
            nlohmann::json j;
            j["step"] = step;
            j["loss"] = static_cast<double>(batch_loss);
            j["lr"] = cfg.lr;
            j["strategy"] = strategy_name(cfg.strategy);
            j["stage"] = cfg.stage == StagePhase::pretrain ? 0 : (cfg.stage == StagePhase::stage1 ? 1 : 2);
            log << j.dump() << "\n";
            log.flush();
        }
    }
}

// Stands in for the pretrained backbone: text-only conditioning on
// prior-layout scenes.
template <class Real>
inline void pretrain_base(MuseModel<Real>& model, AdamW<Real>& opt, TrainConfig cfg,
                          const std::vector<Scene<Real>>& dataset, const DiffusionSchedule<Real>& sched,
                          int start_step = 0) {
    cfg.stage = StagePhase::pretrain;
    run_stage(model, opt, cfg, dataset, sched, start_step);
}

// Mean eval-split loss with conditioning but no dropout and no backward.
template <class Real>
inline double eval_loss(MuseModel<Real>& model, const std::vector<Scene<Real>>& scenes,
                        const DiffusionSchedule<Real>& sched, AttentionMode mode, uint64_t seed) {
    model.net.set_mode(mode);
    ConditionPipeline<Real> pipeline;
    pipeline.model = &model;
    pipeline.include_image = mode == AttentionMode::FCA || mode == AttentionMode::FullDCA;
    pipeline.include_text_grounding = mode != AttentionMode::CA;
    pipeline.p_drop = 0.0;
    double sum = 0;
    for (size_t i = 0; i < scenes.size(); ++i)
        sum += static_cast<double>(training_loss(model, scenes[i], sched, derive_seed(seed, 0xea1, i), pipeline,
                                                 /*with_backward=*/false));
    return sum / static_cast<double>(scenes.size());
}

// ---- checkpointing ----

template <class Real>
inline void save_model_checkpoint(const std::string& path, MuseModel<Real>& model, const AdamW<Real>* opt = nullptr) {
    save_snapshot(path, model.params, opt);
}

template <class Real>
inline void load_model_checkpoint(const std::string& path, MuseModel<Real>& model, AdamW<Real>* opt) {
    load_snapshot(path, model.params, opt);
}

// ---- evaluation harness ----

struct EvalOptions {
    SamplerConfig sampler;
    std::vector<uint64_t> seeds{101, 202, 303, 404, 505}; // five sampling seeds
    int conditioned_limit = kMaxSubjects; // subjects receiving boxes/references
    bool with_identity = false;           // MS-style metrics need references
    double threshold_lo = 0.0, threshold_hi = 0.0;
};

// Samples every scene under every seed and aggregates the metric suite.
// Conditioning uses canonical references; prompts always cover all scene
// subjects while the condition set may be a subset (prompt-only context
// subjects are what the text_align metric watches).
template <class Real>
inline EvalReport evaluate_model(MuseModel<Real>& model, AttentionMode mode, const std::vector<Scene<Real>>& scenes,
                                 const DiffusionSchedule<Real>& sched, const EvalOptions& opts) {
    model.net.set_mode(mode);
    ConditionPipeline<Real> pipeline;
    pipeline.model = &model;
    pipeline.include_image = mode == AttentionMode::FCA || mode == AttentionMode::FullDCA;
    pipeline.include_text_grounding = mode != AttentionMode::CA;
    pipeline.p_drop = 0.0;
    pipeline.condition_limit = opts.conditioned_limit;
    pipeline.ref_source = ReferenceSource::canonical;

    EvalReport rep;
    rep.seeds = opts.seeds;
    rep.threshold_lo = opts.threshold_lo;
    rep.threshold_hi = opts.threshold_hi;
    double text_sum = 0, ident_sum = 0, time_sum = 0;
    int text_n = 0, ident_n = 0, sr_lo_hits = 0, sr_hi_hits = 0, sr_n = 0, images = 0;

    for (uint64_t seed : opts.seeds) {
        for (size_t si = 0; si < scenes.size(); ++si) {
            const auto& scene = scenes[si];
            auto conds = pipeline.conditions(scene);
            BundleAssembler<Real> as = pipeline.make_assembler();
            Tensor<Real> prompt = model.enc.encode_prompt(scene.prompt_tokens);
            ConditionBundle<Real> cond = as.assemble(prompt, conds, DropoutDecision{});
            ConditionBundle<Real> uncond = pipeline.unconditional_bundle(conds);

            auto t0 = std::chrono::steady_clock::now();
            Image<Real> img =
                sample_image(model.net, cond, uncond, opts.sampler, sched, derive_seed(seed, 0x9e2, si));
            auto t1 = std::chrono::steady_clock::now();
            time_sum += std::chrono::duration<double>(t1 - t0).count();
            ++images;

            auto dets = detect_shapes(img);
            const int conditioned = std::min<int>(opts.conditioned_limit, static_cast<int>(scene.subjects.size()));
            std::vector<SubjectSpec> gt(scene.subjects.begin(), scene.subjects.begin() + conditioned);
            auto match = layout_success(gt, dets);
            rep.add_layout_outcome(conditioned, match.success);
            text_sum += text_align(dets, scene.prompt_tokens);
            ++text_n;

            if (opts.with_identity) {
                std::vector<double> sims;
                for (const auto& sub : gt) {
                    auto ref = canonical_reference<Real>(sub.class_id, sub.identity_id);
                    double s = identity_local(img, sub.box, ref, model.enc);
                    sims.push_back(s);
                    ident_sum += s;
                    ++ident_n;
                }
                sr_lo_hits += lms_success(sims, opts.threshold_lo) ? 1 : 0;
                sr_hi_hits += lms_success(sims, opts.threshold_hi) ? 1 : 0;
                ++sr_n;
            }
        }
    }
    rep.sample_count = images;
    rep.text_align_score = text_n ? text_sum / text_n : 0.0;
    rep.identity_local_mean = ident_n ? ident_sum / ident_n : 0.0;
    rep.sr_lo = sr_n ? static_cast<double>(sr_lo_hits) / sr_n : 0.0;
    rep.sr_hi = sr_n ? static_cast<double>(sr_hi_hits) / sr_n : 0.0;
    rep.mean_sample_seconds = images ? time_sum / images : 0.0;
    rep.finalize();
    return rep;
}

// Eval scene sets. The layout benchmark spans L2..L6; the subject benchmark
// uses 3-subject scenes with 2 conditioned (the third is prompt-only
// context).
template <class Real>
inline std::vector<Scene<Real>> make_layout_eval_scenes(uint64_t seed, int per_level, LayoutMode mode) {
    std::vector<Scene<Real>> scenes;
    for (int lvl = 2; lvl <= 6; ++lvl)
        for (int i = 0; i < per_level; ++i)
            scenes.push_back(generate_scene<Real>(derive_seed(seed, static_cast<uint64_t>(lvl), static_cast<uint64_t>(i)),
                                                  lvl, mode));
    return scenes;
}

template <class Real>
inline std::vector<Scene<Real>> make_subject_eval_scenes(uint64_t seed, int count, LayoutMode mode) {
    std::vector<Scene<Real>> scenes;
    for (int i = 0; i < count; ++i)
        scenes.push_back(generate_scene<Real>(derive_seed(seed, 0x5cb, static_cast<uint64_t>(i)), 3, mode));
    return scenes;
}

} // namespace muse
