#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "muse/config.hpp"
#include "muse/image_io.hpp"
#include "muse/trainer.hpp"

namespace muse {

// End-to-end orchestration shared by the CLI and the acceptance suite.
// Checkpoints and datasets are reused when already present in the run
// directory; training is deterministic, so reuse equals retraining.
template <class Real>
class Pipeline {
public:
    Pipeline(RunConfig cfg, std::string out_dir) : cfg_(std::move(cfg)), dir_(std::move(out_dir)) {
        namespace fs = std::filesystem;
        fs::create_directories(dir_);
        fs::create_directories(dir_ + "/data");
        fs::create_directories(dir_ + "/ckpt");
        fs::create_directories(dir_ + "/logs");
        fs::create_directories(dir_ + "/reports");
        cfg_.archive(dir_ + "/resolved.cfg");
        mc_ = cfg_.model_config();
        sched_ = DiffusionSchedule<Real>::linear(cfg_.get_int("schedule_t"));
    }

    const RunConfig& config() const { return cfg_; }
    const std::string& dir() const { return dir_; }
    const DiffusionSchedule<Real>& schedule() const { return sched_; }
    const ModelConfig& model_config() const { return mc_; }

    // ---- datasets ----

    const std::vector<Scene<Real>>& train_scenes() {
        if (train_.empty()) {
            std::string path = dir_ + "/data/train_prior.ds";
            if (std::filesystem::exists(path)) train_ = read_dataset<Real>(path, SplitTag::train);
            else {
                const int n = cfg_.get_int("train_scenes");
                const uint64_t seed = derive_seed(cfg_.get_u64("seed"), 0xd5);
                train_.resize(static_cast<size_t>(n));
                for (int i = 0; i < n; ++i)
                    train_[static_cast<size_t>(i)] =
                        generate_scene<Real>(derive_seed(seed, static_cast<uint64_t>(i)), 2 + i % 5, LayoutMode::prior);
                write_dataset(train_, path);
            }
        }
        return train_;
    }

    std::vector<Scene<Real>> layout_eval_scenes(LayoutMode mode) const {
        return make_layout_eval_scenes<Real>(derive_seed(cfg_.get_u64("seed"), 0xe7a1, mode == LayoutMode::prior),
                                             cfg_.get_int("eval_per_level"), mode);
    }

    std::vector<Scene<Real>> subject_eval_scenes() const {
        return make_subject_eval_scenes<Real>(derive_seed(cfg_.get_u64("seed"), 0xe7a2),
                                              cfg_.get_int("eval_subject_scenes"), LayoutMode::uniform);
    }

    // ---- models / checkpoints ----

    MuseModel<Real> fresh_model() const {
        MuseModel<Real> m;
        m.init(mc_);
        return m;
    }

    std::string base_checkpoint() {
        std::string path = dir_ + "/ckpt/base.ckpt";
        if (!std::filesystem::exists(path)) {
            MuseModel<Real> model = fresh_model();
            AdamW<Real> opt;
            TrainConfig tc = cfg_.train_config(StagePhase::pretrain);
            tc.log_path = dir_ + "/logs/pretrain.jsonl";
            pretrain_base(model, opt, tc, train_scenes(), sched_);
            save_model_checkpoint(path, model, &opt);
        }
        return path;
    }

    // stage-1-only arm (Table 3): strategy two_stage -> CCA, full_dca -> DCA
    std::string stage1_checkpoint(Strategy strategy) {
        std::string name = std::string(strategy_name(strategy)) + ".stage1.ckpt";
        std::string path = dir_ + "/ckpt/" + name;
        if (!std::filesystem::exists(path)) {
            if (strategy == Strategy::joint) return ensure_copy(stage1_checkpoint(Strategy::two_stage), path);
            MuseModel<Real> model = fresh_model();
            load_model_checkpoint<Real>(base_checkpoint(), model, nullptr);
            AdamW<Real> opt;
            TrainConfig tc = cfg_.train_config(StagePhase::stage1);
            tc.strategy = strategy;
            tc.log_path = dir_ + "/logs/" + std::string(strategy_name(strategy)) + ".stage1.jsonl";
            run_stage(model, opt, tc, train_scenes(), sched_);
            save_model_checkpoint(path, model, &opt);
        }
        return path;
    }

    std::string final_checkpoint(Strategy strategy) {
        std::string path = dir_ + "/ckpt/" + std::string(strategy_name(strategy)) + ".final.ckpt";
        if (std::filesystem::exists(path)) return path;

        MuseModel<Real> model = fresh_model();
        AdamW<Real> opt;
        if (strategy == Strategy::single_stage) {
            load_model_checkpoint<Real>(base_checkpoint(), model, nullptr);
            TrainConfig tc = cfg_.train_config(StagePhase::stage1);
            tc.strategy = strategy;
            tc.steps = 2 * cfg_.get_int("stage_steps"); // same total budget as the two-phase arms
            tc.log_path = dir_ + "/logs/single_stage.jsonl";
            run_stage(model, opt, tc, train_scenes(), sched_);
        } else {
            load_model_checkpoint<Real>(stage1_checkpoint(strategy), model, nullptr);
            TrainConfig tc = cfg_.train_config(StagePhase::stage2);
            tc.strategy = strategy;
            tc.log_path = dir_ + "/logs/" + std::string(strategy_name(strategy)) + ".stage2.jsonl";
            run_stage(model, opt, tc, train_scenes(), sched_);
        }
        save_model_checkpoint(path, model, &opt);
        return path;
    }

    MuseModel<Real> load(const std::string& ckpt) {
        MuseModel<Real> model = fresh_model();
        load_model_checkpoint<Real>(ckpt, model, nullptr);
        return model;
    }

    static AttentionMode final_mode(Strategy strategy) {
        return strategy == Strategy::full_dca ? AttentionMode::FullDCA : AttentionMode::FCA;
    }
    static AttentionMode stage1_mode(Strategy strategy) {
        return strategy == Strategy::full_dca ? AttentionMode::DCALayout : AttentionMode::CCA;
    }

    // ---- evaluation ----

    std::vector<uint64_t> eval_seeds() const {
        std::vector<uint64_t> seeds;
        const int n = cfg_.get_int("eval_seed_count");
        for (int i = 0; i < n; ++i) seeds.push_back(derive_seed(cfg_.get_u64("seed"), 0x5eed, static_cast<uint64_t>(i)));
        return seeds;
    }

    std::pair<double, double> thresholds() {
        if (theta_lo_ == 0.0 && theta_hi_ == 0.0) {
            theta_lo_ = cfg_.get_double("threshold_lo");
            theta_hi_ = cfg_.get_double("threshold_hi");
            if (theta_lo_ == 0.0 && theta_hi_ == 0.0) {
                MuseModel<Real> probe = fresh_model(); // encoders only
                auto [lo, hi] = calibrate_identity_thresholds(probe.enc, 200, derive_seed(cfg_.get_u64("seed"), 0xca1));
                theta_lo_ = lo;
                theta_hi_ = hi;
            }
        }
        return {theta_lo_, theta_hi_};
    }

    EvalReport eval_layout(MuseModel<Real>& model, AttentionMode mode, const std::vector<Scene<Real>>& scenes) {
        EvalOptions opts;
        opts.sampler = cfg_.sampler_config();
        opts.seeds = eval_seeds();
        opts.conditioned_limit = kMaxSubjects;
        opts.with_identity = false;
        return evaluate_model(model, mode, scenes, sched_, opts);
    }

    EvalReport eval_subject(MuseModel<Real>& model, AttentionMode mode, double lambda_override = -1.0) {
        auto [lo, hi] = thresholds();
        EvalOptions opts;
        opts.sampler = cfg_.sampler_config();
        if (lambda_override >= 0.0) opts.sampler.lambda = lambda_override;
        opts.seeds = eval_seeds();
        opts.conditioned_limit = 2; // third scene subject stays prompt-only context
        opts.with_identity = true;
        opts.threshold_lo = lo;
        opts.threshold_hi = hi;
        auto scenes = subject_eval_scenes();
        return evaluate_model(model, mode, scenes, sched_, opts);
    }

    void write_report(const std::string& name, const nlohmann::json& j) const {
        std::ofstream out(dir_ + "/reports/" + name, std::ios::trunc);
        out << j.dump(2) << "\n";
    }

private:
    static std::string ensure_copy(const std::string& from, const std::string& to) {
        if (!std::filesystem::exists(to)) std::filesystem::copy_file(from, to);
        return to;
    }

    RunConfig cfg_;
    std::string dir_;
    ModelConfig mc_;
    DiffusionSchedule<Real> sched_;
    std::vector<Scene<Real>> train_;
    double theta_lo_ = 0.0, theta_hi_ = 0.0;
};

} // namespace muse
