// muse: layout-controllable multi-subject diffusion on a synthetic shapes
// world. One binary: dataset generation, staged training, sampling,
// evaluation, ablation suites, gradient verification.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "muse/config.hpp"
#include "muse/gradcheck_suite.hpp"
#include "muse/image_io.hpp"
#include "muse/pipeline.hpp"
#include "muse/trainer.hpp"

namespace fs = std::filesystem;
using namespace muse;

namespace {

struct Flags {
    std::string config_path;
    std::string out = "runs/default";
    std::string dataset_path;
    std::string checkpoint;
    std::string strategy;
    std::string mode;
    std::string values;
    std::string suite;
    std::string layout;
    int stage = 0;
    int steps = -1;
    int count = -1;
    double lambda = -1.0;
    double cfg_weight = -1.0;
    long long seed = -1;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config_path, "key=value config file");
    cmd->add_option("--seed", f.seed, "master seed");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--lambda", f.lambda, "image-branch control scale");
    cmd->add_option("--cfg", f.cfg_weight, "classifier-free guidance weight");
    cmd->add_option("--steps", f.steps, "step count override");
}

// precedence: flags > config file > defaults
RunConfig resolve_config(const Flags& f, bool steps_are_stage = true) {
    RunConfig cfg;
    if (!f.config_path.empty()) cfg.load_file(f.config_path);
    if (f.seed >= 0) cfg.set("seed", std::to_string(f.seed));
    if (f.lambda >= 0) cfg.set("lambda", std::to_string(f.lambda));
    if (f.cfg_weight >= 0) cfg.set("cfg_weight", std::to_string(f.cfg_weight));
    if (f.steps >= 0) cfg.set(steps_are_stage ? "stage_steps" : "pretrain_steps", std::to_string(f.steps));
    if (!f.strategy.empty()) cfg.set("strategy", f.strategy);
    if (!f.layout.empty()) cfg.set("layout_mode", f.layout);
    return cfg;
}

std::vector<Scene<float>> load_or_generate_dataset(const Flags& f, const RunConfig& cfg) {
    if (!f.dataset_path.empty()) return read_dataset<float>(f.dataset_path, SplitTag::train);
    const int n = cfg.get_int("train_scenes");
    const uint64_t seed = derive_seed(cfg.get_u64("seed"), 0xd5);
    LayoutMode mode = cfg.get("layout_mode") == "uniform" ? LayoutMode::uniform : LayoutMode::prior;
    std::vector<Scene<float>> scenes(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        scenes[static_cast<size_t>(i)] = generate_scene<float>(derive_seed(seed, static_cast<uint64_t>(i)), 2 + i % 5, mode);
    return scenes;
}

int cmd_dataset(const Flags& f) {
    RunConfig cfg = resolve_config(f);
    if (f.count > 0) cfg.set("train_scenes", std::to_string(f.count));
    fs::create_directories(f.out);
    fs::create_directories(f.out + "/previews");
    cfg.archive(f.out + "/resolved.cfg");
    auto scenes = load_or_generate_dataset(f, cfg);
    write_dataset(scenes, f.out + "/train_prior.ds");
    auto eval_scenes = make_layout_eval_scenes<float>(derive_seed(cfg.get_u64("seed"), 0xe7a1, 0),
                                                      cfg.get_int("eval_per_level"), LayoutMode::uniform);
    write_dataset(eval_scenes, f.out + "/eval_uniform.ds");
    for (int i = 0; i < std::min<int>(8, static_cast<int>(scenes.size())); ++i)
        write_ppm(scenes[static_cast<size_t>(i)].canvas, f.out + "/previews/train_" + std::to_string(i) + ".ppm");
    std::printf("dataset: %zu train scenes, %zu eval scenes -> %s\n", scenes.size(), eval_scenes.size(), f.out.c_str());
    return 0;
}

int cmd_pretrain(const Flags& f) {
    RunConfig cfg = resolve_config(f, /*steps_are_stage=*/false);
    fs::create_directories(f.out);
    cfg.archive(f.out + "/resolved.cfg");
    auto dataset = load_or_generate_dataset(f, cfg);
    auto sched = DiffusionSchedule<float>::linear(cfg.get_int("schedule_t"));
    MuseModel<float> model;
    model.init(cfg.model_config());
    AdamW<float> opt;
    TrainConfig tc = cfg.train_config(StagePhase::pretrain);
    tc.log_path = f.out + "/pretrain.jsonl";
    pretrain_base(model, opt, tc, dataset, sched);
    save_model_checkpoint(f.out + "/base.ckpt", model, &opt);
    std::printf("pretrain: %d steps -> %s/base.ckpt\n", tc.steps, f.out.c_str());
    return 0;
}

int cmd_train(const Flags& f) {
    if (f.stage != 1 && f.stage != 2) throw std::invalid_argument("train: --stage must be 1 or 2");
    RunConfig cfg = resolve_config(f);
    fs::create_directories(f.out);
    cfg.archive(f.out + "/resolved.cfg");
    auto dataset = load_or_generate_dataset(f, cfg);
    auto sched = DiffusionSchedule<float>::linear(cfg.get_int("schedule_t"));
    MuseModel<float> model;
    model.init(cfg.model_config());
    load_model_checkpoint<float>(f.checkpoint, model, nullptr);
    AdamW<float> opt;
    TrainConfig tc = cfg.train_config(f.stage == 1 ? StagePhase::stage1 : StagePhase::stage2);
    tc.log_path = f.out + "/train.jsonl";
    run_stage(model, opt, tc, dataset, sched);
    std::string out_ckpt =
        f.out + "/" + std::string(strategy_name(tc.strategy)) + ".stage" + std::to_string(f.stage) + ".ckpt";
    save_model_checkpoint(out_ckpt, model, &opt);
    std::printf("train: %s stage %d, %d steps -> %s\n", strategy_name(tc.strategy), f.stage, tc.steps, out_ckpt.c_str());
    return 0;
}

int cmd_sample(const Flags& f) {
    RunConfig cfg = resolve_config(f);
    if (f.steps >= 0) cfg.set("sample_steps", std::to_string(f.steps)); // --steps means sampler steps here
    fs::create_directories(f.out);
    cfg.archive(f.out + "/resolved.cfg");
    auto sched = DiffusionSchedule<float>::linear(cfg.get_int("schedule_t"));
    MuseModel<float> model;
    model.init(cfg.model_config());
    load_model_checkpoint<float>(f.checkpoint, model, nullptr);
    AttentionMode mode = f.mode.empty() ? AttentionMode::FCA : attention_mode_from_name(f.mode);
    model.net.set_mode(mode);

    ConditionPipeline<float> pipeline;
    pipeline.model = &model;
    pipeline.include_image = mode == AttentionMode::FCA || mode == AttentionMode::FullDCA;
    pipeline.include_text_grounding = mode != AttentionMode::CA;
    pipeline.p_drop = 0.0;
    pipeline.ref_source = ReferenceSource::canonical;

    const int count = f.count > 0 ? f.count : 4;
    const uint64_t seed = cfg.get_u64("seed");
    SamplerConfig sc = cfg.sampler_config();
    for (int i = 0; i < count; ++i) {
        auto scene =
            generate_scene<float>(derive_seed(seed, 0x5ce, static_cast<uint64_t>(i)), 2 + i % 3, LayoutMode::uniform);
        auto conds = pipeline.conditions(scene);
        BundleAssembler<float> as = pipeline.make_assembler();
        auto cond = as.assemble(model.enc.encode_prompt(scene.prompt_tokens), conds, DropoutDecision{});
        auto uncond = pipeline.unconditional_bundle(conds);
        Image<float> img = sample_image(model.net, cond, uncond, sc, sched, derive_seed(seed, 0x139, static_cast<uint64_t>(i)));
        std::string stem = f.out + "/sample_" + std::to_string(i);
        write_ppm(img, stem + ".ppm");
        write_sample_sidecar(stem + ".json", scene, seed, static_cast<int>(scene.subjects.size()), sc.lambda,
                             sc.cfg_weight);
    }
    std::printf("sample: %d images -> %s\n", count, f.out.c_str());
    return 0;
}

int cmd_eval(const Flags& f) {
    RunConfig cfg = resolve_config(f);
    Pipeline<float> pipe(cfg, f.out);
    MuseModel<float> model = pipe.load(f.checkpoint);
    AttentionMode mode = f.mode.empty() ? AttentionMode::FCA : attention_mode_from_name(f.mode);
    std::string suite = f.suite.empty() ? "subject" : f.suite;
    EvalReport rep;
    if (suite == "layout") {
        auto scenes =
            pipe.layout_eval_scenes(cfg.get("layout_mode") == "prior" ? LayoutMode::prior : LayoutMode::uniform);
        rep = pipe.eval_layout(model, mode, scenes);
    } else if (suite == "subject") {
        rep = pipe.eval_subject(model, mode);
    } else {
        throw std::invalid_argument("eval: unknown --suite " + suite);
    }
    pipe.write_report("eval_" + suite + ".json", rep.to_json());
    std::ofstream csv(f.out + "/reports/eval_" + suite + ".csv", std::ios::trunc);
    csv << rep.to_csv();
    std::cout << rep.to_json().dump(2) << "\n";
    return 0;
}

int cmd_ablate(const Flags& f) {
    RunConfig cfg = resolve_config(f);
    Pipeline<float> pipe(cfg, f.out);
    std::string suite = f.suite.empty() ? "table3" : f.suite;

    if (suite == "table3") {
        auto scenes = pipe.layout_eval_scenes(LayoutMode::uniform);
        auto cca_model = pipe.load(pipe.stage1_checkpoint(Strategy::two_stage));
        auto cca = pipe.eval_layout(cca_model, AttentionMode::CCA, scenes);
        auto dca_model = pipe.load(pipe.stage1_checkpoint(Strategy::full_dca));
        auto dca = pipe.eval_layout(dca_model, AttentionMode::DCALayout, scenes);
        nlohmann::json j;
        j["cca"] = cca.to_json();
        j["dca"] = dca.to_json();
        j["delta_avg"] = cca.layout_avg - dca.layout_avg;
        pipe.write_report("table3.json", j);
        std::cout << j.dump(2) << "\n";
    } else if (suite == "table4") {
        nlohmann::json j;
        for (Strategy s :
             {Strategy::two_stage, Strategy::joint, Strategy::reversed, Strategy::single_stage, Strategy::full_dca}) {
            auto model = pipe.load(pipe.final_checkpoint(s));
            auto rep = pipe.eval_subject(model, Pipeline<float>::final_mode(s));
            j[strategy_name(s)] = rep.to_json();
        }
        pipe.write_report("table4.json", j);
        std::cout << j.dump(2) << "\n";
    } else if (suite == "scale") {
        std::vector<double> values{0.6, 0.8, 1.0};
        if (!f.values.empty()) {
            values.clear();
            std::stringstream ss(f.values);
            std::string tok;
            while (std::getline(ss, tok, ',')) values.push_back(std::stod(tok));
        }
        auto model = pipe.load(pipe.final_checkpoint(Strategy::two_stage));
        nlohmann::json j;
        for (double v : values) {
            auto rep = pipe.eval_subject(model, AttentionMode::FCA, v);
            nlohmann::json entry = rep.to_json();
            entry["lambda"] = v;
            j["scale"].push_back(entry);
        }
        pipe.write_report("scale.json", j);
        std::cout << j.dump(2) << "\n";
    } else {
        throw std::invalid_argument("ablate: unknown --suite " + suite);
    }
    return 0;
}

int cmd_gradcheck() {
    auto entries = run_gradcheck_suite();
    double worst = 0;
    for (const auto& e : entries) {
        std::printf("  %-24s max rel err %.3e\n", e.name.c_str(), e.max_rel_err);
        worst = std::max(worst, e.max_rel_err);
    }
    std::printf("gradcheck: max relative error %.3e (bound 1e-3)\n", worst);
    return worst < 1e-3 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"muse: layout-controllable multi-subject diffusion on a synthetic shapes world.\n"
                 "Set MUSE_THREADS to cap worker threads."};
    app.require_subcommand(1);

    Flags f;
    auto* dataset = app.add_subcommand("dataset", "generate scene datasets (MUSEDS1) and previews");
    add_common(dataset, f);
    dataset->add_option("--scenes", f.count, "training scene count");
    dataset->add_option("--layout", f.layout, "prior|uniform");

    auto* pretrain = app.add_subcommand("pretrain", "train the text-only base model");
    add_common(pretrain, f);
    pretrain->add_option("--dataset", f.dataset_path, "MUSEDS1 training file");

    auto* train = app.add_subcommand("train", "run one training stage of a strategy");
    add_common(train, f);
    train->add_option("--stage", f.stage, "1 or 2")->required();
    train->add_option("--strategy", f.strategy, "two_stage|full_dca|single_stage|joint|reversed");
    train->add_option("--checkpoint", f.checkpoint, "input checkpoint")->required();
    train->add_option("--dataset", f.dataset_path, "MUSEDS1 training file");

    auto* sample = app.add_subcommand("sample", "sample images to P6 pixmaps with JSON sidecars");
    add_common(sample, f);
    sample->add_option("--checkpoint", f.checkpoint, "model checkpoint")->required();
    sample->add_option("--mode", f.mode, "ca|dca_layout|cca|fca|full_dca");
    sample->add_option("--n", f.count, "image count");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (layout or subject suite)");
    add_common(eval, f);
    eval->add_option("--checkpoint", f.checkpoint, "model checkpoint")->required();
    eval->add_option("--suite", f.suite, "layout|subject");
    eval->add_option("--mode", f.mode, "attention mode");
    eval->add_option("--layout", f.layout, "prior|uniform eval split");

    auto* ablate = app.add_subcommand("ablate", "run the table3/table4/scale suites end to end");
    add_common(ablate, f);
    ablate->add_option("--suite", f.suite, "table3|table4|scale");
    ablate->add_option("--values", f.values, "comma-separated lambda values (scale suite)");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference verification suite");
    (void)gradcheck;

    CLI11_PARSE(app, argc, argv);

    try {
        if (dataset->parsed()) return cmd_dataset(f);
        if (pretrain->parsed()) return cmd_pretrain(f);
        if (train->parsed()) return cmd_train(f);
        if (sample->parsed()) return cmd_sample(f);
        if (eval->parsed()) return cmd_eval(f);
        if (ablate->parsed()) return cmd_ablate(f);
        if (gradcheck->parsed()) return cmd_gradcheck();
    } catch (const std::exception& e) {
        nlohmann::json err;
        err["error"] = e.what();
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 0;
}
