#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "muse/denoiser.hpp"
#include "muse/trainer.hpp"

namespace muse {

// Plain-text key=value run configuration. Precedence: command-line flags
// over file entries over defaults. Unknown keys are errors, and every
// artifact-producing run archives its fully-resolved config next to its
// outputs.
class RunConfig {
public:
    RunConfig() { defaults(); }

    static const std::set<std::string>& known_keys() {
        static const std::set<std::string> keys{
            "d_model",        "blocks",          "ff_mult",        "d_h",
            "heads",          "d_text",          "d_img",          "freq_count",
            "grounding_hidden", "resampler_depth", "init_seed",    "encoder_seed",
            "schedule_t",     "pretrain_steps",  "stage_steps",    "batch_size",
            "lr",             "p_drop",          "lambda",         "cfg_weight",
            "sample_steps",   "seed",            "strategy",       "stage",
            "train_scenes",   "layout_mode",     "eval_per_level", "eval_subject_scenes",
            "eval_seed_count", "threshold_lo",   "threshold_hi",   "log_every",
        };
        return keys;
    }

    void set(const std::string& key, const std::string& value) {
        if (!known_keys().count(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
        values_[key] = value;
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("config: cannot open " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            auto trim = [](std::string s) {
                auto b = s.find_first_not_of(" \t\r");
                auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config: bad line " + std::to_string(lineno) + " in " + path);
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }

    std::string get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw std::invalid_argument("config: missing key " + key);
        return it->second;
    }
    int get_int(const std::string& key) const { return std::stoi(get(key)); }
    double get_double(const std::string& key) const { return std::stod(get(key)); }
    uint64_t get_u64(const std::string& key) const { return std::stoull(get(key)); }

    // resolved snapshot, deterministically ordered
    std::string serialize() const {
        std::ostringstream os;
        for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
        return os.str();
    }

    void archive(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw std::runtime_error("config: cannot archive to " + path);
        out << serialize();
    }

    ModelConfig model_config() const {
        ModelConfig mc;
        mc.net.d_model = get_int("d_model");
        mc.net.blocks = get_int("blocks");
        mc.net.ff_mult = get_int("ff_mult");
        mc.net.d_h = get_int("d_h");
        mc.net.heads = get_int("heads");
        mc.net.d_text = get_int("d_text");
        mc.net.d_img = get_int("d_img");
        mc.net.lambda_scale = get_double("lambda");
        mc.net.schedule_T = get_int("schedule_t");
        mc.freq_count = get_int("freq_count");
        mc.grounding_hidden = get_int("grounding_hidden");
        mc.resampler_depth = get_int("resampler_depth");
        mc.init_seed = get_u64("init_seed");
        mc.encoder_seed = get_u64("encoder_seed");
        return mc;
    }

    TrainConfig train_config(StagePhase stage) const {
        TrainConfig tc;
        tc.strategy = strategy_from_name(get("strategy"));
        tc.stage = stage;
        tc.lr = get_double("lr");
        tc.batch_size = get_int("batch_size");
        tc.steps = stage == StagePhase::pretrain ? get_int("pretrain_steps") : get_int("stage_steps");
        tc.seed = get_u64("seed");
        tc.lambda = get_double("lambda");
        tc.p_drop = get_double("p_drop");
        tc.log_every = get_int("log_every");
        return tc;
    }

    SamplerConfig sampler_config() const {
        SamplerConfig sc;
        sc.steps = get_int("sample_steps");
        sc.cfg_weight = get_double("cfg_weight");
        sc.lambda = get_double("lambda");
        return sc;
    }

private:
    void defaults() {
        values_ = {
            {"d_model", "64"},       {"blocks", "2"},        {"ff_mult", "2"},      {"d_h", "32"},
            {"heads", "1"},          {"d_text", "32"},       {"d_img", "48"},       {"freq_count", "16"},
            {"grounding_hidden", "64"}, {"resampler_depth", "2"}, {"init_seed", "1"}, {"encoder_seed", "2"},
            {"schedule_t", "1000"},  {"pretrain_steps", "20000"}, {"stage_steps", "10000"}, {"batch_size", "16"},
            {"lr", "1e-4"},          {"p_drop", "0.1"},      {"lambda", "0.8"},     {"cfg_weight", "7.5"},
            {"sample_steps", "30"},  {"seed", "1"},          {"strategy", "two_stage"}, {"stage", "1"},
            {"train_scenes", "4096"}, {"layout_mode", "prior"}, {"eval_per_level", "24"}, {"eval_subject_scenes", "60"},
            {"eval_seed_count", "5"}, {"threshold_lo", "0"}, {"threshold_hi", "0"}, {"log_every", "250"},
        };
    }

    std::map<std::string, std::string> values_;
};

} // namespace muse
