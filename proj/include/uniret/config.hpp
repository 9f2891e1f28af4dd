#pragma once

#include "uniret/checkpoint.hpp"
#include "uniret/trainer.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace uniret {

// Per-stage knobs. Every field has a default so a config file only needs to
// name what it changes; the resolved form always serializes every field.
struct StageSettings {
    int epochs = 0;
    int batch_size = 32;
    double base_lr = 5e-5;
    double warmup_ratio = 0.1;
    double alpha = 1.0;       // stage 1: chunk-loss weight
    double mse_weight = 1.0;  // stage 2: alignment weight (also scales stage-3 MSE)
    double a = 1.0;           // stage 3: query-chunk weight
    double b = 0.5;           // stage 3: NLU CE weight
    bool include_mse = false; // stage 3: keep the alignment term
    bool use_nlu = true;      // stage 3: train through the fused query path
};

struct EvalSettings {
    int k = 5;
    std::string split = "test";
};

struct AblationSettings {
    std::vector<uint64_t> seeds = {0, 1, 2};
    std::vector<std::string> variants = {"stage1-joint", "stage1-t2i-only", "stage2",
                                         "stage3", "stage3-no-nlu"};
};

struct RunConfig {
    std::string data_dir = "data";
    std::string out_dir = "runs";
    uint64_t seed = 0;
    CorpusConfig corpus;
    ModelConfig model;  // vocab_size/text_t_max resolved from the dataset at train time
    StageSettings stage1 = [] { StageSettings s; s.epochs = 20; return s; }();
    StageSettings stage2 = [] { StageSettings s; s.epochs = 15; return s; }();
    StageSettings stage3 = [] { StageSettings s; s.epochs = 20; return s; }();
    EvalSettings eval;
    AblationSettings ablation;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                                const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw std::invalid_argument("config: unknown key \"" + key + "\" in " + where);
}

}  // namespace detail

inline nlohmann::json stage_settings_to_json(const StageSettings& s) {
    return nlohmann::json{{"epochs", s.epochs},
                          {"batch_size", s.batch_size},
                          {"base_lr", s.base_lr},
                          {"warmup_ratio", s.warmup_ratio},
                          {"alpha", s.alpha},
                          {"mse_weight", s.mse_weight},
                          {"a", s.a},
                          {"b", s.b},
                          {"include_mse", s.include_mse},
                          {"use_nlu", s.use_nlu}};
}

inline StageSettings stage_settings_from_json(const nlohmann::json& j, const StageSettings& base,
                                              const std::string& where) {
    detail::reject_unknown_keys(j,
                                {"epochs", "batch_size", "base_lr", "warmup_ratio", "alpha",
                                 "mse_weight", "a", "b", "include_mse", "use_nlu"},
                                where);
    StageSettings s = base;
    s.epochs = j.value("epochs", s.epochs);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.base_lr = j.value("base_lr", s.base_lr);
    s.warmup_ratio = j.value("warmup_ratio", s.warmup_ratio);
    s.alpha = j.value("alpha", s.alpha);
    s.mse_weight = j.value("mse_weight", s.mse_weight);
    s.a = j.value("a", s.a);
    s.b = j.value("b", s.b);
    s.include_mse = j.value("include_mse", s.include_mse);
    s.use_nlu = j.value("use_nlu", s.use_nlu);
    return s;
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
    return nlohmann::json{{"data_dir", cfg.data_dir},
                          {"out_dir", cfg.out_dir},
                          {"seed", cfg.seed},
                          {"corpus", corpus_config_to_json(cfg.corpus)},
                          {"model", model_config_to_json(cfg.model)},
                          {"stage1", stage_settings_to_json(cfg.stage1)},
                          {"stage2", stage_settings_to_json(cfg.stage2)},
                          {"stage3", stage_settings_to_json(cfg.stage3)},
                          {"eval", {{"k", cfg.eval.k}, {"split", cfg.eval.split}}},
                          {"ablation",
                           {{"seeds", cfg.ablation.seeds}, {"variants", cfg.ablation.variants}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j,
                                {"data_dir", "out_dir", "seed", "corpus", "model", "stage1",
                                 "stage2", "stage3", "eval", "ablation"},
                                "run config");
    RunConfig cfg;
    cfg.data_dir = j.value("data_dir", cfg.data_dir);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("corpus")) {
        detail::reject_unknown_keys(j.at("corpus"),
                                    {"languages", "train_scenes", "val_scenes", "test_scenes",
                                     "seed", "min_count", "caption_t_max", "chunk_t_max"},
                                    "corpus");
        cfg.corpus = corpus_config_from_json(j.at("corpus"));
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::reject_unknown_keys(
            m, {"d_model", "n_layer", "n_head", "d_emb", "vocab_size", "text_t_max"}, "model");
        cfg.model.d_model = m.value("d_model", cfg.model.d_model);
        cfg.model.n_layer = m.value("n_layer", cfg.model.n_layer);
        cfg.model.n_head = m.value("n_head", cfg.model.n_head);
        cfg.model.d_emb = m.value("d_emb", cfg.model.d_emb);
        cfg.model.vocab_size = m.value("vocab_size", cfg.model.vocab_size);
        cfg.model.text_t_max = m.value("text_t_max", cfg.model.text_t_max);
    }
    if (j.contains("stage1"))
        cfg.stage1 = stage_settings_from_json(j.at("stage1"), cfg.stage1, "stage1");
    if (j.contains("stage2"))
        cfg.stage2 = stage_settings_from_json(j.at("stage2"), cfg.stage2, "stage2");
    if (j.contains("stage3"))
        cfg.stage3 = stage_settings_from_json(j.at("stage3"), cfg.stage3, "stage3");
    if (j.contains("eval")) {
        detail::reject_unknown_keys(j.at("eval"), {"k", "split"}, "eval");
        cfg.eval.k = j.at("eval").value("k", cfg.eval.k);
        cfg.eval.split = j.at("eval").value("split", cfg.eval.split);
        if (cfg.eval.split != "train" && cfg.eval.split != "val" && cfg.eval.split != "test")
            throw std::invalid_argument("config: eval.split must be train, val or test");
    }
    if (j.contains("ablation")) {
        detail::reject_unknown_keys(j.at("ablation"), {"seeds", "variants"}, "ablation");
        const auto& ab = j.at("ablation");
        if (ab.contains("seeds")) cfg.ablation.seeds = ab.at("seeds").get<std::vector<uint64_t>>();
        if (ab.contains("variants"))
            cfg.ablation.variants = ab.at("variants").get<std::vector<std::string>>();
        if (cfg.ablation.seeds.empty())
            throw std::invalid_argument("config: ablation.seeds must be non-empty");
    }
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot read config file: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config parse error in " + path + ": " + e.what());
    }
    return run_config_from_json(j);
}

// Materializes the trainer-facing view of one stage.
template <typename S>
StageConfig<S> to_stage_config(const StageSettings& s, int stage, uint64_t seed) {
    StageConfig<S> cfg;
    cfg.stage = stage;
    cfg.epochs = s.epochs;
    cfg.batch_size = s.batch_size;
    cfg.base_lr = s.base_lr;
    cfg.warmup_ratio = s.warmup_ratio;
    cfg.weights.alpha = static_cast<S>(s.alpha);
    cfg.weights.a = static_cast<S>(s.a);
    cfg.weights.b = static_cast<S>(s.b);
    cfg.seed = seed;
    cfg.stage2_mse_weight = static_cast<S>(s.mse_weight);
    cfg.stage3_include_mse = s.include_mse;
    cfg.use_nlu = s.use_nlu;
    cfg.validate();
    return cfg;
}

}  // namespace uniret
