// Command-line pipeline driver: gen-data / train / eval / ablate.
//
// Every command owns its output directory via a lock file, writes the fully
// resolved configuration before doing work, and is deterministic given the
// same config and seeds. Exit codes: 0 success, 1 usage error, 2 runtime
// error.

#include "uniret/config.hpp"
#include "uniret/evalkit.hpp"

#include <CLI11.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace uniret;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Exclusive ownership of a run directory for the lifetime of one command.
class RunLock {
  public:
    explicit RunLock(const std::string& dir) : path_(fs::path(dir) / "lock") {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw std::runtime_error("cannot create output directory: " + dir);
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw std::runtime_error("run directory is locked (remove " + path_.string() +
                                     " if no other command is running)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        (void)!::write(fd, pid.data(), pid.size());
        ::close(fd);
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

  private:
    fs::path path_;
};

void write_json_file(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    return nlohmann::json::parse(in);
}

// The resolved config goes down before any other work so a run directory is
// always self-describing.
void write_resolved_config(const std::string& dir, const std::string& command,
                           const RunConfig& cfg, const nlohmann::json& extras) {
    nlohmann::json doc{{"command", command}, {"config", run_config_to_json(cfg)}};
    for (const auto& [k, v] : extras.items()) doc[k] = v;
    write_json_file(doc, dir + "/config.resolved.json");
}

// Checkpoint provenance, written next to the tensor files.
struct CheckpointMeta {
    int stage = 0;
    uint64_t seed = 0;
};

void write_meta(const std::string& ckpt_dir, const CheckpointMeta& meta) {
    write_json_file(nlohmann::json{{"stage", meta.stage}, {"seed", meta.seed}},
                    ckpt_dir + "/meta.json");
}

CheckpointMeta read_meta(const std::string& ckpt_dir) {
    CheckpointMeta meta;
    const std::string path = ckpt_dir + "/meta.json";
    if (!fs::exists(path)) return meta;  // stage 0: unknown provenance
    const nlohmann::json j = read_json_file(path);
    meta.stage = j.value("stage", 0);
    meta.seed = j.value("seed", uint64_t{0});
    return meta;
}

Dataset load_dataset(const std::string& dir) {
    if (!fs::exists(fs::path(dir) / "manifest.json"))
        throw std::runtime_error("no dataset at " + dir + " (run gen-data first)");
    return load_corpus(dir);
}

const StageSettings& settings_for(const RunConfig& cfg, int stage) {
    switch (stage) {
        case 1: return cfg.stage1;
        case 2: return cfg.stage2;
        case 3: return cfg.stage3;
        default: throw UsageError("stage must be 1, 2 or 3");
    }
}

// Trains one stage on `bundle` in place; writes trace CSV, checkpoint and
// provenance into `out_dir`.
LossTrace train_stage(int stage, const StageSettings& settings, uint64_t seed,
                      const Dataset& data, ModelBundle<float>& bundle,
                      const std::string& out_dir) {
    const StageConfig<float> scfg = to_stage_config<float>(settings, stage, seed);
    AdamW<float> optim{AdamWConfig<float>{}};
    LossTrace trace;
    switch (stage) {
        case 1: trace = run_stage1(bundle, data, scfg, optim); break;
        case 2: trace = run_stage2(bundle, data, scfg, optim); break;
        case 3: trace = run_stage3(bundle, data, scfg, optim); break;
    }
    write_trace_csv(trace, out_dir + "/trace_stage" + std::to_string(stage) + ".csv");
    const std::string ckpt = out_dir + "/checkpoint";
    save_checkpoint(bundle, optim, ckpt);
    write_meta(ckpt, {stage, seed});
    if (!trace.empty())
        std::cout << "stage " << stage << ": " << trace.size() << " steps, loss "
                  << trace.front().loss_total << " -> " << trace.back().loss_total << "\n";
    else
        std::cout << "stage " << stage << ": 0 steps\n";
    return trace;
}

ModelBundle<float> fresh_bundle(const RunConfig& cfg, const Dataset& data, uint64_t seed) {
    ModelConfig mc = cfg.model;
    mc.vocab_size = data.vocab.size();
    mc.text_t_max = data.config.chunk_t_max;
    ModelBundle<float> bundle = init_bundle<float>(mc, seed);
    bundle.vocab_crc = vocab_crc32(data.vocab);
    return bundle;
}

ModelBundle<float> load_init_checkpoint(const std::string& init_dir, int wanted_stage,
                                        const Dataset& data) {
    const std::string requirement =
        "stage " + std::to_string(wanted_stage - 1) + " checkpoint required";
    if (init_dir.empty()) throw UsageError(requirement);
    if (!fs::exists(fs::path(init_dir) / "manifest.json"))
        throw UsageError(requirement + " (no checkpoint at " + init_dir + ")");
    const CheckpointMeta meta = read_meta(init_dir);
    if (meta.stage != wanted_stage - 1)
        throw UsageError(requirement + " (found stage " + std::to_string(meta.stage) +
                         " checkpoint at " + init_dir + ")");
    ModelBundle<float> bundle = load_bundle<float>(init_dir);
    detail::check_vocab(bundle, data);
    return bundle;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
    RunLock lock(out_dir);
    write_resolved_config(out_dir, "gen-data", cfg, {{"effective_out", out_dir}});
    const Dataset ds = generate_corpus(cfg.corpus, out_dir);
    std::cout << "dataset at " << out_dir << ": " << ds.train.size() << " train, "
              << ds.val.size() << " val, " << ds.test.size() << " test records, vocab "
              << ds.vocab.size() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const RunConfig& cfg, int stage, const std::string& init_dir,
              const std::string& out_dir, const std::string& data_dir) {
    const StageSettings& settings = settings_for(cfg, stage);
    RunLock lock(out_dir);
    write_resolved_config(out_dir, "train", cfg,
                          {{"stage", stage},
                           {"init", init_dir},
                           {"effective_out", out_dir},
                           {"effective_data", data_dir}});
    const Dataset data = load_dataset(data_dir);
    ModelBundle<float> bundle = stage == 1 ? fresh_bundle(cfg, data, cfg.seed)
                                           : load_init_checkpoint(init_dir, stage, data);
    train_stage(stage, settings, cfg.seed, data, bundle, out_dir);
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

bool resolve_tri_state(const std::string& value, bool auto_default, const char* flag) {
    if (value == "auto") return auto_default;
    if (value == "on") return true;
    if (value == "off") return false;
    throw UsageError(std::string(flag) + " must be auto, on or off");
}

int cmd_eval(const std::string& ckpt_dir, const std::string& data_dir, int k,
             const std::string& split, const std::string& fused_mode,
             const std::string& nlu_mode, const std::string& out_dir) {
    if (k < 1) throw UsageError("--k must be >= 1");
    RunLock lock(out_dir);
    const Dataset data = load_dataset(data_dir);
    const ModelBundle<float> bundle = load_bundle<float>(ckpt_dir);
    if (bundle.vocab_crc != vocab_crc32(data.vocab))
        throw std::runtime_error("vocab mismatch between checkpoint and dataset");
    const CheckpointMeta meta = read_meta(ckpt_dir);

    EvalVariant<float> variant;
    variant.name = "model";
    variant.bundle = &bundle;
    variant.fused_queries = resolve_tri_state(fused_mode, meta.stage >= 3, "--fused");
    variant.has_nlu = resolve_tri_state(nlu_mode, meta.stage >= 2, "--nlu");

    write_json_file(nlohmann::json{{"command", "eval"},
                                   {"ckpt", ckpt_dir},
                                   {"data", data_dir},
                                   {"k", k},
                                   {"split", split},
                                   {"fused_queries", variant.fused_queries},
                                   {"nlu_metrics", variant.has_nlu}},
                    out_dir + "/config.resolved.json");

    const AblationReport report =
        run_ablation(data, data.split(split), std::vector<EvalVariant<float>>{variant}, k);
    nlohmann::json doc = report_to_json(report);
    doc["split"] = split;
    doc["k"] = k;
    write_json_file(doc, out_dir + "/report.json");
    const std::string table = report_to_text(report);
    std::ofstream txt(out_dir + "/report.txt", std::ios::binary);
    txt << table;
    std::cout << table;
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct StageRecipe {
    std::string dir_name;
    int stage = 1;
    StageSettings settings;
    std::string init_dir_name;  // empty for stage 1
};

// Trains the recipe unless its checkpoint already exists, then returns the
// bundle. Cached checkpoints are validated against the dataset.
ModelBundle<float> train_or_load(const StageRecipe& recipe, const RunConfig& cfg, uint64_t seed,
                                 const Dataset& data, const std::string& seed_dir) {
    const std::string run_dir = seed_dir + "/" + recipe.dir_name;
    const std::string ckpt = run_dir + "/checkpoint";
    if (fs::exists(fs::path(ckpt) / "manifest.json")) {
        ModelBundle<float> bundle = load_bundle<float>(ckpt);
        detail::check_vocab(bundle, data);
        if (read_meta(ckpt).stage != recipe.stage)
            throw std::runtime_error("cached checkpoint at " + ckpt +
                                     " was trained for a different stage; delete it to retrain");
        std::cout << "reusing " << ckpt << "\n";
        return bundle;
    }
    RunLock lock(run_dir);
    write_resolved_config(run_dir, "ablate/" + recipe.dir_name, cfg,
                          {{"stage", recipe.stage},
                           {"seed", seed},
                           {"stage_settings", stage_settings_to_json(recipe.settings)}});
    ModelBundle<float> bundle =
        recipe.stage == 1
            ? fresh_bundle(cfg, data, seed)
            : load_init_checkpoint(seed_dir + "/" + recipe.init_dir_name + "/checkpoint",
                                   recipe.stage, data);
    train_stage(recipe.stage, recipe.settings, seed, data, bundle, run_dir);
    return bundle;
}

int cmd_ablate(const RunConfig& cfg, const std::string& out_dir, const std::string& data_dir) {
    const std::vector<std::string> known = {"stage1-joint", "stage1-t2i-only", "stage2",
                                            "stage3", "stage3-no-nlu"};
    for (const auto& v : cfg.ablation.variants)
        if (std::find(known.begin(), known.end(), v) == known.end())
            throw UsageError("unknown ablation variant: " + v);
    const auto wants = [&](const std::string& v) {
        return std::find(cfg.ablation.variants.begin(), cfg.ablation.variants.end(), v) !=
               cfg.ablation.variants.end();
    };

    RunLock lock(out_dir);
    write_resolved_config(out_dir, "ablate", cfg,
                          {{"effective_out", out_dir}, {"effective_data", data_dir}});

    // The dataset is shared across seeds; generate it once if absent.
    if (!fs::exists(fs::path(data_dir) / "manifest.json")) {
        RunLock data_lock(data_dir);
        generate_corpus(cfg.corpus, data_dir);
        std::cout << "generated dataset at " << data_dir << "\n";
    }
    const Dataset data = load_dataset(data_dir);
    const auto& records = data.split(cfg.eval.split);

    StageSettings s1_ti_only = cfg.stage1;
    s1_ti_only.alpha = 0.0;  // chunk loss weighted out: retrieval trains on images only

    const bool need_s2 = wants("stage2") || wants("stage3") || wants("stage3-no-nlu");
    const bool need_s1_joint = wants("stage1-joint") || need_s2;
    StageSettings s3_no_nlu = cfg.stage3;
    s3_no_nlu.use_nlu = false;

    // One combined report: per-seed rows averaged at the end.
    std::vector<AblationReport> seed_reports;
    for (const uint64_t seed : cfg.ablation.seeds) {
        const std::string seed_dir = out_dir + "/seed" + std::to_string(seed);
        std::deque<ModelBundle<float>> keep;
        std::vector<EvalVariant<float>> variants;
        auto add_variant = [&](const std::string& name, ModelBundle<float> bundle, bool fused,
                               bool nlu) {
            keep.push_back(std::move(bundle));
            variants.push_back({name, &keep.back(), fused, nlu});
        };

        std::optional<ModelBundle<float>> s1_joint, s2;
        if (need_s1_joint)
            s1_joint = train_or_load({"s1-joint", 1, cfg.stage1, ""}, cfg, seed, data, seed_dir);
        if (wants("stage1-joint")) add_variant("stage1-joint", *s1_joint, false, false);
        if (wants("stage1-t2i-only"))
            add_variant("stage1-t2i-only",
                        train_or_load({"s1-t2i-only", 1, s1_ti_only, ""}, cfg, seed, data,
                                      seed_dir),
                        false, false);
        if (need_s2)
            s2 = train_or_load({"s2", 2, cfg.stage2, "s1-joint"}, cfg, seed, data, seed_dir);
        if (wants("stage2")) add_variant("stage2", *s2, false, true);
        if (wants("stage3"))
            add_variant("stage3",
                        train_or_load({"s3", 3, cfg.stage3, "s2"}, cfg, seed, data, seed_dir),
                        true, true);
        if (wants("stage3-no-nlu"))
            add_variant("stage3-no-nlu",
                        train_or_load({"s3-no-nlu", 3, s3_no_nlu, "s2"}, cfg, seed, data,
                                      seed_dir),
                        false, false);

        const AblationReport report = run_ablation(data, records, variants, cfg.eval.k);
        nlohmann::json doc = report_to_json(report);
        doc["seed"] = seed;
        doc["split"] = cfg.eval.split;
        write_json_file(doc, seed_dir + "/report.json");
        std::ofstream txt(seed_dir + "/report.txt", std::ios::binary);
        txt << report_to_text(report);
        seed_reports.push_back(report);
    }

    // Seed average: rows appear in the same order for every seed.
    AblationReport combined = seed_reports.front();
    for (size_t i = 1; i < seed_reports.size(); ++i) {
        if (seed_reports[i].rows.size() != combined.rows.size())
            throw std::runtime_error("ablation reports disagree across seeds");
        for (size_t r = 0; r < combined.rows.size(); ++r)
            combined.rows[r].value += seed_reports[i].rows[r].value;
    }
    for (auto& row : combined.rows)
        row.value /= static_cast<double>(seed_reports.size());

    nlohmann::json doc = report_to_json(combined);
    doc["seeds"] = cfg.ablation.seeds;
    doc["split"] = cfg.eval.split;
    write_json_file(doc, out_dir + "/report.json");
    const std::string table = report_to_text(combined);
    std::ofstream txt(out_dir + "/report.txt", std::ios::binary);
    txt << table;
    std::cout << "=== mean over " << seed_reports.size() << " seed(s) ===\n" << table;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-task multimodal retrieval pipeline"};
    app.require_subcommand(1);

    std::string config_path, out_override, data_override, init_dir;
    int stage = 0;
    uint64_t seed_override = 0;
    bool seed_given = false;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    gen->add_option("--config", config_path, "JSON run config")->required();
    gen->add_option("--out", out_override, "output directory (default: config data_dir)");

    auto* train = app.add_subcommand("train", "train one stage");
    train->add_option("--stage", stage, "training stage")->required()->check(CLI::Range(1, 3));
    train->add_option("--config", config_path, "JSON run config")->required();
    train->add_option("--init", init_dir, "checkpoint directory of the previous stage");
    train->add_option("--seed", seed_override, "override config seed")
        ->each([&](const std::string&) { seed_given = true; });
    train->add_option("--out", out_override, "run directory (default: out_dir/stage<N>)");
    train->add_option("--data", data_override, "dataset directory (default: config data_dir)");

    std::string ckpt_dir, split = "test", fused_mode = "auto", nlu_mode = "auto";
    std::string eval_out = "eval-report";
    int k = 5;
    auto* eval = app.add_subcommand("eval", "evaluate one checkpoint");
    eval->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
    eval->add_option("--data", data_override, "dataset directory")->required();
    eval->add_option("--k", k, "retrieval cutoff");
    eval->add_option("--split", split, "dataset split")
        ->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--fused", fused_mode, "fused query embeddings: auto|on|off");
    eval->add_option("--nlu", nlu_mode, "intent/slot metrics: auto|on|off");
    eval->add_option("--out", eval_out, "report directory");

    auto* ablate = app.add_subcommand("ablate", "train and compare ablation variants");
    ablate->add_option("--config", config_path, "JSON run config")->required();
    ablate->add_option("--out", out_override, "output directory (default: out_dir/ablate)");
    ablate->add_option("--data", data_override, "dataset directory (default: config data_dir)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (app.got_subcommand(eval))
            return cmd_eval(ckpt_dir, data_override, k, split, fused_mode, nlu_mode, eval_out);

        RunConfig cfg = load_run_config(config_path);
        if (seed_given) cfg.seed = seed_override;
        const std::string data_dir = data_override.empty() ? cfg.data_dir : data_override;

        if (app.got_subcommand(gen))
            return cmd_gen_data(cfg, out_override.empty() ? cfg.data_dir : out_override);
        if (app.got_subcommand(train)) {
            const std::string out = out_override.empty()
                                        ? cfg.out_dir + "/stage" + std::to_string(stage)
                                        : out_override;
            return cmd_train(cfg, stage, init_dir, out, data_dir);
        }
        if (app.got_subcommand(ablate))
            return cmd_ablate(cfg, out_override.empty() ? cfg.out_dir + "/ablate" : out_override,
                              data_dir);
        throw UsageError("no subcommand");
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
