#pragma once

#include "uniret/checkpoint.hpp"
#include "uniret/model.hpp"
#include "uniret/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

namespace uniret {

template <typename S>
struct RetrievalTask {
    Mat<S> queries;                     // N x d
    Mat<S> corpus;                      // M x d
    std::vector<std::set<int>> gold;    // per query, non-empty

    void validate() const {
        if (queries.cols() != corpus.cols()) throw std::invalid_argument("dimension mismatch");
        if (static_cast<Eigen::Index>(gold.size()) != queries.rows())
            throw std::invalid_argument("gold set count mismatch");
        for (const auto& g : gold) {
            if (g.empty()) throw std::invalid_argument("empty gold set");
            for (int idx : g)
                if (idx < 0 || idx >= corpus.rows())
                    throw std::invalid_argument("gold index out of range");
        }
    }
};

// Fraction of queries whose top-k corpus rows (dot product descending, ties by
// ascending corpus index) intersect the gold set.
template <typename S>
double recall_at_k(const RetrievalTask<S>& task, int k) {
    task.validate();
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    if (k > task.corpus.rows()) throw std::invalid_argument("k exceeds corpus size");
    const Eigen::Index m = task.corpus.rows();
    int hits = 0;
    std::vector<int> order(static_cast<size_t>(m));
    for (Eigen::Index q = 0; q < task.queries.rows(); ++q) {
        const Mat<S> scores = task.corpus * task.queries.row(q).transpose();  // M x 1
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
            if (scores(a, 0) != scores(b, 0)) return scores(a, 0) > scores(b, 0);
            return a < b;
        });
        const auto& gold = task.gold[static_cast<size_t>(q)];
        for (int r = 0; r < k; ++r)
            if (gold.count(order[static_cast<size_t>(r)])) {
                ++hits;
                break;
            }
    }
    return static_cast<double>(hits) / static_cast<double>(task.queries.rows());
}

inline double intent_accuracy(const std::vector<int>& preds, const std::vector<int>& gold) {
    if (preds.size() != gold.size()) throw std::invalid_argument("intent length mismatch");
    if (preds.empty()) throw std::invalid_argument("empty intent lists");
    int correct = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == gold[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

// Micro token-level F1 over non-O labels. Sequences must be pre-stripped of
// special positions.
inline double slot_f1(const std::vector<std::vector<int>>& preds,
                      const std::vector<std::vector<int>>& gold) {
    if (preds.size() != gold.size()) throw std::invalid_argument("slot sequence count mismatch");
    int64_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].size() != gold[i].size())
            throw std::invalid_argument("slot sequence length mismatch");
        for (size_t j = 0; j < preds[i].size(); ++j) {
            const int p = preds[i][j], g = gold[i][j];
            if (p == g) {
                if (g != kSlotO) ++tp;
            } else {
                if (p != kSlotO) ++fp;
                if (g != kSlotO) ++fn;
            }
        }
    }
    if (tp == 0) return 0.0;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    return 2.0 * precision * recall / (precision + recall);
}

// ---------------------------------------------------------------------------
// Corpus encoding.
// ---------------------------------------------------------------------------

enum class EncodeView { Caption, Chunk, QueryPlain, QueryFused, Image };

template <typename S>
Mat<S> embed_query_fused(const ModelBundle<S>& b, const TokenSeq& q) {
    Tape<S> tape;
    Binder<S> bind(tape, [](const std::string&) { return false; });
    const NLUOutputIds nlu = nlu_forward(bind, b.nlu, q);
    const int input = text_input_embeddings(bind, b.text, q);
    const int fused = fuse(bind, b.fusion, input, nlu.semantic);
    return tape.value(encode_text(bind, b.text, q, fused));
}

template <typename S>
Mat<S> encode_corpus(const Dataset& data, const std::vector<CorpusRecord>& records,
                     const ModelBundle<S>& bundle, EncodeView view) {
    detail::check_vocab(bundle, data);
    Mat<S> table(static_cast<Eigen::Index>(records.size()), bundle.config.d_emb);
    for (size_t i = 0; i < records.size(); ++i) {
        const CorpusRecord& rec = records[i];
        Mat<S> row;
        switch (view) {
            case EncodeView::Caption:
                row = embed_text(bundle.text, tokenize(rec.caption, data.vocab, data.config.caption_t_max));
                break;
            case EncodeView::Chunk:
                row = embed_text(bundle.text,
                                 tokenize(rec.chunk, data.vocab, data.config.chunk_t_max));
                break;
            case EncodeView::QueryPlain:
                row = embed_text(bundle.text,
                                 tokenize(rec.query.tokens, data.vocab, data.config.caption_t_max));
                break;
            case EncodeView::QueryFused:
                row = embed_query_fused(
                    bundle, tokenize(rec.query.tokens, data.vocab, data.config.caption_t_max));
                break;
            case EncodeView::Image:
                row = embed_image(bundle.image, data.image_of(rec));
                break;
        }
        table.row(static_cast<Eigen::Index>(i)) = row.row(0);
    }
    return table;
}

// ---------------------------------------------------------------------------
// Ablation report.
// ---------------------------------------------------------------------------

struct MetricRow {
    std::string variant;
    std::string language;  // "lang00" ... or "Mean"
    std::string task;      // "T2I", "T2T", "Intent", "Slot"
    std::string metric;    // "R@k", "Acc", "F1"
    int k = 0;             // 0 for non-retrieval metrics
    double value = 0;
};

struct AblationReport {
    std::vector<MetricRow> rows;

    double value_of(const std::string& variant, const std::string& language,
                    const std::string& task) const {
        for (const auto& r : rows)
            if (r.variant == variant && r.language == language && r.task == task) return r.value;
        throw std::out_of_range("no such report row: " + variant + "/" + language + "/" + task);
    }
};

template <typename S>
struct EvalVariant {
    std::string name;
    const ModelBundle<S>* bundle = nullptr;
    bool fused_queries = false;  // query side of T2T uses the NLU-fused path
    bool has_nlu = false;        // report intent/slot metrics
};

namespace detail {

// Per-language record indices; chitchat is excluded from retrieval queries
// but kept for NLU metrics.
struct LanguageView {
    int lang_index = 0;
    std::string lang_name;
    std::vector<int> all;        // record indices in this language
    std::vector<int> retrieval;  // non-chitchat subset
};

inline std::vector<LanguageView> language_views(const std::vector<CorpusRecord>& records) {
    std::map<int, LanguageView> by_lang;
    for (size_t i = 0; i < records.size(); ++i) {
        auto& v = by_lang[records[i].lang.index];
        v.lang_index = records[i].lang.index;
        v.lang_name = records[i].lang.name;
        v.all.push_back(static_cast<int>(i));
        if (records[i].query.intent != Intent::Chitchat)
            v.retrieval.push_back(static_cast<int>(i));
    }
    std::vector<LanguageView> out;
    for (auto& [k, v] : by_lang) out.push_back(std::move(v));
    return out;
}

}  // namespace detail

// T2I: captions (per language) against the split's unique scene images.
// T2T: queries (per language, chitchat excluded) against same-language chunks.
// Gold is visual-class equality for both.
template <typename S>
AblationReport run_ablation(const Dataset& data, const std::vector<CorpusRecord>& records,
                            const std::vector<EvalVariant<S>>& variants, int k) {
    if (variants.empty()) throw std::invalid_argument("run_ablation needs at least one variant");
    if (records.empty()) throw std::invalid_argument("run_ablation: empty split");

    // Unique scene image list, ascending scene_id.
    std::vector<int> scene_ids;
    for (const auto& rec : records) scene_ids.push_back(rec.scene_id);
    std::sort(scene_ids.begin(), scene_ids.end());
    scene_ids.erase(std::unique(scene_ids.begin(), scene_ids.end()), scene_ids.end());
    std::map<int, int> image_pos;
    for (size_t i = 0; i < scene_ids.size(); ++i) image_pos[scene_ids[i]] = static_cast<int>(i);

    const auto langs = detail::language_views(records);
    AblationReport report;

    for (const auto& variant : variants) {
        const ModelBundle<S>& bundle = *variant.bundle;

        // Image table shared across languages.
        std::vector<CorpusRecord> image_records;
        for (int id : scene_ids) {
            CorpusRecord r;
            r.scene_id = id;
            image_records.push_back(std::move(r));
        }
        const Mat<S> image_table = encode_corpus(data, image_records, bundle, EncodeView::Image);

        struct TaskAcc {
            std::string task, metric;
            int k;
            std::vector<double> values;
        };
        std::vector<TaskAcc> acc = {{"T2I", "R@k", k, {}},
                                    {"T2T", "R@k", k, {}}};
        if (variant.has_nlu) {
            acc.push_back({"Intent", "Acc", 0, {}});
            acc.push_back({"Slot", "F1", 0, {}});
        }

        for (const auto& lang : langs) {
            auto pick = [&](const std::vector<int>& idxs) {
                std::vector<CorpusRecord> out;
                for (int i : idxs) out.push_back(records[static_cast<size_t>(i)]);
                return out;
            };
            const auto lang_records = pick(lang.all);
            const auto retr_records = pick(lang.retrieval);

            // T2I: captions of all records in this language vs images.
            {
                RetrievalTask<S> task;
                task.queries = encode_corpus(data, lang_records, bundle, EncodeView::Caption);
                task.corpus = image_table;
                for (const auto& rec : lang_records) {
                    std::set<int> gold;
                    for (int id : scene_ids)
                        if (id / kNumTimeTags == rec.visual_class()) gold.insert(image_pos[id]);
                    task.gold.push_back(std::move(gold));
                }
                const double r = recall_at_k(task, k);
                acc[0].values.push_back(r);
                report.rows.push_back({variant.name, lang.lang_name, "T2I", "R@k", k, r});
            }
            // T2T: queries vs chunks, same language.
            {
                RetrievalTask<S> task;
                task.queries = encode_corpus(
                    data, retr_records, bundle,
                    variant.fused_queries ? EncodeView::QueryFused : EncodeView::QueryPlain);
                task.corpus = encode_corpus(data, lang_records, bundle, EncodeView::Chunk);
                for (const auto& rec : retr_records) {
                    std::set<int> gold;
                    for (size_t c = 0; c < lang_records.size(); ++c)
                        if (lang_records[c].visual_class() == rec.visual_class())
                            gold.insert(static_cast<int>(c));
                    task.gold.push_back(std::move(gold));
                }
                const double r = recall_at_k(task, k);
                acc[1].values.push_back(r);
                report.rows.push_back({variant.name, lang.lang_name, "T2T", "R@k", k, r});
            }
            // NLU metrics over every query in this language.
            if (variant.has_nlu) {
                std::vector<int> pred_intents, gold_intents;
                std::vector<std::vector<int>> pred_slots, gold_slots;
                for (const auto& rec : lang_records) {
                    const TokenSeq q = tokenize(rec.query.tokens, data.vocab, data.config.caption_t_max);
                    const auto out = nlu_infer(bundle.nlu, q);
                    const auto [intent, slots] = predict(out);
                    pred_intents.push_back(intent);
                    gold_intents.push_back(static_cast<int>(rec.query.intent));
                    // strip BOS/EOS positions
                    pred_slots.emplace_back(slots.begin() + 1, slots.end() - 1);
                    gold_slots.push_back(rec.query.slots);
                }
                const double ia = intent_accuracy(pred_intents, gold_intents);
                const double f1 = slot_f1(pred_slots, gold_slots);
                acc[2].values.push_back(ia);
                acc[3].values.push_back(f1);
                report.rows.push_back({variant.name, lang.lang_name, "Intent", "Acc", 0, ia});
                report.rows.push_back({variant.name, lang.lang_name, "Slot", "F1", 0, f1});
            }
        }

        for (const auto& t : acc) {
            const double mean =
                std::accumulate(t.values.begin(), t.values.end(), 0.0) /
                static_cast<double>(t.values.size());
            report.rows.push_back({variant.name, "Mean", t.task, t.metric, t.k, mean});
        }
    }
    return report;
}

inline nlohmann::json report_to_json(const AblationReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows)
        rows.push_back({{"variant", r.variant},
                        {"language", r.language},
                        {"task", r.task},
                        {"metric", r.metric},
                        {"k", r.k},
                        {"value", r.value}});
    return nlohmann::json{{"slot_f1_semantics", "token-level micro F1 over non-O labels"},
                          {"rows", std::move(rows)}};
}

// Aligned text table: one line per (variant, task), one column per language
// plus the Mean column.
inline std::string report_to_text(const AblationReport& report) {
    std::vector<std::string> languages;
    std::vector<std::pair<std::string, std::string>> line_keys;  // (variant, task)
    for (const auto& r : report.rows) {
        if (r.language != "Mean" &&
            std::find(languages.begin(), languages.end(), r.language) == languages.end())
            languages.push_back(r.language);
        std::pair<std::string, std::string> key{r.variant, r.task};
        if (std::find(line_keys.begin(), line_keys.end(), key) == line_keys.end())
            line_keys.push_back(key);
    }
    std::sort(languages.begin(), languages.end());

    auto metric_label = [&](const std::string& task) -> std::string {
        for (const auto& r : report.rows)
            if (r.task == task) return r.metric == "R@k" ? "R@" + std::to_string(r.k) : r.metric;
        return "";
    };

    std::string out;
    char buf[64];
    size_t name_w = 24;
    for (const auto& [v, t] : line_keys) name_w = std::max(name_w, v.size() + t.size() + 12);
    auto pad = [](std::string s, size_t w) {
        s.resize(std::max(s.size(), w), ' ');
        return s;
    };
    out += pad("variant / task", name_w);
    for (const auto& l : languages) out += pad(l, 10);
    out += "Mean\n";
    for (const auto& [variant, task] : line_keys) {
        out += pad(variant + "  " + task + " (" + metric_label(task) + ")", name_w);
        for (const auto& l : languages) {
            std::snprintf(buf, sizeof(buf), "%.4f", report.value_of(variant, l, task));
            out += pad(buf, 10);
        }
        std::snprintf(buf, sizeof(buf), "%.4f", report.value_of(variant, "Mean", task));
        out += buf;
        out += '\n';
    }
    return out;
}

// Embedding tables round-trip through the checkpoint tensor scheme.
template <typename S>
void save_embedding_table(const Mat<S>& table, const std::string& name, const std::string& dir) {
    std::filesystem::create_directories(dir);
    Tensor<S> t{name, table};
    std::vector<const Tensor<S>*> tensors = {&t};
    nlohmann::json entries = detail::write_tensor_blob(tensors, dir + "/params.f32");
    nlohmann::json manifest{{"format_version", kCheckpointFormatVersion},
                            {"tensors", std::move(entries)}};
    std::ofstream out(dir + "/manifest.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write embedding manifest");
    out << manifest.dump(2) << '\n';
}

template <typename S>
Mat<S> load_embedding_table(const std::string& name, const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json", std::ios::binary);
    if (!mf) throw std::runtime_error("no embedding manifest in " + dir);
    const nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw std::runtime_error("embedding table format version mismatch");
    auto values = detail::read_tensor_blob<S>(manifest.at("tensors"), dir + "/params.f32");
    auto it = values.find(name);
    if (it == values.end()) throw std::runtime_error("embedding table missing: " + name);
    return it->second;
}

}  // namespace uniret
