#pragma once

#include "uniret/checkpoint.hpp"
#include "uniret/corpus.hpp"
#include "uniret/losses.hpp"
#include "uniret/model.hpp"
#include "uniret/optimizer.hpp"

#include <deque>
#include <fstream>
#include <set>
#include <string>
#include <vector>

namespace uniret {

template <typename S>
struct StageConfig {
    int stage = 1;
    int epochs = 20;
    int batch_size = 32;
    double base_lr = 5e-5;
    double warmup_ratio = 0.1;
    LossWeights<S> weights;
    uint64_t seed = 0;
    S stage2_mse_weight = S(1);       // weight on the alignment MSE next to the CE term
    bool stage3_include_mse = false;  // optionally keep the alignment MSE term in stage 3
    bool use_nlu = true;              // false: stage 3 trains plain queries (ablation)

    void validate() const {
        if (stage < 1 || stage > 3) throw std::invalid_argument("stage must be 1..3");
        if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
        if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
        if (warmup_ratio < 0.0 || warmup_ratio >= 1.0)
            throw std::invalid_argument("warmup_ratio must be in [0,1)");
        if (!(base_lr >= 0.0)) throw std::invalid_argument("base_lr must be >= 0");
        weights.validate();
    }
};

struct TraceRow {
    int64_t step = 0;
    double loss_total = 0, loss_ti = 0, loss_tc = 0, loss_ce = 0, loss_mse = 0, lr = 0;
};
using LossTrace = std::vector<TraceRow>;

inline void write_trace_csv(const LossTrace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write trace " + path);
    out << "step,loss_total,loss_ti,loss_tc,loss_ce,loss_mse,lr\n";
    char buf[256];
    for (const auto& r : trace) {
        std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                      static_cast<long long>(r.step), r.loss_total, r.loss_ti, r.loss_tc,
                      r.loss_ce, r.loss_mse, r.lr);
        out << buf;
    }
    if (!out) throw std::runtime_error("trace write failed: " + path);
}

namespace detail {

// Tokenized views of one split, built once per stage.
template <typename S>
struct TokenizedSplit {
    std::vector<TokenSeq> captions, chunks, queries;
    std::vector<int> intents;
    std::vector<std::vector<int>> gold_slots;  // with O on BOS/EOS
    const std::vector<CorpusRecord>* records = nullptr;

    static TokenizedSplit build(const std::vector<CorpusRecord>& recs, const Vocab& vocab,
                                int caption_t_max, int chunk_t_max) {
        TokenizedSplit s;
        s.records = &recs;
        s.captions.reserve(recs.size());
        for (const auto& r : recs) {
            s.captions.push_back(tokenize(r.caption, vocab, caption_t_max));
            s.chunks.push_back(tokenize(r.chunk, vocab, chunk_t_max));
            s.queries.push_back(tokenize(r.query.tokens, vocab, caption_t_max));
            s.intents.push_back(static_cast<int>(r.query.intent));
            std::vector<int> slots;
            slots.push_back(kSlotO);
            for (int l : r.query.slots) slots.push_back(l);
            slots.push_back(kSlotO);
            s.gold_slots.push_back(std::move(slots));
        }
        return s;
    }
};

template <typename S>
void check_vocab(const ModelBundle<S>& bundle, const Dataset& data) {
    if (bundle.config.vocab_size != data.vocab.size())
        throw std::runtime_error("bundle/corpus vocab size mismatch");
    if (bundle.vocab_crc != 0 && bundle.vocab_crc != vocab_crc32(data.vocab))
        throw std::runtime_error("bundle/corpus vocab mismatch");
}

// Deterministic batch order: one shuffle per epoch, full batches only.
inline std::vector<std::vector<int>> epoch_batches(size_t n, int batch_size, uint64_t stage_seed,
                                                   int stage, int epoch) {
    std::vector<int> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    Rng rng(mix_seed({0xba7cULL, static_cast<uint64_t>(stage), stage_seed,
                      static_cast<uint64_t>(epoch)}));
    rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    for (size_t start = 0; start + static_cast<size_t>(batch_size) <= n;
         start += static_cast<size_t>(batch_size))
        batches.emplace_back(order.begin() + static_cast<long>(start),
                             order.begin() + static_cast<long>(start) + batch_size);
    return batches;
}

// Feeds every trainable tensor that participated in the step to the optimizer.
template <typename S>
void apply_step(ModelBundle<S>& bundle, Binder<S>& bind, Tape<S>& tape, AdamW<S>& optim, S lr) {
    std::vector<std::pair<Tensor<S>*, const Mat<S>*>> grads;
    std::deque<Mat<S>> zeros;  // deque: stable addresses
    bundle.visit([&](Tensor<S>& t) {
        int id = -1;
        bool train = false;
        if (!bind.lookup(t, id, train) || !train) return;
        const Mat<S>& g = tape.grad(id);
        if (g.size() == 0) {
            zeros.push_back(Mat<S>::Zero(t.value.rows(), t.value.cols()));
            grads.emplace_back(&t, &zeros.back());
        } else {
            grads.emplace_back(&t, &g);
        }
    });
    optim.step(grads, lr);
}

template <typename S>
Binder<S> make_binder(Tape<S>& tape, const std::set<std::string>& frozen_groups) {
    return Binder<S>(tape, [&frozen_groups](const std::string& name) {
        return frozen_groups.count(group_of(name)) == 0;
    });
}

inline void check_finite(double loss, int64_t step) {
    if (!std::isfinite(loss))
        throw std::runtime_error("non-finite loss at step " + std::to_string(step));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: interleaved text-image / text-chunk contrastive training of the
// two towers plus temperature. One TI step then one TC step per batch.
// ---------------------------------------------------------------------------

template <typename S>
LossTrace run_stage1(ModelBundle<S>& bundle, const Dataset& data, const StageConfig<S>& cfg,
                     AdamW<S>& optim) {
    cfg.validate();
    if (cfg.stage != 1) throw std::invalid_argument("run_stage1 requires stage=1");
    detail::check_vocab(bundle, data);
    const auto split =
        detail::TokenizedSplit<S>::build(data.train, data.vocab, data.config.caption_t_max, data.config.chunk_t_max);
    const std::set<std::string> frozen;  // everything trains

    const int64_t batches_per_epoch =
        static_cast<int64_t>(data.train.size() / static_cast<size_t>(cfg.batch_size));
    const int64_t total_steps = 2 * batches_per_epoch * cfg.epochs;
    LossTrace trace;
    trace.reserve(static_cast<size_t>(total_steps));
    int64_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches =
            detail::epoch_batches(data.train.size(), cfg.batch_size, cfg.seed, 1, epoch);
        for (const auto& batch : batches) {
            // --- text-image step ---
            {
                Tape<S> tape(4096);
                Binder<S> bind = detail::make_binder(tape, frozen);
                std::vector<int> cap_rows, img_rows;
                for (int idx : batch) {
                    cap_rows.push_back(
                        encode_text(bind, bundle.text, split.captions[static_cast<size_t>(idx)]));
                    img_rows.push_back(encode_image(
                        bind, bundle.image, data.image_of(data.train[static_cast<size_t>(idx)])));
                }
                const int A = tape.stack_rows(cap_rows);
                const int B = tape.stack_rows(img_rows);
                const int tau = tape_temperature(tape, bind(bundle.log_tau));
                const int loss = tape_info_nce(tape, tape_similarity(tape, A, B, tau));
                const double lv = static_cast<double>(tape.value(loss)(0, 0));
                detail::check_finite(lv, step);
                const double lr =
                    lr_schedule(step, total_steps, cfg.base_lr, cfg.warmup_ratio);
                tape.backward_scalar(loss);
                detail::apply_step(bundle, bind, tape, optim, static_cast<S>(lr));
                trace.push_back({step + 1, lv, lv, 0, 0, 0, lr});
                ++step;
            }
            // --- text-chunk step ---
            {
                Tape<S> tape(4096);
                Binder<S> bind = detail::make_binder(tape, frozen);
                std::vector<int> cap_rows, chunk_rows;
                for (int idx : batch) {
                    cap_rows.push_back(
                        encode_text(bind, bundle.text, split.captions[static_cast<size_t>(idx)]));
                    chunk_rows.push_back(
                        encode_text(bind, bundle.text, split.chunks[static_cast<size_t>(idx)]));
                }
                const int A = tape.stack_rows(cap_rows);
                const int B = tape.stack_rows(chunk_rows);
                const int tau = tape_temperature(tape, bind(bundle.log_tau));
                const int tc = tape_info_nce(tape, tape_similarity(tape, A, B, tau));
                const int loss = tape.scale(tc, cfg.weights.alpha);
                const double tc_v = static_cast<double>(tape.value(tc)(0, 0));
                const double lv = static_cast<double>(tape.value(loss)(0, 0));
                detail::check_finite(lv, step);
                const double lr =
                    lr_schedule(step, total_steps, cfg.base_lr, cfg.warmup_ratio);
                tape.backward_scalar(loss);
                detail::apply_step(bundle, bind, tape, optim, static_cast<S>(lr));
                trace.push_back({step + 1, lv, 0, tc_v, 0, 0, lr});
                ++step;
            }
        }
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Stage 2: encoders and temperature frozen; NLU + fusion train on
// L = CE + lambda * MSE(fused query embedding, semantic-text embedding).
// The semantic-text target goes through the frozen encoder once and is held
// constant; the fused query goes through the same frozen encoder with
// gradients flowing into NLU and fusion only.
// ---------------------------------------------------------------------------

template <typename S>
LossTrace run_stage2(ModelBundle<S>& bundle, const Dataset& data, const StageConfig<S>& cfg,
                     AdamW<S>& optim) {
    cfg.validate();
    if (cfg.stage != 2) throw std::invalid_argument("run_stage2 requires stage=2");
    detail::check_vocab(bundle, data);
    const std::set<std::string> frozen = {"text", "image", "temperature"};
    const uint32_t text_sum = group_checksum(bundle, "text");
    const uint32_t image_sum = group_checksum(bundle, "image");
    const uint32_t tau_sum = group_checksum(bundle, "temperature");

    const auto split =
        detail::TokenizedSplit<S>::build(data.train, data.vocab, data.config.caption_t_max, data.config.chunk_t_max);

    // Constant alignment targets; gold slot labels applied to the stored query.
    std::vector<Mat<S>> targets(data.train.size());
    for (size_t i = 0; i < data.train.size(); ++i) {
        const auto semantic = extract_semantic_text(data.train[i].query);
        targets[i] = embed_text(bundle.text, tokenize(semantic, data.vocab, data.config.caption_t_max));
    }

    const int64_t batches_per_epoch =
        static_cast<int64_t>(data.train.size() / static_cast<size_t>(cfg.batch_size));
    const int64_t total_steps = batches_per_epoch * cfg.epochs;
    LossTrace trace;
    trace.reserve(static_cast<size_t>(total_steps));
    int64_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches =
            detail::epoch_batches(data.train.size(), cfg.batch_size, cfg.seed, 2, epoch);
        for (const auto& batch : batches) {
            Tape<S> tape(4096);
            Binder<S> bind = detail::make_binder(tape, frozen);
            std::vector<int> fused_rows, target_rows;
            std::vector<CESampleIds> ce_batch;
            for (int idx : batch) {
                const size_t i = static_cast<size_t>(idx);
                const TokenSeq& q = split.queries[i];
                const NLUOutputIds nlu = nlu_forward(bind, bundle.nlu, q);
                const int input = text_input_embeddings(bind, bundle.text, q);
                const int fused = fuse(bind, bundle.fusion, input, nlu.semantic);
                fused_rows.push_back(encode_text(bind, bundle.text, q, fused));
                target_rows.push_back(tape.constant(targets[i]));
                ce_batch.push_back(
                    {nlu.intent_logits, split.intents[i], nlu.slot_logits, split.gold_slots[i]});
            }
            const int M = tape.stack_rows(fused_rows);
            const int T = tape.stack_rows(target_rows);
            const int mse_node = tape.mse(M, T);
            const int ce_node = tape_nlu_ce(tape, ce_batch);
            const int loss = tape.add(ce_node, tape.scale(mse_node, cfg.stage2_mse_weight));
            const double lv = static_cast<double>(tape.value(loss)(0, 0));
            detail::check_finite(lv, step);
            const double lr = lr_schedule(step, total_steps, cfg.base_lr, cfg.warmup_ratio);
            tape.backward_scalar(loss);
            detail::apply_step(bundle, bind, tape, optim, static_cast<S>(lr));
            trace.push_back({step + 1, lv, 0, 0, static_cast<double>(tape.value(ce_node)(0, 0)),
                             static_cast<double>(tape.value(mse_node)(0, 0)), lr});
            ++step;
        }
    }

    if (group_checksum(bundle, "text") != text_sum ||
        group_checksum(bundle, "image") != image_sum ||
        group_checksum(bundle, "temperature") != tau_sum)
        throw std::runtime_error("freeze contract violated in stage 2");
    return trace;
}

// ---------------------------------------------------------------------------
// Stage 3: everything unfreezes; each step consumes one TriBatch
// (query-image, query-chunk, NLU annotations) minimizing
// L_QI + a*L_QC + b*CE (+ optional MSE). Queries go through the fused path
// unless use_nlu is off.
// ---------------------------------------------------------------------------

template <typename S>
LossTrace run_stage3(ModelBundle<S>& bundle, const Dataset& data, const StageConfig<S>& cfg,
                     AdamW<S>& optim) {
    cfg.validate();
    if (cfg.stage != 3) throw std::invalid_argument("run_stage3 requires stage=3");
    detail::check_vocab(bundle, data);
    std::set<std::string> frozen;
    if (!cfg.use_nlu) frozen = {"nlu", "fusion"};

    const auto split =
        detail::TokenizedSplit<S>::build(data.train, data.vocab, data.config.caption_t_max, data.config.chunk_t_max);

    const int64_t batches_per_epoch =
        static_cast<int64_t>(data.train.size() / static_cast<size_t>(cfg.batch_size));
    const int64_t total_steps = batches_per_epoch * cfg.epochs;
    LossTrace trace;
    trace.reserve(static_cast<size_t>(total_steps));
    int64_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches =
            detail::epoch_batches(data.train.size(), cfg.batch_size, cfg.seed, 3, epoch);
        for (const auto& batch : batches) {
            Tape<S> tape(8192);
            Binder<S> bind = detail::make_binder(tape, frozen);
            std::vector<int> q_rows, img_rows, chunk_rows, target_rows;
            std::vector<CESampleIds> ce_batch;
            for (int idx : batch) {
                const size_t i = static_cast<size_t>(idx);
                const TokenSeq& q = split.queries[i];
                if (cfg.use_nlu) {
                    const NLUOutputIds nlu = nlu_forward(bind, bundle.nlu, q);
                    const int input = text_input_embeddings(bind, bundle.text, q);
                    const int fused = fuse(bind, bundle.fusion, input, nlu.semantic);
                    q_rows.push_back(encode_text(bind, bundle.text, q, fused));
                    ce_batch.push_back({nlu.intent_logits, split.intents[i], nlu.slot_logits,
                                        split.gold_slots[i]});
                } else {
                    q_rows.push_back(encode_text(bind, bundle.text, q));
                }
                img_rows.push_back(encode_image(bind, bundle.image,
                                                data.image_of(data.train[i])));
                chunk_rows.push_back(encode_text(bind, bundle.text, split.chunks[i]));
                if (cfg.stage3_include_mse) {
                    const auto semantic = extract_semantic_text(data.train[i].query);
                    target_rows.push_back(encode_text(
                        bind, bundle.text, tokenize(semantic, data.vocab, data.config.caption_t_max)));
                }
            }
            const int Q = tape.stack_rows(q_rows);
            const int I = tape.stack_rows(img_rows);
            const int C = tape.stack_rows(chunk_rows);
            const int tau = tape_temperature(tape, bind(bundle.log_tau));
            const int qi = tape_info_nce(tape, tape_similarity(tape, Q, I, tau));
            const int qc = tape_info_nce(tape, tape_similarity(tape, Q, C, tau));
            int loss = tape.add(qi, tape.scale(qc, cfg.weights.a));
            double ce_v = 0, mse_v = 0;
            if (cfg.use_nlu && cfg.weights.b > S(0)) {
                const int ce = tape_nlu_ce(tape, ce_batch);
                ce_v = static_cast<double>(tape.value(ce)(0, 0));
                loss = tape.add(loss, tape.scale(ce, cfg.weights.b));
            }
            if (cfg.stage3_include_mse) {
                const int mse_node = tape.mse(Q, tape.stack_rows(target_rows));
                mse_v = static_cast<double>(tape.value(mse_node)(0, 0));
                loss = tape.add(loss, tape.scale(mse_node, cfg.stage2_mse_weight));
            }
            const double lv = static_cast<double>(tape.value(loss)(0, 0));
            detail::check_finite(lv, step);
            const double lr = lr_schedule(step, total_steps, cfg.base_lr, cfg.warmup_ratio);
            tape.backward_scalar(loss);
            detail::apply_step(bundle, bind, tape, optim, static_cast<S>(lr));
            trace.push_back({step + 1, lv, static_cast<double>(tape.value(qi)(0, 0)),
                             static_cast<double>(tape.value(qc)(0, 0)), ce_v, mse_v, lr});
            ++step;
        }
    }
    return trace;
}

}  // namespace uniret
