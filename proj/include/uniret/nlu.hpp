#pragma once

#include "uniret/corpus.hpp"
#include "uniret/encoders.hpp"
#include "uniret/nn.hpp"
#include "uniret/tape.hpp"

#include <string>
#include <vector>

namespace uniret {

// Independent mini-transformer backbone with three heads: sequence-level
// intent logits, per-token slot logits, and per-token semantic features
// (the fusion block's key/value source).
template <typename S>
struct NLUParams {
    Tensor<S> tok_emb, pos_emb;
    TransformerStack<S> stack;
    Tensor<S> intent_w, intent_b;  // d_model -> |intents|
    Tensor<S> slot_w, slot_b;      // d_model -> |slot labels|
    Tensor<S> sem_w, sem_b;        // d_model -> d_model

    template <typename F>
    void visit(F&& f) {
        f(tok_emb); f(pos_emb);
        stack.visit(f);
        f(intent_w); f(intent_b); f(slot_w); f(slot_b); f(sem_w); f(sem_b);
    }
    template <typename F>
    void visit(F&& f) const {
        const_cast<NLUParams*>(this)->visit([&](auto& t) { f(const_cast<const Tensor<S>&>(t)); });
    }
};

// Single cross-attention block. The output projection starts at zero so the
// residual makes fusion an exact identity before training.
template <typename S>
struct FusionParams {
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;

    template <typename F>
    void visit(F&& f) {
        f(wq); f(bq); f(wk); f(bk); f(wv); f(bv); f(wo); f(bo);
    }
    template <typename F>
    void visit(F&& f) const {
        const_cast<FusionParams*>(this)->visit(
            [&](auto& t) { f(const_cast<const Tensor<S>&>(t)); });
    }
};

template <typename S>
NLUParams<S> init_nlu(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.vocab_size < kNumSpecials) throw std::invalid_argument("vocab_size unset");
    Rng rng(mix_seed({0x421007ULL, seed}));
    NLUParams<S> p;
    p.tok_emb = init_embedding<S>("nlu.tok_emb", cfg.vocab_size, cfg.d_model, rng);
    p.pos_emb = init_embedding<S>("nlu.pos_emb", cfg.text_t_max, cfg.d_model, rng);
    p.stack = init_stack<S>("nlu", cfg.d_model, cfg.n_layer, cfg.n_head, rng);
    p.intent_w = init_linear_weight<S>("nlu.intent_w", cfg.d_model, kNumIntents, rng);
    p.intent_b = init_zeros<S>("nlu.intent_b", 1, kNumIntents);
    p.slot_w = init_linear_weight<S>("nlu.slot_w", cfg.d_model, kNumSlotLabels, rng);
    p.slot_b = init_zeros<S>("nlu.slot_b", 1, kNumSlotLabels);
    p.sem_w = init_linear_weight<S>("nlu.sem_w", cfg.d_model, cfg.d_model, rng);
    p.sem_b = init_zeros<S>("nlu.sem_b", 1, cfg.d_model);
    return p;
}

template <typename S>
FusionParams<S> init_fusion(const ModelConfig& cfg, uint64_t seed) {
    Rng rng(mix_seed({0xf0510ULL, seed}));
    FusionParams<S> p;
    p.wq = init_linear_weight<S>("fusion.wq", cfg.d_model, cfg.d_model, rng);
    p.bq = init_zeros<S>("fusion.bq", 1, cfg.d_model);
    p.wk = init_linear_weight<S>("fusion.wk", cfg.d_model, cfg.d_model, rng);
    p.bk = init_zeros<S>("fusion.bk", 1, cfg.d_model);
    p.wv = init_linear_weight<S>("fusion.wv", cfg.d_model, cfg.d_model, rng);
    p.bv = init_zeros<S>("fusion.bv", 1, cfg.d_model);
    p.wo = init_zeros<S>("fusion.wo", cfg.d_model, cfg.d_model);
    p.bo = init_zeros<S>("fusion.bo", 1, cfg.d_model);
    return p;
}

// Node ids of the three NLU outputs for one sequence.
struct NLUOutputIds {
    int intent_logits;  // 1 x |intents|
    int slot_logits;    // len x |labels|
    int semantic;       // len x d_model
};

template <typename S>
NLUOutputIds nlu_forward(Binder<S>& bind, const NLUParams<S>& p, const TokenSeq& seq) {
    Tape<S>& t = bind.tape();
    if (seq.size() == 0) throw std::invalid_argument("empty sequence");
    std::vector<int> positions(static_cast<size_t>(seq.size()));
    for (int i = 0; i < seq.size(); ++i) positions[static_cast<size_t>(i)] = i;
    const int tok = t.gather_rows(bind(p.tok_emb), seq.ids);
    const int pos = t.gather_rows(bind(p.pos_emb), positions);
    const int h = stack_forward(bind, p.stack, t.add(tok, pos));
    NLUOutputIds out;
    out.intent_logits = t.linear(t.mean_rows(h), bind(p.intent_w), bind(p.intent_b));
    out.slot_logits = t.linear(h, bind(p.slot_w), bind(p.slot_b));
    out.semantic = t.linear(h, bind(p.sem_w), bind(p.sem_b));
    return out;
}

// input + W_o(cross_attention(Q=input, K=V=semantic_features)).
template <typename S>
int fuse(Binder<S>& bind, const FusionParams<S>& p, int input, int semantic) {
    Tape<S>& t = bind.tape();
    if (t.value(input).cols() != t.value(semantic).cols())
        throw std::invalid_argument("fuse width mismatch");
    if (t.value(input).cols() != p.wq.value.rows())
        throw std::invalid_argument("fuse width must equal d_model");
    const int d = static_cast<int>(t.value(input).cols());
    const int q = t.linear(input, bind(p.wq), bind(p.bq));
    const int k = t.linear(semantic, bind(p.wk), bind(p.bk));
    const int v = t.linear(semantic, bind(p.wv), bind(p.bv));
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
    const int attn = t.matmul(t.row_softmax(t.scale(t.matmul_nt(q, k), inv_sqrt)), v);
    return t.add(input, t.linear(attn, bind(p.wo), bind(p.bo)));
}

// ---------------------------------------------------------------------------
// Plain-value inference helpers.
// ---------------------------------------------------------------------------

template <typename S>
struct NLUOutput {
    Mat<S> intent_logits;
    Mat<S> slot_logits;
    Mat<S> semantic;
};

template <typename S>
NLUOutput<S> nlu_infer(const NLUParams<S>& p, const TokenSeq& seq) {
    Tape<S> tape;
    Binder<S> bind(tape, [](const std::string&) { return false; });
    const NLUOutputIds ids = nlu_forward(bind, p, seq);
    return {tape.value(ids.intent_logits), tape.value(ids.slot_logits), tape.value(ids.semantic)};
}

// Argmax per head; ties break toward the lowest index.
template <typename S>
std::pair<int, std::vector<int>> predict(const NLUOutput<S>& out) {
    auto argmax_row = [](const Mat<S>& m, Eigen::Index r) {
        int best = 0;
        for (Eigen::Index c = 1; c < m.cols(); ++c)
            if (m(r, c) > m(r, best)) best = static_cast<int>(c);
        return best;
    };
    std::vector<int> slots;
    slots.reserve(static_cast<size_t>(out.slot_logits.rows()));
    for (Eigen::Index r = 0; r < out.slot_logits.rows(); ++r)
        slots.push_back(argmax_row(out.slot_logits, r));
    return {argmax_row(out.intent_logits, 0), slots};
}

}  // namespace uniret
