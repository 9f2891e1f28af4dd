#pragma once

#include "uniret/common.hpp"
#include "uniret/corpus.hpp"
#include "uniret/lexicon.hpp"
#include "uniret/nn.hpp"
#include "uniret/tape.hpp"

#include <optional>
#include <string>
#include <vector>

namespace uniret {

struct ModelConfig {
    int d_model = 64;
    int n_layer = 2;
    int n_head = 4;
    int d_emb = 64;
    int vocab_size = 0;                    // set after corpus construction
    int text_t_max = kChunkTMaxDefault;    // shared encoder must fit chunks
};

template <typename S>
struct TextEncoderParams {
    Tensor<S> tok_emb;  // V x d_model
    Tensor<S> pos_emb;  // t_max x d_model
    TransformerStack<S> stack;
    Tensor<S> proj_w, proj_b;  // d_model -> d_emb

    template <typename F>
    void visit(F&& f) {
        f(tok_emb); f(pos_emb);
        stack.visit(f);
        f(proj_w); f(proj_b);
    }
    template <typename F>
    void visit(F&& f) const {
        const_cast<TextEncoderParams*>(this)->visit(
            [&](auto& t) { f(const_cast<const Tensor<S>&>(t)); });
    }
};

template <typename S>
struct ImageEncoderParams {
    Tensor<S> patch_w, patch_b;  // patch_dim -> d_model
    Tensor<S> pos_emb;           // n_patches x d_model
    TransformerStack<S> stack;
    Tensor<S> proj_w, proj_b;

    template <typename F>
    void visit(F&& f) {
        f(patch_w); f(patch_b); f(pos_emb);
        stack.visit(f);
        f(proj_w); f(proj_b);
    }
    template <typename F>
    void visit(F&& f) const {
        const_cast<ImageEncoderParams*>(this)->visit(
            [&](auto& t) { f(const_cast<const Tensor<S>&>(t)); });
    }
};

template <typename S>
TextEncoderParams<S> init_text_encoder(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.vocab_size < kNumSpecials) throw std::invalid_argument("vocab_size unset");
    Rng rng(mix_seed({0x7e87e8ULL, seed}));
    TextEncoderParams<S> p;
    p.tok_emb = init_embedding<S>("text.tok_emb", cfg.vocab_size, cfg.d_model, rng);
    p.pos_emb = init_embedding<S>("text.pos_emb", cfg.text_t_max, cfg.d_model, rng);
    p.stack = init_stack<S>("text", cfg.d_model, cfg.n_layer, cfg.n_head, rng);
    p.proj_w = init_linear_weight<S>("text.proj_w", cfg.d_model, cfg.d_emb, rng);
    p.proj_b = init_zeros<S>("text.proj_b", 1, cfg.d_emb);
    return p;
}

template <typename S>
ImageEncoderParams<S> init_image_encoder(const ModelConfig& cfg, uint64_t seed) {
    Rng rng(mix_seed({0x16a6e0ULL, seed}));
    ImageEncoderParams<S> p;
    p.patch_w = init_linear_weight<S>("image.patch_w", kPatchDim, cfg.d_model, rng);
    p.patch_b = init_zeros<S>("image.patch_b", 1, cfg.d_model);
    p.pos_emb = init_embedding<S>("image.pos_emb", kNumPatches, cfg.d_model, rng);
    p.stack = init_stack<S>("image", cfg.d_model, cfg.n_layer, cfg.n_head, rng);
    p.proj_w = init_linear_weight<S>("image.proj_w", cfg.d_model, cfg.d_emb, rng);
    p.proj_b = init_zeros<S>("image.proj_b", 1, cfg.d_emb);
    return p;
}

template <typename S>
std::pair<TextEncoderParams<S>, ImageEncoderParams<S>> init_params(const ModelConfig& cfg,
                                                                   uint64_t seed) {
    return {init_text_encoder<S>(cfg, seed), init_image_encoder<S>(cfg, seed)};
}

// ---------------------------------------------------------------------------
// Forward passes. All emit nodes on the caller's tape; the returned id is a
// 1 x d_emb unit-norm embedding row.
// ---------------------------------------------------------------------------

// Token + position input embeddings for a sequence: len x d_model.
template <typename S>
int text_input_embeddings(Binder<S>& bind, const TextEncoderParams<S>& p, const TokenSeq& seq) {
    Tape<S>& t = bind.tape();
    if (seq.size() == 0) throw std::invalid_argument("empty sequence");
    if (seq.size() > static_cast<int>(p.pos_emb.value.rows()))
        throw std::invalid_argument("sequence exceeds positional table");
    std::vector<int> positions(static_cast<size_t>(seq.size()));
    for (int i = 0; i < seq.size(); ++i) {
        if (seq.ids[static_cast<size_t>(i)] < 0 ||
            seq.ids[static_cast<size_t>(i)] >= static_cast<int>(p.tok_emb.value.rows()))
            throw std::out_of_range("token id outside embedding table");
        positions[static_cast<size_t>(i)] = i;
    }
    const int tok = t.gather_rows(bind(p.tok_emb), seq.ids);
    const int pos = t.gather_rows(bind(p.pos_emb), positions);
    return t.add(tok, pos);
}

// Runs the encoder from an explicit len x d_model input node (the fused-query
// entry point).
template <typename S>
int encode_text_from(Binder<S>& bind, const TextEncoderParams<S>& p, int input) {
    Tape<S>& t = bind.tape();
    if (t.value(input).cols() != p.proj_w.value.rows())
        throw std::invalid_argument("fused input width must equal d_model");
    const int h = stack_forward(bind, p.stack, input);
    const int pooled = t.mean_rows(h);
    const int projected = t.linear(pooled, bind(p.proj_w), bind(p.proj_b));
    return t.l2_normalize_rows(projected);
}

template <typename S>
int encode_text(Binder<S>& bind, const TextEncoderParams<S>& p, const TokenSeq& seq,
                std::optional<int> fused = std::nullopt) {
    if (fused) {
        Tape<S>& t = bind.tape();
        if (t.value(*fused).rows() != seq.size())
            throw std::invalid_argument("fused override length mismatch");
        return encode_text_from(bind, p, *fused);
    }
    return encode_text_from(bind, p, text_input_embeddings(bind, p, seq));
}

// 32x32x3 image -> 64 x 48 patch matrix (row-major 4x4 patches, pixel order
// (y, x, channel) within a patch).
template <typename S>
Mat<S> image_to_patches(const ImageGrid& img) {
    constexpr int grid = kImageSize / kPatchSize;
    Mat<S> out(kNumPatches, kPatchDim);
    for (int py = 0; py < grid; ++py)
        for (int px = 0; px < grid; ++px) {
            const int row = py * grid + px;
            int col = 0;
            for (int dy = 0; dy < kPatchSize; ++dy)
                for (int dx = 0; dx < kPatchSize; ++dx)
                    for (int c = 0; c < kImageChannels; ++c) {
                        const float v = img.at(py * kPatchSize + dy, px * kPatchSize + dx, c);
                        if (!std::isfinite(v)) throw std::invalid_argument("non-finite pixel");
                        out(row, col++) = static_cast<S>(v);
                    }
        }
    return out;
}

template <typename S>
int encode_image(Binder<S>& bind, const ImageEncoderParams<S>& p, const ImageGrid& img) {
    Tape<S>& t = bind.tape();
    const int patches = t.constant(image_to_patches<S>(img));
    const int embedded = t.linear(patches, bind(p.patch_w), bind(p.patch_b));
    std::vector<int> positions(kNumPatches);
    for (int i = 0; i < kNumPatches; ++i) positions[static_cast<size_t>(i)] = i;
    const int x = t.add(embedded, t.gather_rows(bind(p.pos_emb), positions));
    const int h = stack_forward(bind, p.stack, x);
    const int pooled = t.mean_rows(h);
    const int projected = t.linear(pooled, bind(p.proj_w), bind(p.proj_b));
    return t.l2_normalize_rows(projected);
}

// Inference-only wrappers: fresh constant-bound tape, returns the embedding.
template <typename S>
Mat<S> embed_text(const TextEncoderParams<S>& p, const TokenSeq& seq) {
    Tape<S> tape;
    Binder<S> bind(tape, [](const std::string&) { return false; });
    return tape.value(encode_text(bind, p, seq));
}

template <typename S>
Mat<S> embed_image(const ImageEncoderParams<S>& p, const ImageGrid& img) {
    Tape<S> tape;
    Binder<S> bind(tape, [](const std::string&) { return false; });
    return tape.value(encode_image(bind, p, img));
}

}  // namespace uniret
