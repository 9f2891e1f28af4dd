#pragma once

#include "uniret/common.hpp"
#include "uniret/tape.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace uniret {

template <typename S>
struct Tensor {
    std::string name;
    Mat<S> value;
};

// Binds model tensors onto a tape, once each; frozen tensors enter as
// constants so no gradient work happens behind them (input gradients still
// flow, which is what the fused-query path needs).
template <typename S>
class Binder {
public:
    using TrainPredicate = std::function<bool(const std::string&)>;

    explicit Binder(Tape<S>& tape, TrainPredicate trainable = nullptr)
        : tape_(tape), trainable_(std::move(trainable)) {}

    int operator()(const Tensor<S>& t) {
        auto it = ids_.find(&t);
        if (it != ids_.end()) return it->second.id;
        const bool train = trainable_ ? trainable_(t.name) : true;
        const int id = train ? tape_.param(t.value) : tape_.constant(t.value);
        ids_.emplace(&t, Entry{id, train});
        return id;
    }

    // True if the tensor was bound; fills its node id and trainability.
    bool lookup(const Tensor<S>& t, int& id, bool& train) const {
        auto it = ids_.find(&t);
        if (it == ids_.end()) return false;
        id = it->second.id;
        train = it->second.train;
        return true;
    }

    Tape<S>& tape() { return tape_; }

private:
    struct Entry {
        int id;
        bool train;
    };
    Tape<S>& tape_;
    TrainPredicate trainable_;
    std::unordered_map<const Tensor<S>*, Entry> ids_;
};

// Pre-norm transformer block: x + Attn(LN1(x)), then h + FF(LN2(h)).
// LayerNorm scale is stored as a delta from 1 so freshly initialized gains
// sit at 0.
template <typename S>
struct BlockParams {
    Tensor<S> ln1_g, ln1_b;
    Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<S> ln2_g, ln2_b;
    Tensor<S> ff1_w, ff1_b, ff2_w, ff2_b;

    template <typename F>
    void visit(F&& f) {
        f(ln1_g); f(ln1_b);
        f(wq); f(bq); f(wk); f(bk); f(wv); f(bv); f(wo); f(bo);
        f(ln2_g); f(ln2_b);
        f(ff1_w); f(ff1_b); f(ff2_w); f(ff2_b);
    }
    template <typename F>
    void visit(F&& f) const {
        const_cast<BlockParams*>(this)->visit([&](auto& t) { f(const_cast<const Tensor<S>&>(t)); });
    }
};

template <typename S>
struct TransformerStack {
    std::vector<BlockParams<S>> blocks;
    Tensor<S> ln_f_g, ln_f_b;
    int n_head = 1;

    template <typename F>
    void visit(F&& f) {
        for (auto& b : blocks) b.visit(f);
        f(ln_f_g); f(ln_f_b);
    }
    template <typename F>
    void visit(F&& f) const {
        for (const auto& b : blocks) b.visit(f);
        f(ln_f_g); f(ln_f_b);
    }
};

// ---------------------------------------------------------------------------
// Initialization. One Rng drives all tensors in visit order, so a seed pins
// every byte.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> init_linear_weight(const std::string& name, int fan_in, int fan_out, Rng& rng) {
    Mat<S> w(fan_in, fan_out);
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < w.size(); ++i)
        w(i) = static_cast<S>(rng.truncated_normal(std_dev));
    return {name, std::move(w)};
}

template <typename S>
Tensor<S> init_embedding(const std::string& name, int rows, int cols, Rng& rng) {
    Mat<S> w(rows, cols);
    for (Eigen::Index i = 0; i < w.size(); ++i)
        w(i) = static_cast<S>(rng.truncated_normal(0.02));
    return {name, std::move(w)};
}

template <typename S>
Tensor<S> init_zeros(const std::string& name, int rows, int cols) {
    return {name, Mat<S>::Zero(rows, cols)};
}

template <typename S>
BlockParams<S> init_block(const std::string& prefix, int d_model, Rng& rng) {
    const int d_ff = 4 * d_model;
    BlockParams<S> p;
    p.ln1_g = init_zeros<S>(prefix + ".ln1_g", 1, d_model);
    p.ln1_b = init_zeros<S>(prefix + ".ln1_b", 1, d_model);
    p.wq = init_linear_weight<S>(prefix + ".wq", d_model, d_model, rng);
    p.bq = init_zeros<S>(prefix + ".bq", 1, d_model);
    p.wk = init_linear_weight<S>(prefix + ".wk", d_model, d_model, rng);
    p.bk = init_zeros<S>(prefix + ".bk", 1, d_model);
    p.wv = init_linear_weight<S>(prefix + ".wv", d_model, d_model, rng);
    p.bv = init_zeros<S>(prefix + ".bv", 1, d_model);
    p.wo = init_linear_weight<S>(prefix + ".wo", d_model, d_model, rng);
    p.bo = init_zeros<S>(prefix + ".bo", 1, d_model);
    p.ln2_g = init_zeros<S>(prefix + ".ln2_g", 1, d_model);
    p.ln2_b = init_zeros<S>(prefix + ".ln2_b", 1, d_model);
    p.ff1_w = init_linear_weight<S>(prefix + ".ff1_w", d_model, d_ff, rng);
    p.ff1_b = init_zeros<S>(prefix + ".ff1_b", 1, d_ff);
    p.ff2_w = init_linear_weight<S>(prefix + ".ff2_w", d_ff, d_model, rng);
    p.ff2_b = init_zeros<S>(prefix + ".ff2_b", 1, d_model);
    return p;
}

template <typename S>
TransformerStack<S> init_stack(const std::string& prefix, int d_model, int n_layer, int n_head,
                               Rng& rng) {
    if (d_model % n_head != 0) throw std::invalid_argument("d_model must divide by n_head");
    TransformerStack<S> s;
    s.n_head = n_head;
    for (int l = 0; l < n_layer; ++l)
        s.blocks.push_back(init_block<S>(prefix + ".block" + std::to_string(l), d_model, rng));
    s.ln_f_g = init_zeros<S>(prefix + ".ln_f_g", 1, d_model);
    s.ln_f_b = init_zeros<S>(prefix + ".ln_f_b", 1, d_model);
    return s;
}

// ---------------------------------------------------------------------------
// Forward builders (emit tape nodes).
// ---------------------------------------------------------------------------

template <typename S>
int multihead_attention(Binder<S>& bind, const BlockParams<S>& p, int n_head, int x) {
    Tape<S>& t = bind.tape();
    const int d_model = static_cast<int>(t.value(x).cols());
    const int d_head = d_model / n_head;
    const int q = t.linear(x, bind(p.wq), bind(p.bq));
    const int k = t.linear(x, bind(p.wk), bind(p.bk));
    const int v = t.linear(x, bind(p.wv), bind(p.bv));
    std::vector<int> heads;
    heads.reserve(static_cast<size_t>(n_head));
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d_head)));
    for (int h = 0; h < n_head; ++h) {
        const int qh = t.slice_cols(q, h * d_head, d_head);
        const int kh = t.slice_cols(k, h * d_head, d_head);
        const int vh = t.slice_cols(v, h * d_head, d_head);
        const int scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt);
        heads.push_back(t.matmul(t.row_softmax(scores), vh));
    }
    const int merged = n_head == 1 ? heads[0] : t.concat_cols(heads);
    return t.linear(merged, bind(p.wo), bind(p.bo));
}

template <typename S>
int block_forward(Binder<S>& bind, const BlockParams<S>& p, int n_head, int x) {
    Tape<S>& t = bind.tape();
    const int attn_in = t.layer_norm(x, bind(p.ln1_g), bind(p.ln1_b));
    const int h = t.add(x, multihead_attention(bind, p, n_head, attn_in));
    const int ff_in = t.layer_norm(h, bind(p.ln2_g), bind(p.ln2_b));
    const int ff =
        t.linear(t.gelu(t.linear(ff_in, bind(p.ff1_w), bind(p.ff1_b))), bind(p.ff2_w),
                 bind(p.ff2_b));
    return t.add(h, ff);
}

// Blocks then final layer norm.
template <typename S>
int stack_forward(Binder<S>& bind, const TransformerStack<S>& stack, int x) {
    for (const auto& b : stack.blocks) x = block_forward(bind, b, stack.n_head, x);
    return bind.tape().layer_norm(x, bind(stack.ln_f_g), bind(stack.ln_f_b));
}

}  // namespace uniret
