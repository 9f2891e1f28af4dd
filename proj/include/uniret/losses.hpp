#pragma once

#include "uniret/common.hpp"
#include "uniret/tape.hpp"

#include <cmath>
#include <vector>

namespace uniret {

constexpr double kTauMin = 0.01;
constexpr double kTauMax = 100.0;
inline double log_tau_init() { return std::log(0.07); }

template <typename S>
struct SimMatrix {
    Mat<S> values;  // dot(A_r, B_c) / tau
    S tau;
};

template <typename S>
struct LossWeights {
    S alpha = S(1);    // stage-1 text-chunk weight
    S a = S(1);        // stage-3 query-chunk weight
    S b = S(0.5);      // stage-3 NLU CE weight

    void validate() const {
        for (S v : {alpha, a, b})
            if (!(v >= S(0)) || !std::isfinite(static_cast<double>(v)))
                throw std::invalid_argument("loss weights must be finite and non-negative");
    }
};

template <typename S>
S clamp_tau(S tau) {
    return std::min(static_cast<S>(kTauMax), std::max(static_cast<S>(kTauMin), tau));
}

// ---------------------------------------------------------------------------
// Value-level losses (pure Eigen; the training path mirrors these on a tape).
// ---------------------------------------------------------------------------

template <typename S>
SimMatrix<S> similarity_matrix(const Mat<S>& A, const Mat<S>& B, S tau) {
    if (A.rows() != B.rows() || A.cols() != B.cols())
        throw std::invalid_argument("similarity_matrix: shape mismatch");
    if (A.rows() < 1) throw std::invalid_argument("similarity_matrix: empty batch");
    for (const Mat<S>* m : {&A, &B})
        for (Eigen::Index r = 0; r < m->rows(); ++r)
            if (std::abs(static_cast<double>(m->row(r).norm()) - 1.0) > 1e-4)
                throw std::invalid_argument("similarity_matrix: row is not unit-norm");
    const S t = clamp_tau(tau);
    return {Mat<S>(A * B.transpose() / t), t};
}

namespace detail {

// log softmax of one row at the row's own index `r`, max-shifted.
template <typename S>
S diag_log_softmax(const Mat<S>& m, Eigen::Index r, bool column_direction) {
    const auto vec = column_direction ? Mat<S>(m.col(r).transpose()) : Mat<S>(m.row(r));
    const S mx = vec.maxCoeff();
    const S lse = std::log((vec.array() - mx).exp().sum()) + mx;
    return vec(0, r) - lse;
}

}  // namespace detail

// Symmetric InfoNCE: -(1/2N) sum_r [log softmax_row(S)_rr + log softmax_col(S)_rr].
template <typename S>
S info_nce_symmetric(const SimMatrix<S>& sim) {
    const Mat<S>& m = sim.values;
    if (m.rows() != m.cols()) throw std::invalid_argument("info_nce_symmetric: matrix not square");
    S total = S(0);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        total += detail::diag_log_softmax(m, r, false);
        total += detail::diag_log_softmax(m, r, true);
    }
    return -total / static_cast<S>(2 * m.rows());
}

template <typename S>
S stage1_loss(const SimMatrix<S>& ti, const SimMatrix<S>& tc, const LossWeights<S>& w) {
    w.validate();
    return info_nce_symmetric(ti) + w.alpha * info_nce_symmetric(tc);
}

template <typename S>
struct NLUCESample {
    Mat<S> intent_logits;        // 1 x |intents|
    int gold_intent = 0;
    Mat<S> slot_logits;          // len x |labels|
    std::vector<int> gold_slots; // < 0 masks a position (PAD)
};

// (sum of intent CE + slot CE over the batch) / N, masked positions skipped.
template <typename S>
S nlu_ce_loss(const std::vector<NLUCESample<S>>& batch) {
    if (batch.empty()) throw std::invalid_argument("nlu_ce_loss: empty batch");
    auto row_ce = [](const Mat<S>& logits, Eigen::Index r, int gold) {
        if (gold < 0 || gold >= static_cast<int>(logits.cols()))
            throw std::out_of_range("nlu_ce_loss: label out of range");
        const S mx = logits.row(r).maxCoeff();
        const S lse = std::log((logits.row(r).array() - mx).exp().sum()) + mx;
        return -(logits(r, gold) - lse);
    };
    S total = S(0);
    for (const auto& s : batch) {
        if (s.intent_logits.rows() != 1)
            throw std::invalid_argument("nlu_ce_loss: intent logits must be one row");
        if (static_cast<Eigen::Index>(s.gold_slots.size()) != s.slot_logits.rows())
            throw std::invalid_argument("nlu_ce_loss: slot label count mismatch");
        total += row_ce(s.intent_logits, 0, s.gold_intent);
        for (Eigen::Index j = 0; j < s.slot_logits.rows(); ++j) {
            const int gold = s.gold_slots[static_cast<size_t>(j)];
            if (gold < 0) continue;
            total += row_ce(s.slot_logits, j, gold);
        }
    }
    return total / static_cast<S>(batch.size());
}

// Squared difference averaged over batch and embedding dimension.
template <typename S>
S alignment_mse(const Mat<S>& M, const Mat<S>& T) {
    if (M.rows() != T.rows() || M.cols() != T.cols())
        throw std::invalid_argument("alignment_mse: shape mismatch");
    if (M.size() == 0) throw std::invalid_argument("alignment_mse: empty input");
    return (M - T).array().square().mean();
}

template <typename S>
S stage3_loss(const SimMatrix<S>& qi, const SimMatrix<S>& qc,
              const std::vector<NLUCESample<S>>& nlu_batch, const LossWeights<S>& w) {
    w.validate();
    return info_nce_symmetric(qi) + w.a * info_nce_symmetric(qc) + w.b * nlu_ce_loss(nlu_batch);
}

// ---------------------------------------------------------------------------
// Tape builders (training path). Each returns a 1x1 node.
// ---------------------------------------------------------------------------

// tau node from a log-tau parameter node.
template <typename S>
int tape_temperature(Tape<S>& t, int log_tau) {
    return t.temperature(log_tau, static_cast<S>(kTauMin), static_cast<S>(kTauMax));
}

// N x N similarity node from two N x d embedding nodes and a tau node.
template <typename S>
int tape_similarity(Tape<S>& t, int A, int B, int tau) {
    return t.div_by_scalar(t.matmul_nt(A, B), tau);
}

template <typename S>
int tape_info_nce(Tape<S>& t, int sim) {
    const Eigen::Index n = t.value(sim).rows();
    if (n != t.value(sim).cols()) throw std::invalid_argument("tape_info_nce: matrix not square");
    const int row_term = t.sum_diag(t.row_log_softmax(sim));
    const int col_term = t.sum_diag(t.row_log_softmax(t.transpose(sim)));
    return t.scale(t.add(row_term, col_term), static_cast<S>(-1.0 / (2.0 * static_cast<double>(n))));
}

// Per-sample CE contributions: intent logits node + slot logits node with
// gold labels; accumulate with tape_nlu_ce over a batch.
struct CESampleIds {
    int intent_logits;
    int gold_intent;
    int slot_logits;
    std::vector<int> gold_slots;
};

template <typename S>
int tape_nlu_ce(Tape<S>& t, const std::vector<CESampleIds>& batch) {
    if (batch.empty()) throw std::invalid_argument("tape_nlu_ce: empty batch");
    int acc = -1;
    for (const auto& s : batch) {
        const int intent_ce = t.ce_rows(s.intent_logits, {s.gold_intent});
        const int slot_ce = t.ce_rows(s.slot_logits, s.gold_slots);
        const int both = t.add(intent_ce, slot_ce);
        acc = acc < 0 ? both : t.add(acc, both);
    }
    return t.scale(acc, static_cast<S>(1.0 / static_cast<double>(batch.size())));
}

}  // namespace uniret
