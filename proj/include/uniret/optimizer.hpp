#pragma once

#include "uniret/common.hpp"
#include "uniret/nn.hpp"

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace uniret {

// Linear warmup over ceil(warmup_ratio * total) steps, then cosine to zero.
inline double lr_schedule(int64_t step, int64_t total_steps, double base_lr, double warmup_ratio) {
    if (step < 0 || step > total_steps) throw std::invalid_argument("lr_schedule: step out of range");
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0)
        throw std::invalid_argument("lr_schedule: warmup_ratio must be in [0,1)");
    const int64_t warmup =
        static_cast<int64_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (total_steps == warmup) return step == total_steps ? 0.0 : base_lr;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

template <typename S>
struct AdamWConfig {
    S beta1 = static_cast<S>(0.9);
    S beta2 = static_cast<S>(0.999);
    S eps = static_cast<S>(1e-8);
    S weight_decay = static_cast<S>(0.01);
};

// Decoupled weight decay: p <- p*(1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps).
// Moments are keyed by tensor name; the step counter is shared across tensors
// and advances once per step() call.
template <typename S>
class AdamW {
public:
    struct Moments {
        Mat<S> m, v;
    };

    explicit AdamW(AdamWConfig<S> cfg = {}) : cfg_(cfg) {}

    // One optimizer step. Only listed tensors are updated (and decayed);
    // callers pass exactly the tensors that participated in the step.
    void step(const std::vector<std::pair<Tensor<S>*, const Mat<S>*>>& grads, S lr) {
        if (!(lr >= S(0))) throw std::invalid_argument("adamw: lr must be >= 0");
        ++step_;
        const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg_.beta1),
                                                     static_cast<double>(step_)));
        const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(cfg_.beta2),
                                                     static_cast<double>(step_)));
        for (const auto& [tensor, grad] : grads) {
            Mat<S>& p = tensor->value;
            if (grad->rows() != p.rows() || grad->cols() != p.cols())
                throw std::invalid_argument("adamw: gradient shape mismatch for " + tensor->name);
            if (!grad->allFinite())
                throw std::runtime_error("non-finite gradient in " + tensor->name);
            Moments& mom = state_[tensor->name];
            if (mom.m.size() == 0) {
                mom.m = Mat<S>::Zero(p.rows(), p.cols());
                mom.v = Mat<S>::Zero(p.rows(), p.cols());
            }
            mom.m = cfg_.beta1 * mom.m + (S(1) - cfg_.beta1) * (*grad);
            mom.v = (cfg_.beta2 * mom.v.array() +
                     (S(1) - cfg_.beta2) * grad->array().square()).matrix();
            p *= (S(1) - lr * cfg_.weight_decay);
            p.array() -=
                lr * (mom.m.array() / bc1) / ((mom.v.array() / bc2).sqrt() + cfg_.eps);
        }
    }

    int64_t step_count() const { return step_; }
    const AdamWConfig<S>& config() const { return cfg_; }

    // Deterministically ordered state for checkpointing.
    const std::map<std::string, Moments>& state() const { return state_; }
    void restore(std::map<std::string, Moments> state, int64_t step) {
        state_ = std::move(state);
        step_ = step;
    }

private:
    AdamWConfig<S> cfg_;
    std::map<std::string, Moments> state_;
    int64_t step_ = 0;
};

}  // namespace uniret
