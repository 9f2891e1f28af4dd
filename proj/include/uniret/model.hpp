#pragma once

#include "uniret/encoders.hpp"
#include "uniret/losses.hpp"
#include "uniret/nlu.hpp"

#include <string>
#include <vector>

namespace uniret {

// Parameter group = tensor-name prefix before the first dot. Groups are the
// unit of freezing and of checkpoint bookkeeping.
inline std::string group_of(const std::string& tensor_name) {
    const auto dot = tensor_name.find('.');
    return dot == std::string::npos ? tensor_name : tensor_name.substr(0, dot);
}

inline const std::vector<std::string>& model_groups() {
    static const std::vector<std::string> groups = {"text", "image", "nlu", "fusion",
                                                    "temperature"};
    return groups;
}

template <typename S>
struct ModelBundle {
    ModelConfig config;
    TextEncoderParams<S> text;
    ImageEncoderParams<S> image;
    NLUParams<S> nlu;
    FusionParams<S> fusion;
    Tensor<S> log_tau;  // 1x1
    uint32_t vocab_crc = 0;

    template <typename F>
    void visit(F&& f) {
        text.visit(f);
        image.visit(f);
        nlu.visit(f);
        fusion.visit(f);
        f(log_tau);
    }
    template <typename F>
    void visit(F&& f) const {
        const_cast<ModelBundle*>(this)->visit(
            [&](auto& t) { f(const_cast<const Tensor<S>&>(t)); });
    }
};

template <typename S>
ModelBundle<S> init_bundle(const ModelConfig& cfg, uint64_t seed) {
    ModelBundle<S> b;
    b.config = cfg;
    b.text = init_text_encoder<S>(cfg, seed);
    b.image = init_image_encoder<S>(cfg, seed);
    b.nlu = init_nlu<S>(cfg, seed);
    b.fusion = init_fusion<S>(cfg, seed);
    b.log_tau = Tensor<S>{"temperature.log_tau", Mat<S>::Constant(1, 1, static_cast<S>(log_tau_init()))};
    return b;
}

}  // namespace uniret
