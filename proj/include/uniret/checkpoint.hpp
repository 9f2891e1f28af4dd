#pragma once

#include "uniret/model.hpp"
#include "uniret/optimizer.hpp"

#include <json.hpp>
#include <zlib.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace uniret {

constexpr int kCheckpointFormatVersion = 1;

inline uint32_t crc32_bytes(const void* data, size_t len) {
    return static_cast<uint32_t>(
        ::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

inline uint32_t vocab_crc32(const Vocab& vocab) {
    std::string buf;
    for (int id = 0; id < vocab.size(); ++id)
        buf += vocab.word_of(id) + '\t' + std::to_string(id) + '\n';
    return crc32_bytes(buf.data(), buf.size());
}

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"d_model", cfg.d_model}, {"n_layer", cfg.n_layer},
                          {"n_head", cfg.n_head},   {"d_emb", cfg.d_emb},
                          {"vocab_size", cfg.vocab_size}, {"text_t_max", cfg.text_t_max}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_layer = j.at("n_layer").get<int>();
    cfg.n_head = j.at("n_head").get<int>();
    cfg.d_emb = j.at("d_emb").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.text_t_max = j.at("text_t_max").get<int>();
    return cfg;
}

namespace detail {

// Serializes tensors as one flat little-endian float32 blob plus manifest
// entries {name, rows, cols, offset, crc32}; offset is in bytes.
template <typename S>
nlohmann::json write_tensor_blob(const std::vector<const Tensor<S>*>& tensors,
                                 const std::string& blob_path) {
    std::ofstream out(blob_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + blob_path);
    nlohmann::json entries = nlohmann::json::array();
    size_t offset = 0;
    for (const Tensor<S>* t : tensors) {
        std::string bytes;
        bytes.reserve(static_cast<size_t>(t->value.size()) * 4);
        for (Eigen::Index r = 0; r < t->value.rows(); ++r)
            for (Eigen::Index c = 0; c < t->value.cols(); ++c) {
                const float v = static_cast<float>(t->value(r, c));
                uint32_t bits;
                std::memcpy(&bits, &v, 4);
                for (int k = 0; k < 4; ++k)
                    bytes.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
            }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        entries.push_back({{"name", t->name},
                           {"rows", t->value.rows()},
                           {"cols", t->value.cols()},
                           {"offset", offset},
                           {"crc32", crc32_bytes(bytes.data(), bytes.size())}});
        offset += bytes.size();
    }
    if (!out) throw std::runtime_error("blob write failed: " + blob_path);
    return entries;
}

// Reads tensors back by name; verifies shapes, CRCs, and exact coverage.
template <typename S>
std::map<std::string, Mat<S>> read_tensor_blob(const nlohmann::json& entries,
                                               const std::string& blob_path) {
    std::ifstream in(blob_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + blob_path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::map<std::string, Mat<S>> out;
    for (const auto& e : entries) {
        const std::string name = e.at("name").get<std::string>();
        const Eigen::Index rows = e.at("rows").get<Eigen::Index>();
        const Eigen::Index cols = e.at("cols").get<Eigen::Index>();
        const size_t offset = e.at("offset").get<size_t>();
        const size_t len = static_cast<size_t>(rows * cols) * 4;
        if (offset + len > blob.size())
            throw std::runtime_error("truncated checkpoint blob at tensor " + name);
        if (crc32_bytes(blob.data() + offset, len) != e.at("crc32").get<uint32_t>())
            throw std::runtime_error("checksum failure for tensor " + name);
        Mat<S> m(rows, cols);
        size_t p = offset;
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) {
                uint32_t bits = 0;
                for (int k = 0; k < 4; ++k)
                    bits |= static_cast<uint32_t>(static_cast<unsigned char>(blob[p++]))
                            << (8 * k);
                float v;
                std::memcpy(&v, &bits, 4);
                m(r, c) = static_cast<S>(v);
            }
        if (!out.emplace(name, std::move(m)).second)
            throw std::runtime_error("duplicate tensor in checkpoint: " + name);
    }
    return out;
}

}  // namespace detail

template <typename S>
void save_bundle(const ModelBundle<S>& bundle, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::vector<const Tensor<S>*> tensors;
    bundle.visit([&](const Tensor<S>& t) { tensors.push_back(&t); });
    nlohmann::json entries = detail::write_tensor_blob(tensors, dir + "/params.f32");
    nlohmann::json manifest{{"format_version", kCheckpointFormatVersion},
                            {"config", model_config_to_json(bundle.config)},
                            {"vocab_crc", bundle.vocab_crc},
                            {"groups", model_groups()},
                            {"tensors", std::move(entries)}};
    std::ofstream out(dir + "/manifest.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint manifest");
    out << manifest.dump(2) << '\n';
    if (!out) throw std::runtime_error("manifest write failed");
}

template <typename S>
ModelBundle<S> load_bundle(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json", std::ios::binary);
    if (!mf) throw std::runtime_error("no checkpoint manifest in " + dir);
    const nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw std::runtime_error("checkpoint format version mismatch");
    ModelBundle<S> bundle = init_bundle<S>(model_config_from_json(manifest.at("config")), 0);
    bundle.vocab_crc = manifest.at("vocab_crc").get<uint32_t>();
    auto values = detail::read_tensor_blob<S>(manifest.at("tensors"), dir + "/params.f32");
    std::set<std::string> consumed;
    bundle.visit([&](Tensor<S>& t) {
        auto it = values.find(t.name);
        if (it == values.end()) throw std::runtime_error("checkpoint missing tensor " + t.name);
        if (it->second.rows() != t.value.rows() || it->second.cols() != t.value.cols())
            throw std::runtime_error("checkpoint shape mismatch for " + t.name);
        t.value = std::move(it->second);
        consumed.insert(t.name);
    });
    if (consumed.size() != values.size())
        throw std::runtime_error("checkpoint contains unknown tensors");
    return bundle;
}

template <typename S>
void save_optim(const AdamW<S>& optim, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::vector<Tensor<S>> storage;
    storage.reserve(optim.state().size() * 2);
    for (const auto& [name, mom] : optim.state()) {
        storage.push_back({name + ".m", mom.m});
        storage.push_back({name + ".v", mom.v});
    }
    std::vector<const Tensor<S>*> tensors;
    for (const auto& t : storage) tensors.push_back(&t);
    nlohmann::json entries = detail::write_tensor_blob(tensors, dir + "/params.f32");
    nlohmann::json manifest{{"format_version", kCheckpointFormatVersion},
                            {"step", optim.step_count()},
                            {"tensors", std::move(entries)}};
    std::ofstream out(dir + "/manifest.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write optimizer manifest");
    out << manifest.dump(2) << '\n';
    if (!out) throw std::runtime_error("optimizer manifest write failed");
}

template <typename S>
void load_optim(const std::string& dir, AdamW<S>& optim) {
    std::ifstream mf(dir + "/manifest.json", std::ios::binary);
    if (!mf) throw std::runtime_error("no optimizer manifest in " + dir);
    const nlohmann::json manifest = nlohmann::json::parse(mf);
    if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw std::runtime_error("optimizer format version mismatch");
    auto values = detail::read_tensor_blob<S>(manifest.at("tensors"), dir + "/params.f32");
    std::map<std::string, typename AdamW<S>::Moments> state;
    for (auto& [name, mat] : values) {
        if (name.size() < 2) throw std::runtime_error("malformed optimizer tensor name");
        const std::string base = name.substr(0, name.size() - 2);
        const std::string suffix = name.substr(name.size() - 2);
        if (suffix == ".m")
            state[base].m = std::move(mat);
        else if (suffix == ".v")
            state[base].v = std::move(mat);
        else
            throw std::runtime_error("unexpected optimizer tensor " + name);
    }
    for (const auto& [name, mom] : state)
        if (mom.m.size() == 0 || mom.v.size() == 0)
            throw std::runtime_error("optimizer moments incomplete for " + name);
    optim.restore(std::move(state), manifest.at("step").get<int64_t>());
}

// Full checkpoint: model at `dir`, optimizer under `dir`/optim.
template <typename S>
void save_checkpoint(const ModelBundle<S>& bundle, const AdamW<S>& optim, const std::string& dir) {
    save_bundle(bundle, dir);
    save_optim(optim, dir + "/optim");
}

template <typename S>
std::pair<ModelBundle<S>, AdamW<S>> load_checkpoint(const std::string& dir) {
    ModelBundle<S> bundle = load_bundle<S>(dir);
    AdamW<S> optim;
    load_optim(dir + "/optim", optim);
    return {std::move(bundle), std::move(optim)};
}

// Serialized bytes of one group's tensors, for freeze-contract checksums.
template <typename S>
uint32_t group_checksum(const ModelBundle<S>& bundle, const std::string& group) {
    std::string bytes;
    bundle.visit([&](const Tensor<S>& t) {
        if (group_of(t.name) != group) return;
        for (Eigen::Index r = 0; r < t.value.rows(); ++r)
            for (Eigen::Index c = 0; c < t.value.cols(); ++c) {
                const float v = static_cast<float>(t.value(r, c));
                uint32_t bits;
                std::memcpy(&bits, &v, 4);
                for (int k = 0; k < 4; ++k)
                    bytes.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
            }
    });
    return crc32_bytes(bytes.data(), bytes.size());
}

}  // namespace uniret
