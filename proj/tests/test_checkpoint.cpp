#include "uniret/checkpoint.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

using namespace uniret;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("uniret_ckpt_" + tag + "_" +
                                            std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_layer = 1;
    cfg.n_head = 2;
    cfg.d_emb = 8;
    cfg.vocab_size = 12;
    cfg.text_t_max = 8;
    return cfg;
}

bool bundles_equal(const ModelBundle<float>& a, const ModelBundle<float>& b) {
    bool equal = true;
    std::vector<const Tensor<float>*> ta, tb;
    a.visit([&](const Tensor<float>& t) { ta.push_back(&t); });
    b.visit([&](const Tensor<float>& t) { tb.push_back(&t); });
    if (ta.size() != tb.size()) return false;
    for (size_t i = 0; i < ta.size(); ++i)
        equal = equal && ta[i]->name == tb[i]->name && ta[i]->value == tb[i]->value;
    return equal;
}

}  // namespace

TEST_CASE("bundle checkpoint round trip is bitwise") {
    TempDir dir("bundle");
    ModelBundle<float> bundle = init_bundle<float>(tiny_config(), 42);
    bundle.vocab_crc = 0xdeadbeef;
    save_bundle(bundle, dir.str());

    const ModelBundle<float> back = load_bundle<float>(dir.str());
    REQUIRE(bundles_equal(bundle, back));
    REQUIRE(back.vocab_crc == 0xdeadbeef);
    REQUIRE(back.config.d_model == 8);
    REQUIRE(back.config.vocab_size == 12);

    SECTION("manifest lists the parameter groups") {
        std::ifstream mf(dir.str() + "/manifest.json");
        const nlohmann::json manifest = nlohmann::json::parse(mf);
        REQUIRE(manifest.at("format_version").get<int>() == kCheckpointFormatVersion);
        const auto groups = manifest.at("groups").get<std::vector<std::string>>();
        REQUIRE(groups == model_groups());
    }
}

TEST_CASE("corruption and malformed checkpoints are rejected") {
    TempDir dir("corrupt");
    const ModelBundle<float> bundle = init_bundle<float>(tiny_config(), 7);
    save_bundle(bundle, dir.str());

    SECTION("flipped payload byte fails the per-tensor checksum") {
        const std::string blob = dir.str() + "/params.f32";
        std::fstream f(blob, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(100);
        char byte;
        f.seekg(100);
        f.read(&byte, 1);
        byte = static_cast<char>(byte ^ 0x40);
        f.seekp(100);
        f.write(&byte, 1);
        f.close();
        REQUIRE_THROWS_WITH(load_bundle<float>(dir.str()),
                            Catch::Matchers::ContainsSubstring("checksum"));
    }
    SECTION("truncated blob") {
        fs::resize_file(dir.str() + "/params.f32", 64);
        REQUIRE_THROWS(load_bundle<float>(dir.str()));
    }
    SECTION("format version mismatch") {
        std::ifstream mf(dir.str() + "/manifest.json");
        nlohmann::json manifest = nlohmann::json::parse(mf);
        mf.close();
        manifest["format_version"] = kCheckpointFormatVersion + 1;
        std::ofstream out(dir.str() + "/manifest.json");
        out << manifest.dump(2);
        out.close();
        REQUIRE_THROWS_WITH(load_bundle<float>(dir.str()),
                            Catch::Matchers::ContainsSubstring("version"));
    }
    SECTION("missing tensor entry") {
        std::ifstream mf(dir.str() + "/manifest.json");
        nlohmann::json manifest = nlohmann::json::parse(mf);
        mf.close();
        manifest["tensors"].erase(manifest["tensors"].size() - 1);
        std::ofstream out(dir.str() + "/manifest.json");
        out << manifest.dump(2);
        out.close();
        REQUIRE_THROWS_WITH(load_bundle<float>(dir.str()),
                            Catch::Matchers::ContainsSubstring("missing tensor"));
    }
    SECTION("absent directory") {
        REQUIRE_THROWS(load_bundle<float>(dir.str() + "/nope"));
    }
}

TEST_CASE("blob format is little-endian float32 regardless of host") {
    TempDir dir("endian");
    // 1.0f = 0x3F800000, -2.5f = 0xC0200000, little-endian byte order.
    const unsigned char bytes[8] = {0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x20, 0xC0};
    const std::string blob = dir.str() + "/params.f32";
    std::ofstream out(blob, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes), 8);
    out.close();

    nlohmann::json entries = nlohmann::json::array();
    entries.push_back({{"name", "w"},
                       {"rows", 1},
                       {"cols", 2},
                       {"offset", 0},
                       {"crc32", crc32_bytes(bytes, 8)}});
    const auto values = detail::read_tensor_blob<float>(entries, blob);
    REQUIRE(values.at("w")(0, 0) == 1.0f);
    REQUIRE(values.at("w")(0, 1) == -2.5f);

    // And writing produces exactly those bytes back.
    const Tensor<float> t{"w", values.at("w")};
    const std::string blob2 = dir.str() + "/rewrite.f32";
    detail::write_tensor_blob<float>({&t}, blob2);
    std::ifstream in(blob2, std::ios::binary);
    unsigned char round[8];
    in.read(reinterpret_cast<char*>(round), 8);
    REQUIRE(std::equal(bytes, bytes + 8, round));
}

TEST_CASE("optimizer state round trip") {
    TempDir dir("optim");
    AdamW<float> opt;
    Tensor<float> a{"text.proj_w", Matf::Constant(2, 3, 0.5f)};
    Tensor<float> b{"nlu.slot_w", Matf::Constant(1, 4, -0.25f)};
    const Matf ga = Matf::Constant(2, 3, 0.1f), gb = Matf::Constant(1, 4, -0.2f);
    opt.step({{&a, &ga}, {&b, &gb}}, 1e-3f);
    opt.step({{&a, &ga}}, 1e-3f);

    save_optim(opt, dir.str());
    AdamW<float> back;
    load_optim(dir.str(), back);
    REQUIRE(back.step_count() == 2);
    REQUIRE(back.state().size() == 2);
    REQUIRE(back.state().at("text.proj_w").m == opt.state().at("text.proj_w").m);
    REQUIRE(back.state().at("text.proj_w").v == opt.state().at("text.proj_w").v);
    REQUIRE(back.state().at("nlu.slot_w").m == opt.state().at("nlu.slot_w").m);

    // Continued steps agree bitwise between original and restored optimizer.
    Tensor<float> a2 = a;
    opt.step({{&a, &ga}}, 2e-3f);
    back.step({{&a2, &ga}}, 2e-3f);
    REQUIRE(a.value == a2.value);
}

TEST_CASE("combined checkpoint saves model and optimizer together") {
    TempDir dir("full");
    ModelBundle<float> bundle = init_bundle<float>(tiny_config(), 3);
    AdamW<float> opt;
    const Matf g = Matf::Constant(1, 1, 0.5f);
    opt.step({{&bundle.log_tau, &g}}, 1e-3f);
    save_checkpoint(bundle, opt, dir.str());

    auto [bundle2, opt2] = load_checkpoint<float>(dir.str());
    REQUIRE(bundles_equal(bundle, bundle2));
    REQUIRE(opt2.step_count() == 1);
    REQUIRE(opt2.state().at("temperature.log_tau").m == opt.state().at("temperature.log_tau").m);
}

TEST_CASE("group checksums isolate parameter groups") {
    ModelBundle<float> bundle = init_bundle<float>(tiny_config(), 9);
    const uint32_t text0 = group_checksum(bundle, "text");
    const uint32_t image0 = group_checksum(bundle, "image");
    const uint32_t nlu0 = group_checksum(bundle, "nlu");

    bundle.nlu.intent_b.value(0, 0) += 1.0f;
    REQUIRE(group_checksum(bundle, "text") == text0);
    REQUIRE(group_checksum(bundle, "image") == image0);
    REQUIRE(group_checksum(bundle, "nlu") != nlu0);

    bundle.text.proj_b.value(0, 0) += 1.0f;
    REQUIRE(group_checksum(bundle, "text") != text0);

    const uint32_t temp0 = group_checksum(bundle, "temperature");
    bundle.log_tau.value(0, 0) += 0.5f;
    REQUIRE(group_checksum(bundle, "temperature") != temp0);
}

TEST_CASE("vocab crc tracks content") {
    std::vector<std::vector<std::string>> texts = {{"red", "circle"}, {"blue", "square"}};
    const Vocab v1 = build_vocab(texts, 1);
    const Vocab v2 = build_vocab(texts, 1);
    REQUIRE(vocab_crc32(v1) == vocab_crc32(v2));

    texts.push_back({"green"});
    const Vocab v3 = build_vocab(texts, 1);
    REQUIRE(vocab_crc32(v1) != vocab_crc32(v3));
}
