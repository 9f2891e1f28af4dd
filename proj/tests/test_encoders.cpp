#include "uniret/encoders.hpp"

#include "gradcheck.hpp"
#include "uniret/model.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace uniret;
using testutil::check_gradients;
using testutil::check_param_gradients;
using testutil::random_mat;
using testutil::weighted;
using Catch::Matchers::WithinAbs;

namespace {

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

TokenSeq three_tokens() {
    TokenSeq seq;
    seq.ids = {kBosId, 7, kEosId};
    return seq;
}

}  // namespace

TEST_CASE("initialisation invariants") {
    ModelConfig cfg;
    cfg.vocab_size = 40;
    auto [text, image] = init_params<float>(cfg, 0);

    SECTION("every value is below one in magnitude") {
        auto scan = [](auto& params) {
            double mx = 0;
            params.visit([&](const Tensor<float>& t) {
                mx = std::max(mx, static_cast<double>(t.value.array().abs().maxCoeff()));
            });
            return mx;
        };
        REQUIRE(scan(text) < 1.0);
        REQUIRE(scan(image) < 1.0);
    }
    SECTION("shapes follow the config") {
        REQUIRE(text.tok_emb.value.rows() == 40);
        REQUIRE(text.tok_emb.value.cols() == cfg.d_model);
        REQUIRE(text.pos_emb.value.rows() == cfg.text_t_max);
        REQUIRE(text.stack.blocks.size() == static_cast<size_t>(cfg.n_layer));
        REQUIRE(text.proj_w.value.rows() == cfg.d_model);
        REQUIRE(text.proj_w.value.cols() == cfg.d_emb);
        REQUIRE(image.patch_w.value.rows() == kPatchDim);
        REQUIRE(image.pos_emb.value.rows() == kNumPatches);
    }
    SECTION("layer norm gains start at zero (scale = 1 + gain)") {
        REQUIRE(text.stack.blocks[0].ln1_g.value.isZero());
        REQUIRE(text.stack.ln_f_g.value.isZero());
    }
    SECTION("same seed reproduces, different seed differs") {
        auto again = init_text_encoder<float>(cfg, 0);
        REQUIRE(again.tok_emb.value == text.tok_emb.value);
        auto other = init_text_encoder<float>(cfg, 1);
        REQUIRE(other.tok_emb.value != text.tok_emb.value);
    }
    SECTION("bad configs are rejected") {
        ModelConfig bad = cfg;
        bad.vocab_size = 0;
        REQUIRE_THROWS(init_text_encoder<float>(bad, 0));
        bad = cfg;
        bad.n_head = 5;  // does not divide d_model = 64
        REQUIRE_THROWS(init_text_encoder<float>(bad, 0));
    }
}

TEST_CASE("text encoder forward contract") {
    const ModelConfig cfg = tiny_config();
    const auto params = init_text_encoder<double>(cfg, 1);
    const TokenSeq seq = three_tokens();

    SECTION("embedding is a unit row and deterministic") {
        const Matd e1 = embed_text(params, seq);
        REQUIRE(e1.rows() == 1);
        REQUIRE(e1.cols() == cfg.d_emb);
        REQUIRE_THAT(e1.norm(), WithinAbs(1.0, 1e-12));
        REQUIRE(embed_text(params, seq) == e1);
    }
    SECTION("different sequences embed differently") {
        TokenSeq other;
        other.ids = {kBosId, 6, kEosId};
        REQUIRE(embed_text(params, other) != embed_text(params, seq));
    }
    SECTION("input validation") {
        Tape<double> t;
        Binder<double> bind(t, [](const std::string&) { return false; });
        TokenSeq empty;
        REQUIRE_THROWS(encode_text(bind, params, empty));
        TokenSeq oor;
        oor.ids = {kBosId, 12, kEosId};
        REQUIRE_THROWS(encode_text(bind, params, oor));
        TokenSeq long_seq;
        long_seq.ids.assign(9, kPadId);  // exceeds text_t_max = 8
        REQUIRE_THROWS(encode_text(bind, params, long_seq));
    }
    SECTION("fused override replaces the input embeddings") {
        Tape<double> t;
        Binder<double> bind(t, [](const std::string&) { return false; });
        const int plain_input = text_input_embeddings(bind, params, seq);
        const int via_override = encode_text(bind, params, seq, plain_input);
        const int plain = encode_text(bind, params, seq);
        REQUIRE(t.value(via_override) == t.value(plain));

        const int short_input = t.constant(random_mat(2, cfg.d_model, 5));
        REQUIRE_THROWS(encode_text(bind, params, seq, short_input));
        const int wide_input = t.constant(random_mat(3, cfg.d_model + 1, 6));
        REQUIRE_THROWS(encode_text(bind, params, seq, wide_input));
    }
}

TEST_CASE("image patch extraction") {
    ImageGrid img;
    img.pixels.resize(static_cast<size_t>(kImageSize * kImageSize * kImageChannels));
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            for (int c = 0; c < kImageChannels; ++c)
                img.at(y, x, c) = static_cast<float>((y * kImageSize + x) * 3 + c);

    const Matd patches = image_to_patches<double>(img);
    REQUIRE(patches.rows() == kNumPatches);
    REQUIRE(patches.cols() == kPatchDim);
    // Patch row py*8+px holds pixel (py*4+dy, px*4+dx, c) at column (dy*4+dx)*3+c.
    const int py = 3, px = 5, dy = 2, dx = 1, c = 2;
    const double expect = ((py * 4 + dy) * kImageSize + (px * 4 + dx)) * 3 + c;
    REQUIRE(patches(py * 8 + px, (dy * 4 + dx) * 3 + c) == expect);

    img.at(0, 0, 0) = std::numeric_limits<float>::quiet_NaN();
    REQUIRE_THROWS(image_to_patches<double>(img));
}

TEST_CASE("image encoder forward contract") {
    ModelConfig cfg = tiny_config();
    const auto params = init_image_encoder<double>(cfg, 2);
    const ImageGrid img = render_image(decode_scene(100), 0);

    const Matd e = embed_image(params, img);
    REQUIRE(e.rows() == 1);
    REQUIRE(e.cols() == cfg.d_emb);
    REQUIRE_THAT(e.norm(), WithinAbs(1.0, 1e-12));
    REQUIRE(embed_image(params, img) == e);
    // scene 101 shares scene 100's visual class (time differs): same pixels
    REQUIRE(render_image(decode_scene(101), 0).pixels == img.pixels);
    REQUIRE(embed_image(params, render_image(decode_scene(104), 0)) != e);
}

TEST_CASE("text encoder gradients match finite differences") {
    const ModelConfig cfg = tiny_config();
    auto params = init_text_encoder<double>(cfg, 3);
    const TokenSeq seq = three_tokens();
    check_param_gradients(params, [&](Binder<double>& bind) {
        return weighted(bind.tape(), encode_text(bind, params, seq), 21);
    });
}

TEST_CASE("image encoder gradients match finite differences") {
    const ModelConfig cfg = tiny_config();
    auto params = init_image_encoder<double>(cfg, 4);
    const ImageGrid img = render_image(decode_scene(7), 0);
    check_param_gradients(params, [&](Binder<double>& bind) {
        return weighted(bind.tape(), encode_image(bind, params, img), 22);
    });
}

TEST_CASE("input gradients flow through a frozen text encoder") {
    const ModelConfig cfg = tiny_config();
    const auto params = init_text_encoder<double>(cfg, 5);
    check_gradients(
        {random_mat(3, cfg.d_model, 23)},
        [&](Tape<double>& t, const std::vector<int>& v) {
            Binder<double> bind(t, [](const std::string&) { return false; });
            return weighted(t, encode_text_from(bind, params, v[0]), 24);
        },
        1e-4);
}
