#include "uniret/corpus.hpp"
#include "uniret/lexicon.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

using namespace uniret;

namespace {

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("vocab specials occupy the first four ids") {
    Vocab v;
    REQUIRE(v.size() == 4);
    REQUIRE(v.word_of(kPadId) == "<pad>");
    REQUIRE(v.word_of(kUnkId) == "<unk>");
    REQUIRE(v.word_of(kBosId) == "<bos>");
    REQUIRE(v.word_of(kEosId) == "<eos>");
}

TEST_CASE("build_vocab applies min_count and assigns the first free id") {
    Vocab v = build_vocab({{"dog", "dog", "cat"}}, 2);
    REQUIRE(v.size() == 5);
    REQUIRE(v.id_of("dog") == 4);
    REQUIRE(v.id_of("cat") == kUnkId);
}

TEST_CASE("build_vocab is deterministic") {
    std::vector<std::vector<std::string>> corpus = {{"a"}};
    Vocab v1 = build_vocab(corpus, 1);
    Vocab v2 = build_vocab(corpus, 1);
    REQUIRE(v1 == v2);

    auto dir = fresh_dir("uniret_vocab_det");
    write_vocab(v1, (dir / "v1.tsv").string());
    write_vocab(v2, (dir / "v2.tsv").string());
    REQUIRE(read_bytes((dir / "v1.tsv").string()) == read_bytes((dir / "v2.tsv").string()));
}

TEST_CASE("build_vocab orders words by count desc then word asc") {
    Vocab v = build_vocab({{"b", "b", "a", "a", "c"}}, 1);
    REQUIRE(v.word_of(4) == "a");
    REQUIRE(v.word_of(5) == "b");
    REQUIRE(v.word_of(6) == "c");
}

TEST_CASE("build_vocab rejects an empty corpus") {
    REQUIRE_THROWS_WITH(build_vocab({}, 1), "empty corpus");
}

TEST_CASE("generated caption words round-trip through the vocab") {
    std::vector<std::vector<std::string>> captions;
    Rng rng(17);
    for (int i = 0; i < 50; ++i) {
        const SceneSpec spec = decode_scene(static_cast<int>(rng.below(kNumScenes)));
        captions.push_back(generate_caption(spec, make_language(static_cast<int>(rng.below(3)))));
    }
    Vocab v = build_vocab(captions, 1);
    for (const auto& caption : captions)
        for (const auto& w : caption) REQUIRE(v.word_of(v.id_of(w)) == w);
}

TEST_CASE("tokenize wraps ids in BOS/EOS and maps OOV to UNK") {
    Vocab v = build_vocab({{"dog", "dog", "cat"}}, 2);
    REQUIRE(tokenize({"dog"}, v, kCaptionTMaxDefault).ids == std::vector<int>{2, 4, 3});
    REQUIRE(tokenize({"zebra"}, v, kCaptionTMaxDefault).ids == std::vector<int>{2, 1, 3});
}

TEST_CASE("tokenize rejects over-length input instead of truncating") {
    Vocab v = build_vocab({{"dog"}}, 1);
    std::vector<std::string> text(kCaptionTMaxDefault - 1, "dog");
    REQUIRE_THROWS_WITH(tokenize(text, v, kCaptionTMaxDefault), "sequence too long");
    REQUIRE(tokenize(std::vector<std::string>(kCaptionTMaxDefault - 2, "dog"), v,
                     kCaptionTMaxDefault)
                .size() == kCaptionTMaxDefault);
}

TEST_CASE("detokenize strips specials") {
    Vocab v = build_vocab({{"dog", "dog", "cat"}}, 2);
    REQUIRE(detokenize(TokenSeq{{2, 4, 3}}, v) == std::vector<std::string>{"dog"});
    REQUIRE(detokenize(TokenSeq{{2, 3}}, v).empty());
}

TEST_CASE("tokenize then detokenize is the identity on in-vocab text") {
    std::vector<std::vector<std::string>> captions;
    Rng rng(23);
    for (int i = 0; i < 1000; ++i) {
        const SceneSpec spec = decode_scene(static_cast<int>(rng.below(kNumScenes)));
        captions.push_back(generate_caption(spec, make_language(static_cast<int>(rng.below(4)))));
    }
    Vocab v = build_vocab(captions, 1);
    for (const auto& caption : captions)
        REQUIRE(detokenize(tokenize(caption, v, kCaptionTMaxDefault), v) == caption);
}

TEST_CASE("surface_map is the identity for lang00") {
    REQUIRE(surface_map("dog", make_language(0)) == "dog");
    REQUIRE(surface_map("circle", make_language(0)) == "circle");
}

TEST_CASE("surface_map is deterministic per language") {
    const LanguageTag lang = make_language(1);
    REQUIRE(surface_map("circle", lang) == surface_map("circle", lang));
    REQUIRE_THROWS_WITH(surface_map("dog", lang), "unknown base word: dog");
}

TEST_CASE("surface vocabularies of distinct languages are disjoint") {
    const auto& words = base_wordlist();
    std::set<std::string> seen;
    for (int k = 1; k <= 4; ++k) {
        const LanguageTag lang = make_language(k);
        std::set<std::string> forms;
        for (const auto& w : words) forms.insert(surface_map(w, lang));
        REQUIRE(forms.size() == words.size());  // injective per language
        for (const auto& f : forms) REQUIRE(seen.count(f) == 0);
        seen.insert(forms.begin(), forms.end());
    }
    // no collision with base forms either
    for (const auto& w : words) REQUIRE(seen.count(w) == 0);
}

TEST_CASE("vocab file round-trips and stays sorted by id") {
    std::vector<std::vector<std::string>> captions;
    for (int id = 0; id < 60; ++id) captions.push_back(generate_caption(decode_scene(id), make_language(1)));
    Vocab v = build_vocab(captions, 1);

    auto dir = fresh_dir("uniret_vocab_io");
    const std::string path = (dir / "vocab.tsv").string();
    write_vocab(v, path);
    REQUIRE(read_vocab(path) == v);

    // Every line is "word<TAB>id" with ids ascending from 0.
    std::ifstream in(path, std::ios::binary);
    std::string line;
    int expect = 0;
    while (std::getline(in, line)) {
        auto tab = line.find('\t');
        REQUIRE(tab != std::string::npos);
        REQUIRE(std::stoi(line.substr(tab + 1)) == expect++);
    }
    REQUIRE(expect == v.size());
}

TEST_CASE("read_vocab rejects malformed files") {
    auto dir = fresh_dir("uniret_vocab_bad");
    {
        std::ofstream out(dir / "gap.tsv", std::ios::binary);
        out << "<pad>\t0\n<unk>\t1\n<bos>\t2\n<eos>\t3\nword\t5\n";
    }
    REQUIRE_THROWS(read_vocab((dir / "gap.tsv").string()));
    {
        std::ofstream out(dir / "notab.tsv", std::ios::binary);
        out << "<pad> 0\n";
    }
    REQUIRE_THROWS(read_vocab((dir / "notab.tsv").string()));
    REQUIRE_THROWS(read_vocab((dir / "missing.tsv").string()));
}
