#pragma once

#include "uniret/common.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace uniret {

// Special token ids shared by every sequence.
constexpr int kPadId = 0;
constexpr int kUnkId = 1;
constexpr int kBosId = 2;
constexpr int kEosId = 3;
constexpr int kNumSpecials = 4;

constexpr int kCaptionTMaxDefault = 24;
constexpr int kChunkTMaxDefault = 96;

struct LanguageTag {
    int index = 0;
    std::string name;  // "lang00", "lang01", ...
};

inline LanguageTag make_language(int index) {
    if (index < 0 || index > 99) throw std::invalid_argument("language index out of range");
    char buf[16];
    std::snprintf(buf, sizeof(buf), "lang%02d", index);
    return LanguageTag{index, buf};
}

struct TokenSeq {
    std::vector<int> ids;
    int size() const { return static_cast<int>(ids.size()); }
};

class Vocab {
public:
    Vocab() {
        for (const char* w : {"<pad>", "<unk>", "<bos>", "<eos>"}) add_word(w);
    }

    int id_of(const std::string& word) const {
        auto it = word_to_id_.find(word);
        return it == word_to_id_.end() ? kUnkId : it->second;
    }

    bool contains(const std::string& word) const { return word_to_id_.count(word) > 0; }

    const std::string& word_of(int id) const {
        if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
        return id_to_word_[static_cast<size_t>(id)];
    }

    int size() const { return static_cast<int>(id_to_word_.size()); }

    void add_word(const std::string& word) {
        if (word_to_id_.count(word)) return;
        word_to_id_.emplace(word, size());
        id_to_word_.push_back(word);
    }

    bool operator==(const Vocab& other) const { return id_to_word_ == other.id_to_word_; }

private:
    std::unordered_map<std::string, int> word_to_id_;
    std::vector<std::string> id_to_word_;
};

// Words inserted after the specials, sorted by (count desc, word asc), so the
// mapping is a pure function of (corpus, min_count).
inline Vocab build_vocab(const std::vector<std::vector<std::string>>& corpus, int min_count) {
    if (corpus.empty()) throw std::invalid_argument("empty corpus");
    if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
    std::map<std::string, int64_t> counts;
    for (const auto& text : corpus)
        for (const auto& w : text) counts[w] += 1;
    std::vector<std::pair<std::string, int64_t>> kept;
    for (const auto& [w, c] : counts)
        if (c >= min_count) kept.emplace_back(w, c);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocab vocab;
    for (const auto& [w, c] : kept) vocab.add_word(w);
    return vocab;
}

inline TokenSeq tokenize(const std::vector<std::string>& text, const Vocab& vocab, int t_max) {
    if (static_cast<int>(text.size()) > t_max - 2) throw std::invalid_argument("sequence too long");
    TokenSeq seq;
    seq.ids.reserve(text.size() + 2);
    seq.ids.push_back(kBosId);
    for (const auto& w : text) seq.ids.push_back(vocab.id_of(w));
    seq.ids.push_back(kEosId);
    return seq;
}

inline std::vector<std::string> detokenize(const TokenSeq& seq, const Vocab& vocab) {
    std::vector<std::string> words;
    for (int id : seq.ids) {
        if (id < kNumSpecials) continue;
        words.push_back(vocab.word_of(id));
    }
    return words;
}

// ---------------------------------------------------------------------------
// Base wordlist and pseudo-language surface mapping.
//
// Every word the corpus generator can ever emit (in the base language) lives
// here. lang00 is the identity; lang k >= 1 re-lexifies via a seeded
// permutation of this list, suffixed with the language name, so surface
// vocabularies of distinct languages are disjoint by construction.
// ---------------------------------------------------------------------------

constexpr uint64_t kSurfaceSeed = 0x5eedf00dULL;

inline const std::vector<std::string>& base_wordlist() {
    static const std::vector<std::string> words = [] {
        std::vector<std::string> w = {
            // scene attributes
            "circle", "square", "triangle", "cross",
            "red", "blue", "green", "yellow", "purple", "orange",
            "one", "two", "three",
            "top-left", "top-right", "bottom-left", "bottom-right", "center",
            "today", "last", "week", "month", "year",
            // caption / query connectors
            "at", "from", "taken", "of",
            // query prefixes
            "please", "find", "help", "me", "show", "a", "photo", "picture",
            "i", "want", "document", "about", "with", "search", "notes",
            "for", "look", "up", "text", "mentioning",
            // chitchat
            "hello", "there", "how", "are", "you", "good", "morning",
            "friend", "thank", "very", "much", "what", "nice", "day",
            "see", "later", "have",
            // chunk filler
            "the", "report", "was", "filed", "on", "time", "nothing",
            "else", "happened", "here", "weather", "stayed", "calm",
            "all", "meeting", "ended", "without", "any", "delay",
            "someone", "left", "note", "desk", "archive", "kept",
            "its", "usual", "order", "quiet", "afternoon", "passed",
            "slowly", "system", "ran", "smoothly", "that", "list",
            "remained", "unchanged", "since", "review",
        };
        std::sort(w.begin(), w.end());
        w.erase(std::unique(w.begin(), w.end()), w.end());
        return w;
    }();
    return words;
}

namespace detail {

inline const std::unordered_map<std::string, int>& base_word_index() {
    static const std::unordered_map<std::string, int> index = [] {
        std::unordered_map<std::string, int> m;
        const auto& words = base_wordlist();
        for (int i = 0; i < static_cast<int>(words.size()); ++i) m.emplace(words[i], i);
        return m;
    }();
    return index;
}

inline const std::vector<int>& surface_permutation(int lang_index) {
    static std::vector<std::vector<int>> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    if (lang_index >= static_cast<int>(cache.size())) cache.resize(lang_index + 1);
    auto& perm = cache[static_cast<size_t>(lang_index)];
    if (perm.empty()) {
        const size_t n = base_wordlist().size();
        perm.resize(n);
        for (size_t i = 0; i < n; ++i) perm[i] = static_cast<int>(i);
        Rng rng(mix_seed({kSurfaceSeed, static_cast<uint64_t>(lang_index)}));
        rng.shuffle(perm);
    }
    return perm;
}

}  // namespace detail

inline std::string surface_map(const std::string& word, const LanguageTag& lang) {
    if (lang.index == 0) return word;  // identity language passes any word through
    const auto& index = detail::base_word_index();
    auto it = index.find(word);
    if (it == index.end()) throw std::invalid_argument("unknown base word: " + word);
    const auto& perm = detail::surface_permutation(lang.index);
    return base_wordlist()[static_cast<size_t>(perm[static_cast<size_t>(it->second)])] + "_" + lang.name;
}

inline std::vector<std::string> surface_map_all(const std::vector<std::string>& words,
                                                const LanguageTag& lang) {
    std::vector<std::string> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(surface_map(w, lang));
    return out;
}

// ---------------------------------------------------------------------------
// Vocab file: one "word<TAB>id" line per entry, sorted by id, LF endings.
// ---------------------------------------------------------------------------

inline void write_vocab(const Vocab& vocab, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write vocab file: " + path);
    for (int id = 0; id < vocab.size(); ++id) out << vocab.word_of(id) << '\t' << id << '\n';
    if (!out) throw std::runtime_error("vocab write failed: " + path);
}

inline Vocab read_vocab(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read vocab file: " + path);
    Vocab vocab;
    std::string line;
    int expected = 0;
    while (std::getline(in, line)) {
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw std::runtime_error("malformed vocab line: " + line);
        std::string word = line.substr(0, tab);
        int id = std::stoi(line.substr(tab + 1));
        if (id != expected) throw std::runtime_error("vocab ids not contiguous in " + path);
        if (id >= kNumSpecials) vocab.add_word(word);
        ++expected;
    }
    if (expected < kNumSpecials || vocab.size() != expected)
        throw std::runtime_error("vocab size mismatch in " + path);
    return vocab;
}

}  // namespace uniret
