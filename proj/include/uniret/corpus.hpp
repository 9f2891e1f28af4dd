#pragma once

#include "uniret/common.hpp"
#include "uniret/lexicon.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace uniret {

// ---------------------------------------------------------------------------
// Scenes. scene_id is a mixed-radix number over (shape, color, count,
// position, time_tag) with radices 4*6*3*5*4 = 1440; time_tag is the least
// significant digit, so scene_id / 4 is the visual class.
// ---------------------------------------------------------------------------

constexpr int kNumShapes = 4;
constexpr int kNumColors = 6;
constexpr int kNumCounts = 3;
constexpr int kNumPositions = 5;
constexpr int kNumTimeTags = 4;
constexpr int kNumScenes = kNumShapes * kNumColors * kNumCounts * kNumPositions * kNumTimeTags;
constexpr int kNumVisualClasses = kNumScenes / kNumTimeTags;

constexpr int kImageSize = 32;
constexpr int kImageChannels = 3;
constexpr int kPatchSize = 4;
constexpr int kNumPatches = (kImageSize / kPatchSize) * (kImageSize / kPatchSize);
constexpr int kPatchDim = kPatchSize * kPatchSize * kImageChannels;

enum class Shape { Circle, Square, Triangle, Cross };
enum class Position { TopLeft, TopRight, BottomLeft, BottomRight, Center };
enum class TimeTag { Today, LastWeek, LastMonth, LastYear };

struct SceneSpec {
    Shape shape;
    int color;     // 0..5
    int count;     // 1..3
    Position position;
    TimeTag time_tag;
    int scene_id;

    int visual_class() const { return scene_id / kNumTimeTags; }
};

inline SceneSpec decode_scene(int scene_id) {
    if (scene_id < 0 || scene_id >= kNumScenes) throw std::out_of_range("scene_id out of range");
    int v = scene_id;
    const int time = v % kNumTimeTags;
    v /= kNumTimeTags;
    const int pos = v % kNumPositions;
    v /= kNumPositions;
    const int count = v % kNumCounts;
    v /= kNumCounts;
    const int color = v % kNumColors;
    v /= kNumColors;
    return SceneSpec{static_cast<Shape>(v), color, count + 1, static_cast<Position>(pos),
                     static_cast<TimeTag>(time), scene_id};
}

inline const char* shape_word(Shape s) {
    switch (s) {
        case Shape::Circle: return "circle";
        case Shape::Square: return "square";
        case Shape::Triangle: return "triangle";
        case Shape::Cross: return "cross";
    }
    throw std::logic_error("bad shape");
}

inline const char* color_word(int c) {
    static constexpr const char* names[kNumColors] = {"red",    "blue",   "green",
                                                      "yellow", "purple", "orange"};
    if (c < 0 || c >= kNumColors) throw std::out_of_range("color out of range");
    return names[c];
}

inline const char* count_word(int n) {
    static constexpr const char* names[kNumCounts] = {"one", "two", "three"};
    if (n < 1 || n > kNumCounts) throw std::out_of_range("count out of range");
    return names[n - 1];
}

inline const char* position_word(Position p) {
    switch (p) {
        case Position::TopLeft: return "top-left";
        case Position::TopRight: return "top-right";
        case Position::BottomLeft: return "bottom-left";
        case Position::BottomRight: return "bottom-right";
        case Position::Center: return "center";
    }
    throw std::logic_error("bad position");
}

inline std::vector<std::string> time_words(TimeTag t) {
    switch (t) {
        case TimeTag::Today: return {"today"};
        case TimeTag::LastWeek: return {"last", "week"};
        case TimeTag::LastMonth: return {"last", "month"};
        case TimeTag::LastYear: return {"last", "year"};
    }
    throw std::logic_error("bad time tag");
}

// ---------------------------------------------------------------------------
// Images: H x W x C float grid in [0,1], shapes over a seeded noise floor.
// ---------------------------------------------------------------------------

struct ImageGrid {
    // Row-major (y, x, c).
    std::vector<float> pixels;

    float at(int y, int x, int c) const {
        return pixels[static_cast<size_t>((y * kImageSize + x) * kImageChannels + c)];
    }
    float& at(int y, int x, int c) {
        return pixels[static_cast<size_t>((y * kImageSize + x) * kImageChannels + c)];
    }
};

namespace detail {

inline std::array<float, 3> color_rgb(int color) {
    static constexpr std::array<std::array<float, 3>, kNumColors> rgb = {{
        {1.0f, 0.1f, 0.1f},   // red
        {0.1f, 0.2f, 1.0f},   // blue
        {0.1f, 0.9f, 0.2f},   // green
        {0.95f, 0.9f, 0.1f},  // yellow
        {0.7f, 0.1f, 0.9f},   // purple
        {1.0f, 0.55f, 0.1f},  // orange
    }};
    return rgb[static_cast<size_t>(color)];
}

// Cell origin (y, x) of the 16x16 region for a position.
inline std::pair<int, int> cell_origin(Position p) {
    switch (p) {
        case Position::TopLeft: return {0, 0};
        case Position::TopRight: return {0, 16};
        case Position::BottomLeft: return {16, 0};
        case Position::BottomRight: return {16, 16};
        case Position::Center: return {8, 8};
    }
    throw std::logic_error("bad position");
}

// Shape centers inside a cell for count 1..3; shapes are 7px wide so every
// center stays >= 3px from the cell border.
inline std::vector<std::pair<int, int>> placement_offsets(int count) {
    switch (count) {
        case 1: return {{8, 8}};
        case 2: return {{4, 4}, {12, 12}};
        case 3: return {{4, 4}, {12, 4}, {8, 12}};
    }
    throw std::out_of_range("count out of range");
}

inline bool shape_mask(Shape s, int dy, int dx) {
    switch (s) {
        case Shape::Circle:
            return dy * dy + dx * dx <= 9;  // radius 3
        case Shape::Square:
            return std::abs(dy) <= 3 && std::abs(dx) <= 3;
        case Shape::Triangle:
            // apex up, base at dy = +3
            return dy >= -3 && dy <= 3 && std::abs(dx) * 5 <= (dy + 3) * 3;
        case Shape::Cross:
            return (std::abs(dy) <= 1 && std::abs(dx) <= 3) ||
                   (std::abs(dx) <= 1 && std::abs(dy) <= 3);
    }
    throw std::logic_error("bad shape");
}

}  // namespace detail

inline ImageGrid render_image(const SceneSpec& spec, uint64_t render_seed) {
    ImageGrid img;
    img.pixels.resize(static_cast<size_t>(kImageSize * kImageSize * kImageChannels));
    Rng rng(mix_seed({0x1337beefULL, render_seed}));
    for (auto& p : img.pixels) p = static_cast<float>(rng.uniform() * 0.2);

    const auto rgb = detail::color_rgb(spec.color);
    const auto [oy, ox] = detail::cell_origin(spec.position);
    for (const auto& [cy, cx] : detail::placement_offsets(spec.count)) {
        const int y0 = oy + cy;
        const int x0 = ox + cx;
        for (int dy = -3; dy <= 3; ++dy) {
            for (int dx = -3; dx <= 3; ++dx) {
                if (!detail::shape_mask(spec.shape, dy, dx)) continue;
                const int y = y0 + dy;
                const int x = x0 + dx;
                for (int c = 0; c < kImageChannels; ++c) img.at(y, x, c) = rgb[static_cast<size_t>(c)];
            }
        }
    }
    return img;
}

// Fraction of pixel positions where any channel differs.
inline double pixel_difference(const ImageGrid& a, const ImageGrid& b) {
    int differing = 0;
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            for (int c = 0; c < kImageChannels; ++c)
                if (a.at(y, x, c) != b.at(y, x, c)) {
                    ++differing;
                    c = kImageChannels;  // count each pixel once
                }
    return static_cast<double>(differing) / (kImageSize * kImageSize);
}

// ---------------------------------------------------------------------------
// Captions and chunks.
// ---------------------------------------------------------------------------

inline std::vector<std::string> generate_caption(const SceneSpec& spec, const LanguageTag& lang) {
    std::vector<std::string> base = {count_word(spec.count), color_word(spec.color),
                                     shape_word(spec.shape), "at", position_word(spec.position)};
    return surface_map_all(base, lang);
}

namespace detail {

// Scene-agnostic filler; shares no color/shape/count words with captions, so
// no filler subsequence can spell another scene's caption.
inline const std::vector<std::vector<std::string>>& filler_sentences() {
    static const std::vector<std::vector<std::string>> pool = {
        {"the", "report", "was", "filed", "on", "time"},
        {"nothing", "else", "happened", "here"},
        {"the", "weather", "stayed", "calm", "all", "day"},
        {"the", "meeting", "ended", "without", "any", "delay"},
        {"someone", "left", "a", "note", "on", "the", "desk"},
        {"the", "archive", "kept", "its", "usual", "order"},
        {"a", "quiet", "afternoon", "passed", "slowly"},
        {"the", "system", "ran", "smoothly", "all", "week"},
        {"the", "list", "remained", "unchanged", "since", "review"},
        {"nothing", "was", "kept", "for", "that", "day"},
    };
    return pool;
}

}  // namespace detail

inline std::vector<std::string> generate_chunk(const SceneSpec& spec, const LanguageTag& lang,
                                               uint64_t chunk_seed) {
    Rng rng(mix_seed({0xc4a9c4a9ULL, chunk_seed}));
    std::vector<std::string> caption_base = {count_word(spec.count), color_word(spec.color),
                                             shape_word(spec.shape), "at",
                                             position_word(spec.position)};
    std::vector<std::string> time_sentence = {"taken"};
    for (const auto& w : time_words(spec.time_tag)) time_sentence.push_back(w);

    std::vector<std::vector<std::string>> sentences = {caption_base, time_sentence};
    size_t total = caption_base.size() + time_sentence.size();
    const size_t target = 40 + rng.below(33);
    const auto& pool = detail::filler_sentences();
    while (total < target) {
        const auto& s = pool[rng.below(pool.size())];
        sentences.push_back(s);
        total += s.size();
    }
    rng.shuffle(sentences);

    std::vector<std::string> base;
    base.reserve(total);
    for (const auto& s : sentences) base.insert(base.end(), s.begin(), s.end());
    return surface_map_all(base, lang);
}

// ---------------------------------------------------------------------------
// Queries with intent and BIO slots.
// ---------------------------------------------------------------------------

enum class Intent { FindPhoto, FindDocument, Chitchat };
constexpr int kNumIntents = 3;

inline const char* intent_name(Intent i) {
    switch (i) {
        case Intent::FindPhoto: return "find_photo";
        case Intent::FindDocument: return "find_document";
        case Intent::Chitchat: return "chitchat";
    }
    throw std::logic_error("bad intent");
}

inline Intent intent_from_name(const std::string& name) {
    if (name == "find_photo") return Intent::FindPhoto;
    if (name == "find_document") return Intent::FindDocument;
    if (name == "chitchat") return Intent::Chitchat;
    throw std::invalid_argument("unknown intent: " + name);
}

// Slot label space: O plus B-/I- over five slot types.
enum class SlotType { Object, Color, Count, Position, Time };
constexpr int kNumSlotTypes = 5;
constexpr int kNumSlotLabels = 1 + 2 * kNumSlotTypes;
constexpr int kSlotO = 0;

inline int slot_b(SlotType t) { return 1 + 2 * static_cast<int>(t); }
inline int slot_i(SlotType t) { return 2 + 2 * static_cast<int>(t); }

inline std::string slot_label_name(int label) {
    static constexpr const char* types[kNumSlotTypes] = {"OBJECT", "COLOR", "COUNT", "POSITION",
                                                         "TIME"};
    if (label == kSlotO) return "O";
    if (label < 0 || label >= kNumSlotLabels) throw std::out_of_range("slot label out of range");
    const int t = (label - 1) / 2;
    return std::string((label - 1) % 2 == 0 ? "B-" : "I-") + types[t];
}

inline int slot_label_from_name(const std::string& name) {
    for (int l = 0; l < kNumSlotLabels; ++l)
        if (slot_label_name(l) == name) return l;
    throw std::invalid_argument("unknown slot label: " + name);
}

inline bool bio_well_formed(const std::vector<int>& labels) {
    for (size_t j = 0; j < labels.size(); ++j) {
        const int l = labels[j];
        if (l < 0 || l >= kNumSlotLabels) return false;
        if (l != kSlotO && (l - 1) % 2 == 1) {  // I-x
            if (j == 0) return false;
            const int prev = labels[j - 1];
            if (prev != l && prev != l - 1) return false;
        }
    }
    return true;
}

struct AnnotatedQuery {
    std::vector<std::string> tokens;
    LanguageTag lang;
    Intent intent = Intent::Chitchat;
    std::vector<int> slots;  // per-token labels
    std::vector<std::string> semantic_text;
};

namespace detail {

inline const std::vector<std::vector<std::string>>& photo_prefixes() {
    static const std::vector<std::vector<std::string>> pool = {
        {"please", "find"},
        {"please", "help", "me", "find"},
        {"show", "me", "a", "photo", "of"},
        {"find", "picture", "of"},
        {"i", "want", "a", "photo", "of"},
    };
    return pool;
}

inline const std::vector<std::vector<std::string>>& document_prefixes() {
    static const std::vector<std::vector<std::string>> pool = {
        {"find", "document", "about"},
        {"please", "find", "document", "with"},
        {"search", "notes", "for"},
        {"look", "up", "text", "about"},
        {"find", "document", "mentioning"},
    };
    return pool;
}

inline const std::vector<std::vector<std::string>>& time_connectors() {
    static const std::vector<std::vector<std::string>> pool = {{"from"}, {"taken"}, {"of"}};
    return pool;
}

inline const std::vector<std::vector<std::string>>& chitchat_phrases() {
    static const std::vector<std::vector<std::string>> pool = {
        {"hello", "there"},
        {"how", "are", "you"},
        {"good", "morning", "friend"},
        {"thank", "you", "very", "much"},
        {"what", "a", "nice", "day"},
        {"see", "you", "later"},
        {"have", "a", "good", "day"},
    };
    return pool;
}

inline void push_o(std::vector<std::string>& tokens, std::vector<int>& slots,
                   const std::vector<std::string>& words) {
    for (const auto& w : words) {
        tokens.push_back(w);
        slots.push_back(kSlotO);
    }
}

inline void push_slot(std::vector<std::string>& tokens, std::vector<int>& slots,
                      const std::vector<std::string>& words, SlotType type) {
    for (size_t j = 0; j < words.size(); ++j) {
        tokens.push_back(words[j]);
        slots.push_back(j == 0 ? slot_b(type) : slot_i(type));
    }
}

}  // namespace detail

inline AnnotatedQuery generate_query(const SceneSpec& spec, const LanguageTag& lang, Intent intent,
                                     uint64_t noise_seed) {
    AnnotatedQuery q;
    q.lang = lang;
    q.intent = intent;
    std::vector<std::string> base;
    std::vector<int>& slots = q.slots;

    if (intent == Intent::Chitchat) {
        Rng rng(mix_seed({0xc417c417ULL, noise_seed}));
        const auto& pool = detail::chitchat_phrases();
        const size_t first = rng.below(pool.size());
        size_t second = rng.below(pool.size() - 1);
        if (second >= first) ++second;
        detail::push_o(base, slots, pool[first]);
        detail::push_o(base, slots, pool[second]);
    } else {
        // Surface variation indexes the pools directly off the seed so the
        // canonical seed-0 form is stable.
        const auto& prefixes =
            intent == Intent::FindPhoto ? detail::photo_prefixes() : detail::document_prefixes();
        const auto& prefix = prefixes[noise_seed % prefixes.size()];
        const auto& connector =
            detail::time_connectors()[(noise_seed / prefixes.size()) % detail::time_connectors().size()];
        detail::push_o(base, slots, prefix);
        if (intent == Intent::FindDocument) {
            detail::push_slot(base, slots, {count_word(spec.count)}, SlotType::Count);
        }
        detail::push_slot(base, slots, {color_word(spec.color)}, SlotType::Color);
        detail::push_slot(base, slots, {shape_word(spec.shape)}, SlotType::Object);
        if (intent == Intent::FindDocument) {
            detail::push_o(base, slots, {"at"});
            detail::push_slot(base, slots, {position_word(spec.position)}, SlotType::Position);
        }
        detail::push_o(base, slots, connector);
        detail::push_slot(base, slots, time_words(spec.time_tag), SlotType::Time);
    }

    q.tokens = surface_map_all(base, lang);
    for (size_t j = 0; j < q.tokens.size(); ++j)
        if (q.slots[j] != kSlotO) q.semantic_text.push_back(q.tokens[j]);
    return q;
}

inline std::vector<std::string> extract_semantic_text(const AnnotatedQuery& query) {
    if (query.slots.size() != query.tokens.size() || !bio_well_formed(query.slots))
        throw std::invalid_argument("BIO-invalid slot labels");
    std::vector<std::string> out;
    for (size_t j = 0; j < query.tokens.size(); ++j)
        if (query.slots[j] != kSlotO) out.push_back(query.tokens[j]);
    return out;
}

// ---------------------------------------------------------------------------
// Corpus generation.
// ---------------------------------------------------------------------------

struct CorpusRecord {
    int scene_id = 0;
    LanguageTag lang;
    std::vector<std::string> caption;
    std::vector<std::string> chunk;
    AnnotatedQuery query;
    std::string image_ref;

    int visual_class() const { return scene_id / kNumTimeTags; }
};

struct CorpusConfig {
    int languages = 3;
    int train_scenes = 256;
    int val_scenes = 32;
    int test_scenes = 64;
    uint64_t seed = 0;
    int min_count = 1;
    int caption_t_max = kCaptionTMaxDefault;
    int chunk_t_max = kChunkTMaxDefault;
};

struct Dataset {
    CorpusConfig config;
    Vocab vocab;
    std::vector<CorpusRecord> train, val, test;
    std::unordered_map<int, ImageGrid> images;  // scene_id -> pixels

    const std::vector<CorpusRecord>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw std::invalid_argument("unknown split: " + name);
    }
    const ImageGrid& image_of(const CorpusRecord& rec) const {
        auto it = images.find(rec.scene_id);
        if (it == images.end())
            throw std::runtime_error("missing image for scene " + std::to_string(rec.scene_id));
        return it->second;
    }
};

namespace detail {

constexpr uint64_t kSplitSalt = 0x5;
constexpr uint64_t kChunkSalt = 0xc;
constexpr uint64_t kQuerySalt = 0x9;
constexpr uint64_t kIntentSalt = 0x1;
constexpr uint64_t kRenderSalt = 0x7;

inline Intent draw_intent(uint64_t seed, int scene_id, int lang) {
    Rng rng(mix_seed({kIntentSalt, seed, static_cast<uint64_t>(scene_id),
                      static_cast<uint64_t>(lang)}));
    const uint64_t r = rng.below(20);
    if (r < 9) return Intent::FindPhoto;
    if (r < 18) return Intent::FindDocument;
    return Intent::Chitchat;
}

inline CorpusRecord make_record(const CorpusConfig& cfg, int scene_id, int lang_index) {
    const SceneSpec spec = decode_scene(scene_id);
    const LanguageTag lang = make_language(lang_index);
    CorpusRecord rec;
    rec.scene_id = scene_id;
    rec.lang = lang;
    rec.caption = generate_caption(spec, lang);
    rec.chunk = generate_chunk(
        spec, lang,
        mix_seed({kChunkSalt, cfg.seed, static_cast<uint64_t>(scene_id),
                  static_cast<uint64_t>(lang_index)}));
    const Intent intent = draw_intent(cfg.seed, scene_id, lang_index);
    rec.query = generate_query(
        spec, lang, intent,
        mix_seed({kQuerySalt, cfg.seed, static_cast<uint64_t>(scene_id),
                  static_cast<uint64_t>(lang_index)}));
    rec.image_ref = "images/scene_" + std::to_string(scene_id) + ".f32";
    return rec;
}

}  // namespace detail

inline uint64_t render_seed_for(const CorpusConfig& cfg, int scene_id) {
    return mix_seed({detail::kRenderSalt, cfg.seed, static_cast<uint64_t>(scene_id)});
}

// Builds the full dataset in memory. All randomness flows from cfg.seed.
inline Dataset build_dataset(const CorpusConfig& cfg) {
    if (cfg.languages < 1) throw std::invalid_argument("languages must be >= 1");
    if (cfg.train_scenes + cfg.val_scenes + cfg.test_scenes > kNumScenes)
        throw std::invalid_argument("scene budget exceeds " + std::to_string(kNumScenes));
    if (cfg.train_scenes < 1 || cfg.val_scenes < 0 || cfg.test_scenes < 0)
        throw std::invalid_argument("bad split sizes");

    std::vector<int> scene_ids(kNumScenes);
    for (int i = 0; i < kNumScenes; ++i) scene_ids[i] = i;
    Rng rng(mix_seed({detail::kSplitSalt, cfg.seed}));
    rng.shuffle(scene_ids);

    Dataset ds;
    ds.config = cfg;
    auto emit = [&](std::vector<CorpusRecord>& out, int begin, int count) {
        for (int s = begin; s < begin + count; ++s) {
            const int scene_id = scene_ids[static_cast<size_t>(s)];
            if (!ds.images.count(scene_id))
                ds.images.emplace(scene_id,
                                  render_image(decode_scene(scene_id), render_seed_for(cfg, scene_id)));
            for (int l = 0; l < cfg.languages; ++l)
                out.push_back(detail::make_record(cfg, scene_id, l));
        }
    };
    emit(ds.train, 0, cfg.train_scenes);
    emit(ds.val, cfg.train_scenes, cfg.val_scenes);
    emit(ds.test, cfg.train_scenes + cfg.val_scenes, cfg.test_scenes);

    std::vector<std::vector<std::string>> texts;
    for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
        for (const auto& rec : *split) {
            texts.push_back(rec.caption);
            texts.push_back(rec.chunk);
            texts.push_back(rec.query.tokens);
        }
    }
    ds.vocab = build_vocab(texts, cfg.min_count);
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset files: JSONL records, raw little-endian float32 images, vocab.tsv,
// manifest.json.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_le_f32(std::ostream& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                           static_cast<char>((bits >> 16) & 0xff),
                           static_cast<char>((bits >> 24) & 0xff)};
    out.write(bytes, 4);
}

inline float read_le_f32(std::istream& in) {
    unsigned char bytes[4];
    in.read(reinterpret_cast<char*>(bytes), 4);
    const uint32_t bits = static_cast<uint32_t>(bytes[0]) | (static_cast<uint32_t>(bytes[1]) << 8) |
                          (static_cast<uint32_t>(bytes[2]) << 16) |
                          (static_cast<uint32_t>(bytes[3]) << 24);
    float v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

inline nlohmann::json record_to_json(const CorpusRecord& rec) {
    std::vector<std::string> slot_names;
    for (int l : rec.query.slots) slot_names.push_back(slot_label_name(l));
    return nlohmann::json{{"scene_id", rec.scene_id},
                          {"lang", rec.lang.name},
                          {"caption", rec.caption},
                          {"chunk", rec.chunk},
                          {"query_tokens", rec.query.tokens},
                          {"intent", intent_name(rec.query.intent)},
                          {"slots", slot_names},
                          {"semantic_text", rec.query.semantic_text},
                          {"image_ref", rec.image_ref}};
}

inline CorpusRecord record_from_json(const nlohmann::json& j) {
    CorpusRecord rec;
    rec.scene_id = j.at("scene_id").get<int>();
    const std::string lang_name = j.at("lang").get<std::string>();
    rec.lang = make_language(std::stoi(lang_name.substr(4)));
    rec.caption = j.at("caption").get<std::vector<std::string>>();
    rec.chunk = j.at("chunk").get<std::vector<std::string>>();
    rec.query.tokens = j.at("query_tokens").get<std::vector<std::string>>();
    rec.query.lang = rec.lang;
    rec.query.intent = intent_from_name(j.at("intent").get<std::string>());
    for (const auto& s : j.at("slots").get<std::vector<std::string>>())
        rec.query.slots.push_back(slot_label_from_name(s));
    rec.query.semantic_text = j.at("semantic_text").get<std::vector<std::string>>();
    rec.image_ref = j.at("image_ref").get<std::string>();
    return rec;
}

inline void write_records(const std::vector<CorpusRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const auto& rec : records) out << record_to_json(rec).dump() << '\n';
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::vector<CorpusRecord> read_records(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::vector<CorpusRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        records.push_back(record_from_json(nlohmann::json::parse(line)));
    }
    return records;
}

}  // namespace detail

inline void write_image(const ImageGrid& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write image: " + path);
    for (float v : img.pixels) detail::write_le_f32(out, v);
    if (!out) throw std::runtime_error("image write failed: " + path);
}

inline ImageGrid read_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read image: " + path);
    ImageGrid img;
    img.pixels.resize(static_cast<size_t>(kImageSize * kImageSize * kImageChannels));
    for (auto& v : img.pixels) v = detail::read_le_f32(in);
    if (!in) throw std::runtime_error("truncated image file: " + path);
    return img;
}

inline nlohmann::json corpus_config_to_json(const CorpusConfig& cfg) {
    return nlohmann::json{{"languages", cfg.languages},     {"train_scenes", cfg.train_scenes},
                          {"val_scenes", cfg.val_scenes},   {"test_scenes", cfg.test_scenes},
                          {"seed", cfg.seed},               {"min_count", cfg.min_count},
                          {"caption_t_max", cfg.caption_t_max}, {"chunk_t_max", cfg.chunk_t_max}};
}

inline CorpusConfig corpus_config_from_json(const nlohmann::json& j) {
    CorpusConfig cfg;
    cfg.languages = j.value("languages", cfg.languages);
    cfg.train_scenes = j.value("train_scenes", cfg.train_scenes);
    cfg.val_scenes = j.value("val_scenes", cfg.val_scenes);
    cfg.test_scenes = j.value("test_scenes", cfg.test_scenes);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.min_count = j.value("min_count", cfg.min_count);
    cfg.caption_t_max = j.value("caption_t_max", cfg.caption_t_max);
    cfg.chunk_t_max = j.value("chunk_t_max", cfg.chunk_t_max);
    return cfg;
}

// Generates and writes the dataset directory. The manifest is written last so
// a failed run never leaves a manifest behind.
inline Dataset generate_corpus(const CorpusConfig& cfg, const std::string& out_dir) {
    Dataset ds = build_dataset(cfg);
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) throw std::runtime_error("cannot create output directory: " + out_dir);

    detail::write_records(ds.train, out_dir + "/train.jsonl");
    detail::write_records(ds.val, out_dir + "/val.jsonl");
    detail::write_records(ds.test, out_dir + "/test.jsonl");
    write_vocab(ds.vocab, out_dir + "/vocab.tsv");

    std::vector<int> scene_ids;
    for (const auto& [id, img] : ds.images) scene_ids.push_back(id);
    std::sort(scene_ids.begin(), scene_ids.end());
    for (int id : scene_ids)
        write_image(ds.images.at(id), out_dir + "/images/scene_" + std::to_string(id) + ".f32");

    nlohmann::json manifest{{"config", corpus_config_to_json(cfg)},
                            {"records", {{"train", ds.train.size()},
                                         {"val", ds.val.size()},
                                         {"test", ds.test.size()}}},
                            {"images", scene_ids.size()},
                            {"vocab_size", ds.vocab.size()}};
    std::ofstream mf(out_dir + "/manifest.json", std::ios::binary);
    if (!mf) throw std::runtime_error("cannot write manifest");
    mf << manifest.dump(2) << '\n';
    if (!mf) throw std::runtime_error("manifest write failed");
    return ds;
}

inline Dataset load_corpus(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json", std::ios::binary);
    if (!mf) throw std::runtime_error("no manifest.json in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(mf);
    Dataset ds;
    ds.config = corpus_config_from_json(manifest.at("config"));
    ds.vocab = read_vocab(dir + "/vocab.tsv");
    ds.train = detail::read_records(dir + "/train.jsonl");
    ds.val = detail::read_records(dir + "/val.jsonl");
    ds.test = detail::read_records(dir + "/test.jsonl");
    for (const auto* split : {&ds.train, &ds.val, &ds.test})
        for (const auto& rec : *split)
            if (!ds.images.count(rec.scene_id))
                ds.images.emplace(rec.scene_id, read_image(dir + "/" + rec.image_ref));
    return ds;
}

}  // namespace uniret
