#include "nb/shapeworld.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace nb {

PositionKind cell_position(int row, int col) {
    if (row >= 1 && row <= 2 && col >= 1 && col <= 2) return PositionKind::middle;
    if (row < 2) return col < 2 ? PositionKind::top_left : PositionKind::top_right;
    return col < 2 ? PositionKind::bottom_left : PositionKind::bottom_right;
}

const char* shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

const char* color_name(ColorKind c) {
    switch (c) {
        case ColorKind::red: return "red";
        case ColorKind::green: return "green";
        case ColorKind::blue: return "blue";
    }
    return "?";
}

bool Scene::has_pair(ColorKind c, ShapeKind s) const {
    for (const auto& o : objects)
        if (o.color == c && o.shape == s) return true;
    return false;
}

bool Scene::has_exact(ColorKind c, ShapeKind s, PositionKind p) const {
    for (const auto& o : objects)
        if (o.color == c && o.shape == s && o.position() == p) return true;
    return false;
}

Vocabulary::Vocabulary()
    : words_{"<pad>", "<bos>", "<eos>", "yes",  "no",     "a",    "an",   "red",  "green",
             "blue",  "circle", "square", "triangle", "at", "top", "bottom", "left", "right",
             "middle", "and",   "empty", "scene", "is",  "there", "describe", "the"} {}

int Vocabulary::id(const std::string& word) const {
    for (size_t i = 0; i < words_.size(); ++i)
        if (words_[i] == word) return static_cast<int>(i);
    throw Error("vocabulary: unknown word '" + word + "'");
}

const std::string& Vocabulary::word(int id) const {
    if (id < 0 || id >= size()) throw Error("vocabulary: id " + std::to_string(id) + " out of range");
    return words_[static_cast<size_t>(id)];
}

bool Vocabulary::contains(const std::string& word) const {
    for (const auto& w : words_)
        if (w == word) return true;
    return false;
}

const Vocabulary& Vocabulary::standard() {
    static const Vocabulary v;
    return v;
}

std::string TokenSeq::text(const Vocabulary& v) const {
    std::string out;
    for (int id : ids) {
        if (!out.empty()) out += ' ';
        out += v.word(id);
    }
    return out;
}

TokenSeq make_prompt(const std::vector<std::string>& words, const Vocabulary& v) {
    TokenSeq t;
    t.ids.push_back(Vocabulary::kBos);
    for (const auto& w : words) t.ids.push_back(v.id(w));
    t.roles.assign(t.ids.size(), TokenRole::prompt);
    return t;
}

TokenSeq make_answer(const std::vector<std::string>& words, const Vocabulary& v) {
    TokenSeq t;
    for (const auto& w : words) t.ids.push_back(v.id(w));
    t.ids.push_back(Vocabulary::kEos);
    t.roles.assign(t.ids.size(), TokenRole::answer);
    return t;
}

Scene generate_scene(RngStream& rng, int max_objects) {
    if (max_objects < 0 || max_objects > kGridSize * kGridSize)
        throw Error("generate_scene: max_objects out of range");
    Scene scene;
    const int count = static_cast<int>(rng.next_below(static_cast<uint64_t>(max_objects) + 1));
    std::array<int, kGridSize * kGridSize> cells;
    for (int i = 0; i < kGridSize * kGridSize; ++i) cells[static_cast<size_t>(i)] = i;
    for (int i = 0; i < count; ++i) {
        const int j = i + static_cast<int>(rng.next_below(static_cast<uint64_t>(kGridSize * kGridSize - i)));
        std::swap(cells[static_cast<size_t>(i)], cells[static_cast<size_t>(j)]);
    }
    for (int i = 0; i < count; ++i) {
        SceneObject o;
        o.shape = static_cast<ShapeKind>(rng.next_below(kNumShapes));
        o.color = static_cast<ColorKind>(rng.next_below(kNumColors));
        o.row = cells[static_cast<size_t>(i)] / kGridSize;
        o.col = cells[static_cast<size_t>(i)] % kGridSize;
        scene.objects.push_back(o);
    }
    std::sort(scene.objects.begin(), scene.objects.end(),
              [](const SceneObject& a, const SceneObject& b) { return a.row != b.row ? a.row < b.row : a.col < b.col; });
    return scene;
}

namespace {

bool shape_covers(ShapeKind s, int y, int x) {
    // within an 8x8 cell
    const double cy = y - 3.5, cx = x - 3.5;
    switch (s) {
        case ShapeKind::circle:
            return cy * cy + cx * cx <= 3.2 * 3.2;
        case ShapeKind::square:
            return y >= 1 && y <= 6 && x >= 1 && x <= 6;
        case ShapeKind::triangle:
            return y >= 1 && y <= 6 && std::abs(cx) <= 0.5 + (y - 1) * 0.6;
    }
    return false;
}

}  // namespace

RasterImage rasterize(const Scene& scene) {
    RasterImage img;
    std::fill(img.pixels.begin(), img.pixels.end(), 0.5f);
    for (const auto& o : scene.objects) {
        float rgb[3] = {0.0f, 0.0f, 0.0f};
        rgb[static_cast<int>(o.color)] = 1.0f;
        for (int y = 0; y < kCellPixels; ++y) {
            for (int x = 0; x < kCellPixels; ++x) {
                if (!shape_covers(o.shape, y, x)) continue;
                const int py = o.row * kCellPixels + y;
                const int px = o.col * kCellPixels + x;
                for (int c = 0; c < 3; ++c) img.at(py, px, c) = rgb[c];
            }
        }
    }
    return img;
}

namespace {

std::vector<std::string> position_words(PositionKind p) {
    switch (p) {
        case PositionKind::top_left: return {"top", "left"};
        case PositionKind::top_right: return {"top", "right"};
        case PositionKind::bottom_left: return {"bottom", "left"};
        case PositionKind::bottom_right: return {"bottom", "right"};
        case PositionKind::middle: return {"middle"};
    }
    return {};
}

}  // namespace

TokenSeq render_caption(const ParsedCaption& parsed, const Vocabulary& vocab) {
    if (parsed.empty_scene || parsed.claims.empty()) return make_answer({"an", "empty", "scene"}, vocab);
    std::vector<std::string> words;
    for (size_t i = 0; i < parsed.claims.size(); ++i) {
        const CaptionClaim& cl = parsed.claims[i];
        if (i > 0) words.push_back("and");
        words.push_back("a");
        words.push_back(color_name(cl.color));
        words.push_back(shape_name(cl.shape));
        words.push_back("at");
        for (const auto& w : position_words(cl.position)) words.push_back(w);
    }
    return make_answer(words, vocab);
}

TokenSeq caption_scene(const Scene& scene, const Vocabulary& vocab) {
    ParsedCaption parsed;
    parsed.empty_scene = scene.empty();
    for (const auto& o : scene.objects) parsed.claims.push_back({o.color, o.shape, o.position()});
    return render_caption(parsed, vocab);
}

std::optional<ParsedCaption> parse_caption(const TokenSeq& tokens, const Vocabulary& vocab) {
    std::vector<int> ids;
    for (int id : tokens.ids) {
        if (id == Vocabulary::kBos || id == Vocabulary::kEos || id == Vocabulary::kPad) continue;
        ids.push_back(id);
    }
    const auto word_at = [&](size_t i) -> const std::string& { return vocab.word(ids[i]); };
    if (ids.size() == 3 && word_at(0) == "an" && word_at(1) == "empty" && word_at(2) == "scene") {
        ParsedCaption p;
        p.empty_scene = true;
        return p;
    }
    ParsedCaption parsed;
    size_t i = 0;
    while (i < ids.size()) {
        if (!parsed.claims.empty()) {
            if (word_at(i) != "and") return std::nullopt;
            ++i;
        }
        if (i >= ids.size() || word_at(i) != "a") return std::nullopt;
        ++i;
        CaptionClaim claim;
        if (i >= ids.size()) return std::nullopt;
        if (word_at(i) == "red") claim.color = ColorKind::red;
        else if (word_at(i) == "green") claim.color = ColorKind::green;
        else if (word_at(i) == "blue") claim.color = ColorKind::blue;
        else return std::nullopt;
        ++i;
        if (i >= ids.size()) return std::nullopt;
        if (word_at(i) == "circle") claim.shape = ShapeKind::circle;
        else if (word_at(i) == "square") claim.shape = ShapeKind::square;
        else if (word_at(i) == "triangle") claim.shape = ShapeKind::triangle;
        else return std::nullopt;
        ++i;
        if (i >= ids.size() || word_at(i) != "at") return std::nullopt;
        ++i;
        if (i >= ids.size()) return std::nullopt;
        if (word_at(i) == "middle") {
            claim.position = PositionKind::middle;
            ++i;
        } else if (word_at(i) == "top" || word_at(i) == "bottom") {
            const bool top = word_at(i) == "top";
            ++i;
            if (i >= ids.size()) return std::nullopt;
            if (word_at(i) == "left") claim.position = top ? PositionKind::top_left : PositionKind::bottom_left;
            else if (word_at(i) == "right") claim.position = top ? PositionKind::top_right : PositionKind::bottom_right;
            else return std::nullopt;
            ++i;
        } else {
            return std::nullopt;
        }
        parsed.claims.push_back(claim);
    }
    if (parsed.claims.empty()) return std::nullopt;
    return parsed;
}

namespace {

CaptionClaim substituted(const CaptionClaim& base, int aspect, uint64_t pick) {
    CaptionClaim out = base;
    switch (aspect) {
        case 0: {  // shape
            int s = static_cast<int>(pick % (kNumShapes - 1));
            if (s >= static_cast<int>(base.shape)) ++s;
            out.shape = static_cast<ShapeKind>(s);
            break;
        }
        case 1: {  // color
            int c = static_cast<int>(pick % (kNumColors - 1));
            if (c >= static_cast<int>(base.color)) ++c;
            out.color = static_cast<ColorKind>(c);
            break;
        }
        default: {  // position
            int p = static_cast<int>(pick % (kNumPositions - 1));
            if (p >= static_cast<int>(base.position)) ++p;
            out.position = static_cast<PositionKind>(p);
            break;
        }
    }
    return out;
}

}  // namespace

TokenSeq corrupt_caption(const Scene& scene, const TokenSeq& caption, const Vocabulary& vocab, RngStream& rng) {
    if (scene.empty()) throw EmptySceneError("corrupt_caption: empty scene has no content words");
    auto parsed = parse_caption(caption, vocab);
    if (!parsed || parsed->empty_scene || parsed->claims.empty())
        throw Error("corrupt_caption: input is not a caption of a non-empty scene");

    const auto try_claim = [&](size_t mention, const CaptionClaim& cand) -> std::optional<TokenSeq> {
        if (scene.has_exact(cand.color, cand.shape, cand.position)) return std::nullopt;
        ParsedCaption corrupted = *parsed;
        corrupted.claims[mention] = cand;
        return render_caption(corrupted, vocab);
    };

    for (int attempt = 0; attempt < 64; ++attempt) {
        const size_t mention = rng.next_below(parsed->claims.size());
        const int aspect = static_cast<int>(rng.next_below(3));
        const CaptionClaim cand = substituted(parsed->claims[mention], aspect, rng.next_u64());
        if (auto out = try_claim(mention, cand)) return *out;
    }
    // exhaustive fallback; some substitution always avoids an exact match
    for (size_t mention = 0; mention < parsed->claims.size(); ++mention) {
        for (int aspect = 0; aspect < 3; ++aspect) {
            const int options = aspect == 2 ? kNumPositions - 1 : 2;
            for (int pick = 0; pick < options; ++pick) {
                const CaptionClaim cand = substituted(parsed->claims[mention], aspect, static_cast<uint64_t>(pick));
                if (auto out = try_claim(mention, cand)) return *out;
            }
        }
    }
    throw Error("corrupt_caption: no corrupting substitution exists");
}

TokenSeq caption_prompt(const Vocabulary& vocab) { return make_prompt({"describe", "the", "scene"}, vocab); }

ProbeQuestion make_probe(const Scene& scene, const Vocabulary& vocab, RngStream& rng, double positive_prob) {
    std::vector<std::pair<ColorKind, ShapeKind>> present, absent;
    for (int c = 0; c < kNumColors; ++c) {
        for (int s = 0; s < kNumShapes; ++s) {
            const auto color = static_cast<ColorKind>(c);
            const auto shape = static_cast<ShapeKind>(s);
            (scene.has_pair(color, shape) ? present : absent).push_back({color, shape});
        }
    }
    const bool ask_present = !present.empty() && rng.next_bernoulli(positive_prob);
    const auto& pool = ask_present ? present : absent;
    const auto& pair = pool[rng.next_below(pool.size())];
    ProbeQuestion probe;
    probe.scene = scene;
    probe.image = rasterize(scene);
    probe.prompt = make_prompt({"is", "there", "a", color_name(pair.first), shape_name(pair.second)}, vocab);
    probe.answer_yes = ask_present;
    return probe;
}

std::vector<Example> generate_corpus(int n_scenes, RngStream rng) {
    const Vocabulary& vocab = Vocabulary::standard();
    std::vector<Example> out;
    out.reserve(static_cast<size_t>(n_scenes) * 2);
    for (int i = 0; i < n_scenes; ++i) {
        RngStream scene_rng = rng.child(static_cast<uint64_t>(i));
        Scene scene = generate_scene(scene_rng);
        scene.scene_id = static_cast<uint64_t>(i);
        RasterImage image = rasterize(scene);

        Example cap;
        cap.scene = scene;
        cap.image = image;
        cap.prompt = caption_prompt(vocab);
        cap.answer = caption_scene(scene, vocab);
        cap.kind = ExampleKind::caption;
        out.push_back(cap);

        ProbeQuestion probe = make_probe(scene, vocab, scene_rng);
        Example pe;
        pe.scene = scene;
        pe.image = image;
        pe.prompt = probe.prompt;
        pe.answer = make_answer({probe.answer_yes ? "yes" : "no"}, vocab);
        pe.kind = ExampleKind::probe;
        out.push_back(pe);
    }
    return out;
}

std::vector<PreferencePair> build_preference_pairs(const std::vector<Example>& examples, const Vocabulary& vocab,
                                                   RngStream rng) {
    std::vector<PreferencePair> pairs;
    for (size_t i = 0; i < examples.size(); ++i) {
        const Example& e = examples[i];
        if (e.kind != ExampleKind::caption || !e.answer || e.scene.empty()) continue;
        RngStream pr = rng.child(static_cast<uint64_t>(i));
        PreferencePair p;
        p.scene = e.scene;
        p.image = e.image;
        p.prompt = e.prompt;
        p.preferred = *e.answer;
        p.rejected = corrupt_caption(e.scene, *e.answer, vocab, pr);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

std::vector<ProbeQuestion> probes_from_examples(const std::vector<Example>& examples, const Vocabulary& vocab,
                                                RngStream rng, double positive_prob) {
    std::vector<ProbeQuestion> probes;
    std::vector<uint64_t> seen;
    for (const Example& e : examples) {
        if (std::find(seen.begin(), seen.end(), e.scene.scene_id) != seen.end()) continue;
        seen.push_back(e.scene.scene_id);
        RngStream pr = rng.child(e.scene.scene_id);
        probes.push_back(make_probe(e.scene, vocab, pr, positive_prob));
    }
    return probes;
}

DatasetSplit split_dataset(std::vector<Example> examples, double labeled_fraction, int eval_count, RngStream& rng) {
    const bool legal = std::abs(labeled_fraction - 0.3) < 1e-9 || std::abs(labeled_fraction - 0.5) < 1e-9 ||
                       std::abs(labeled_fraction - 1.0) < 1e-9;
    if (!legal) throw FractionOutOfRangeError("split_dataset: labeled fraction must be one of {0.3, 0.5, 1.0}");
    const int n = static_cast<int>(examples.size());
    if (eval_count < 0 || eval_count >= n) throw ConfigError("split_dataset: eval_count must be in [0, total)");

    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    for (int i = 0; i < n - 1; ++i) {
        const int j = i + static_cast<int>(rng.next_below(static_cast<uint64_t>(n - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }

    const int rest = n - eval_count;
    const int n_labeled = static_cast<int>(std::llround(labeled_fraction * rest));

    std::vector<int> eval_idx(idx.begin(), idx.begin() + eval_count);
    std::vector<int> lab_idx(idx.begin() + eval_count, idx.begin() + eval_count + n_labeled);
    std::vector<int> unlab_idx(idx.begin() + eval_count + n_labeled, idx.end());
    std::sort(eval_idx.begin(), eval_idx.end());
    std::sort(lab_idx.begin(), lab_idx.end());
    std::sort(unlab_idx.begin(), unlab_idx.end());

    DatasetSplit split;
    for (int i : eval_idx) split.eval.push_back(examples[static_cast<size_t>(i)]);
    for (int i : lab_idx) split.labeled.push_back(examples[static_cast<size_t>(i)]);
    for (int i : unlab_idx) {
        Example e = examples[static_cast<size_t>(i)];
        e.answer.reset();
        split.unlabeled.push_back(std::move(e));
    }
    return split;
}

namespace {

constexpr char kMagic[4] = {'N', 'B', 'D', 'S'};
constexpr uint16_t kVersion = 1;

void write_u16(std::ofstream& f, uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); }
void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ofstream& f, uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
void write_u8(std::ofstream& f, uint8_t v) { f.write(reinterpret_cast<const char*>(&v), 1); }

struct Reader {
    std::ifstream f;
    explicit Reader(const std::string& path) : f(path, std::ios::binary) {
        if (!f) throw CorruptFileError("cannot open dataset file: " + path);
    }
    void read(void* dst, size_t n) {
        f.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (f.gcount() != static_cast<std::streamsize>(n)) throw CorruptFileError("dataset file truncated");
    }
    uint8_t u8() { uint8_t v; read(&v, 1); return v; }
    uint16_t u16() { uint16_t v; read(&v, 2); return v; }
    uint32_t u32() { uint32_t v; read(&v, 4); return v; }
    uint64_t u64() { uint64_t v; read(&v, 8); return v; }
    bool at_end() { return f.peek() == std::char_traits<char>::eof(); }
};

void write_tokens(std::ofstream& f, const TokenSeq& t) {
    write_u16(f, static_cast<uint16_t>(t.ids.size()));
    for (int id : t.ids) write_u16(f, static_cast<uint16_t>(id));
}

TokenSeq read_tokens(Reader& r, TokenRole role) {
    TokenSeq t;
    const uint16_t len = r.u16();
    t.ids.resize(len);
    for (auto& id : t.ids) id = r.u16();
    t.roles.assign(len, role);
    return t;
}

}  // namespace

void serialize_dataset(const std::vector<Example>& examples, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write dataset file: " + path);
    f.write(kMagic, 4);
    write_u16(f, kVersion);
    write_u32(f, static_cast<uint32_t>(examples.size()));
    for (const Example& e : examples) {
        write_u64(f, e.scene.scene_id);
        write_u8(f, static_cast<uint8_t>(e.scene.objects.size()));
        for (const auto& o : e.scene.objects) {
            write_u8(f, static_cast<uint8_t>(o.shape));
            write_u8(f, static_cast<uint8_t>(o.color));
            write_u8(f, static_cast<uint8_t>(o.row));
            write_u8(f, static_cast<uint8_t>(o.col));
        }
        f.write(reinterpret_cast<const char*>(e.image.pixels.data()),
                static_cast<std::streamsize>(e.image.pixels.size() * sizeof(float)));
        write_u8(f, static_cast<uint8_t>(e.kind));
        write_tokens(f, e.prompt);
        write_u8(f, e.answer ? 1 : 0);
        if (e.answer) write_tokens(f, *e.answer);
    }
    if (!f) throw Error("write failed: " + path);
}

std::vector<Example> load_dataset(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw CorruptFileError("bad dataset magic");
    const uint16_t version = r.u16();
    if (version != kVersion)
        throw VersionMismatchError("dataset version " + std::to_string(version) + ", expected " + std::to_string(kVersion));
    const uint32_t n = r.u32();
    std::vector<Example> out;
    out.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        Example e;
        e.scene.scene_id = r.u64();
        const uint8_t n_obj = r.u8();
        if (n_obj > kGridSize * kGridSize) throw CorruptFileError("dataset: impossible object count");
        for (uint8_t j = 0; j < n_obj; ++j) {
            SceneObject o;
            o.shape = static_cast<ShapeKind>(r.u8());
            o.color = static_cast<ColorKind>(r.u8());
            o.row = r.u8();
            o.col = r.u8();
            if (static_cast<int>(o.shape) >= kNumShapes || static_cast<int>(o.color) >= kNumColors ||
                o.row >= kGridSize || o.col >= kGridSize)
                throw CorruptFileError("dataset: invalid scene object");
            e.scene.objects.push_back(o);
        }
        r.read(e.image.pixels.data(), e.image.pixels.size() * sizeof(float));
        e.kind = static_cast<ExampleKind>(r.u8());
        e.prompt = read_tokens(r, TokenRole::prompt);
        if (r.u8()) e.answer = read_tokens(r, TokenRole::answer);
        out.push_back(std::move(e));
    }
    if (!r.at_end()) throw CorruptFileError("dataset: trailing bytes");
    return out;
}

}  // namespace nb
