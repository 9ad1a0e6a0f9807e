#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nb/errors.hpp"
#include "nb/rng.hpp"

namespace nb {

enum class ShapeKind : uint8_t { circle = 0, square = 1, triangle = 2 };
enum class ColorKind : uint8_t { red = 0, green = 1, blue = 2 };

// Grid cells quantize to five position words: the central 2x2 block is
// "middle", everything else takes its quadrant.
enum class PositionKind : uint8_t { top_left = 0, top_right = 1, bottom_left = 2, bottom_right = 3, middle = 4 };

constexpr int kGridSize = 4;
constexpr int kCellPixels = 8;
constexpr int kMaxObjects = 4;
constexpr int kNumShapes = 3;
constexpr int kNumColors = 3;
constexpr int kNumPositions = 5;

PositionKind cell_position(int row, int col);
const char* shape_name(ShapeKind s);
const char* color_name(ColorKind c);

struct SceneObject {
    ShapeKind shape;
    ColorKind color;
    int row = 0;
    int col = 0;

    bool operator==(const SceneObject&) const = default;
    PositionKind position() const { return cell_position(row, col); }
};

struct Scene {
    std::vector<SceneObject> objects;  // row-major cell order
    uint64_t scene_id = 0;

    bool operator==(const Scene&) const = default;
    bool empty() const { return objects.empty(); }
    bool has_pair(ColorKind c, ShapeKind s) const;
    bool has_exact(ColorKind c, ShapeKind s, PositionKind p) const;
};

struct RasterImage {
    static constexpr int kWidth = 32;
    static constexpr int kHeight = 32;
    static constexpr int kChannels = 3;

    std::vector<float> pixels;  // HWC, values in [0,1]

    RasterImage() : pixels(static_cast<size_t>(kWidth) * kHeight * kChannels, 0.0f) {}
    float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * kWidth + x) * kChannels + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * kWidth + x) * kChannels + c]; }
    bool operator==(const RasterImage&) const = default;
};

// Closed template vocabulary; ids are frozen (they define the file formats).
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kYes = 3;
    static constexpr int kNo = 4;

    Vocabulary();
    int size() const { return static_cast<int>(words_.size()); }
    int id(const std::string& word) const;  // throws on unknown word
    const std::string& word(int id) const;
    bool contains(const std::string& word) const;

    static const Vocabulary& standard();

private:
    std::vector<std::string> words_;
};

enum class TokenRole : uint8_t { prompt = 0, answer = 1 };

struct TokenSeq {
    std::vector<int> ids;
    std::vector<TokenRole> roles;

    bool operator==(const TokenSeq&) const = default;
    int length() const { return static_cast<int>(ids.size()); }
    std::string text(const Vocabulary& v) const;  // words joined by spaces, specials included
};

TokenSeq make_prompt(const std::vector<std::string>& words, const Vocabulary& v);   // prepends BOS
TokenSeq make_answer(const std::vector<std::string>& words, const Vocabulary& v);   // appends EOS

enum class ExampleKind : uint8_t { caption = 0, probe = 1 };

struct Example {
    Scene scene;
    RasterImage image;
    TokenSeq prompt;
    std::optional<TokenSeq> answer;
    ExampleKind kind = ExampleKind::caption;

    bool operator==(const Example&) const = default;
};

struct PreferencePair {
    Scene scene;
    RasterImage image;
    TokenSeq prompt;
    TokenSeq preferred;
    TokenSeq rejected;
};

struct ProbeQuestion {
    Scene scene;
    RasterImage image;
    TokenSeq prompt;
    bool answer_yes = false;
};

struct DatasetSplit {
    std::vector<Example> labeled;
    std::vector<Example> unlabeled;  // answers stripped
    std::vector<Example> eval;
};

// One parsed caption claim: "a {color} {shape} at {position}".
struct CaptionClaim {
    ColorKind color;
    ShapeKind shape;
    PositionKind position;

    bool operator==(const CaptionClaim&) const = default;
};

struct ParsedCaption {
    bool empty_scene = false;
    std::vector<CaptionClaim> claims;
};

Scene generate_scene(RngStream& rng, int max_objects = kMaxObjects);
RasterImage rasterize(const Scene& scene);
TokenSeq caption_scene(const Scene& scene, const Vocabulary& vocab);
TokenSeq render_caption(const ParsedCaption& parsed, const Vocabulary& vocab);
std::optional<ParsedCaption> parse_caption(const TokenSeq& tokens, const Vocabulary& vocab);
TokenSeq corrupt_caption(const Scene& scene, const TokenSeq& caption, const Vocabulary& vocab, RngStream& rng);
ProbeQuestion make_probe(const Scene& scene, const Vocabulary& vocab, RngStream& rng, double positive_prob = 0.5);
TokenSeq caption_prompt(const Vocabulary& vocab);  // "describe the scene"

// Caption plus probe examples for n_scenes scenes; pure function of the rng seed.
std::vector<Example> generate_corpus(int n_scenes, RngStream rng);

std::vector<PreferencePair> build_preference_pairs(const std::vector<Example>& examples, const Vocabulary& vocab,
                                                   RngStream rng);
std::vector<ProbeQuestion> probes_from_examples(const std::vector<Example>& examples, const Vocabulary& vocab,
                                                RngStream rng, double positive_prob = 0.5);

DatasetSplit split_dataset(std::vector<Example> examples, double labeled_fraction, int eval_count, RngStream& rng);

void serialize_dataset(const std::vector<Example>& examples, const std::string& path);
std::vector<Example> load_dataset(const std::string& path);

}  // namespace nb
