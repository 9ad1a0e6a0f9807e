#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "nb/diagnostics.hpp"
#include "nb/shapeworld.hpp"

using namespace nb;

namespace {
const Vocabulary& vocab = Vocabulary::standard();
}

TEST_CASE("vocabulary basics") {
    CHECK(vocab.size() <= 64);
    CHECK(vocab.id("<pad>") == Vocabulary::kPad);
    CHECK(vocab.id("<bos>") == Vocabulary::kBos);
    CHECK(vocab.id("<eos>") == Vocabulary::kEos);
    CHECK(vocab.id("yes") == Vocabulary::kYes);
    CHECK(vocab.id("no") == Vocabulary::kNo);
    // bijection
    for (int i = 0; i < vocab.size(); ++i) CHECK(vocab.id(vocab.word(i)) == i);
    CHECK_THROWS_AS(vocab.id("zebra"), Error);
}

TEST_CASE("generate_scene: fixed seed is reproducible") {
    RngStream a(7), b(7);
    CHECK(generate_scene(a) == generate_scene(b));
}

TEST_CASE("generate_scene: max_objects=0 gives the empty scene") {
    RngStream rng(3);
    Scene s = generate_scene(rng, 0);
    CHECK(s.objects.empty());
}

TEST_CASE("generate_scene: cells unique, attributes near-uniform over 1e5 samples") {
    RngStream rng(41);
    std::map<std::pair<int, int>, int> pair_counts;
    int total_objects = 0;
    std::map<int, int> count_hist;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        Scene s = generate_scene(rng);
        ++count_hist[static_cast<int>(s.objects.size())];
        std::set<std::pair<int, int>> cells;
        for (const auto& o : s.objects) {
            REQUIRE(o.row >= 0);
            REQUIRE(o.row < kGridSize);
            REQUIRE(o.col >= 0);
            REQUIRE(o.col < kGridSize);
            cells.insert({o.row, o.col});
            ++pair_counts[{static_cast<int>(o.shape), static_cast<int>(o.color)}];
            ++total_objects;
        }
        REQUIRE(cells.size() == s.objects.size());
    }
    // object count uniform over 0..4
    for (int c = 0; c <= 4; ++c)
        CHECK(count_hist[c] == doctest::Approx(n / 5.0).epsilon(0.05));
    // each (shape,color) pair within +-5% of uniform
    for (int s = 0; s < kNumShapes; ++s)
        for (int c = 0; c < kNumColors; ++c)
            CHECK(pair_counts[{s, c}] == doctest::Approx(total_objects / 9.0).epsilon(0.05));
}

TEST_CASE("rasterize: empty scene is the uniform gray background") {
    Scene s;
    RasterImage img = rasterize(s);
    for (float p : img.pixels) CHECK(p == 0.5f);
}

TEST_CASE("rasterize: red circle at (0,0) saturates only its own cell") {
    Scene s;
    s.objects.push_back({ShapeKind::circle, ColorKind::red, 0, 0});
    RasterImage img = rasterize(s);
    bool saturated_inside = false;
    for (int y = 0; y < RasterImage::kHeight; ++y) {
        for (int x = 0; x < RasterImage::kWidth; ++x) {
            const float mx = std::max({img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)});
            if (y < 8 && x < 8) {
                if (img.at(y, x, 0) > 0.9f) saturated_inside = true;
            } else {
                REQUIRE(mx <= 0.9f);
            }
        }
    }
    CHECK(saturated_inside);
}

TEST_CASE("rasterize: deterministic and shape-distinct") {
    RngStream rng(9);
    Scene s = generate_scene(rng);
    CHECK(rasterize(s) == rasterize(s));

    Scene a, b;
    a.objects.push_back({ShapeKind::circle, ColorKind::red, 1, 1});
    b.objects.push_back({ShapeKind::square, ColorKind::red, 1, 1});
    CHECK_FALSE(rasterize(a) == rasterize(b));
}

TEST_CASE("cell_position: quadrants plus central middle block") {
    CHECK(cell_position(0, 0) == PositionKind::top_left);
    CHECK(cell_position(0, 3) == PositionKind::top_right);
    CHECK(cell_position(3, 0) == PositionKind::bottom_left);
    CHECK(cell_position(3, 3) == PositionKind::bottom_right);
    CHECK(cell_position(1, 1) == PositionKind::middle);
    CHECK(cell_position(2, 2) == PositionKind::middle);
    CHECK(cell_position(0, 1) == PositionKind::top_left);
    CHECK(cell_position(1, 3) == PositionKind::top_right);
}

TEST_CASE("caption_scene: forced template for one object") {
    Scene s;
    s.objects.push_back({ShapeKind::circle, ColorKind::red, 0, 0});
    TokenSeq caption = caption_scene(s, vocab);
    CHECK(caption.text(vocab) == "a red circle at top left <eos>");
    for (TokenRole r : caption.roles) CHECK(r == TokenRole::answer);
    CHECK(caption.ids.back() == Vocabulary::kEos);
}

TEST_CASE("caption_scene: empty scene") {
    Scene s;
    CHECK(caption_scene(s, vocab).text(vocab) == "an empty scene <eos>");
}

TEST_CASE("caption_scene: conjunction follows row-major order") {
    Scene s;
    s.objects.push_back({ShapeKind::circle, ColorKind::green, 0, 2});
    s.objects.push_back({ShapeKind::triangle, ColorKind::blue, 3, 3});
    TokenSeq caption = caption_scene(s, vocab);
    CHECK(caption.text(vocab) == "a green circle at top right and a blue triangle at bottom right <eos>");
}

TEST_CASE("parse_caption inverts caption_scene on random scenes") {
    RngStream rng(21);
    for (int i = 0; i < 200; ++i) {
        Scene s = generate_scene(rng);
        const auto parsed = parse_caption(caption_scene(s, vocab), vocab);
        REQUIRE(parsed.has_value());
        CHECK(parsed->empty_scene == s.empty());
        REQUIRE(parsed->claims.size() == s.objects.size());
        for (size_t k = 0; k < s.objects.size(); ++k) {
            CHECK(parsed->claims[k].color == s.objects[k].color);
            CHECK(parsed->claims[k].shape == s.objects[k].shape);
            CHECK(parsed->claims[k].position == s.objects[k].position());
        }
    }
}

TEST_CASE("parse_caption rejects ungrammatical token sequences") {
    CHECK_FALSE(parse_caption(make_answer({"red", "circle"}, vocab), vocab).has_value());
    CHECK_FALSE(parse_caption(make_answer({"a", "red", "circle"}, vocab), vocab).has_value());
    CHECK_FALSE(parse_caption(make_answer({"a", "red", "circle", "at", "top"}, vocab), vocab).has_value());
    CHECK_FALSE(parse_caption(make_answer({"a", "red", "red", "at", "middle"}, vocab), vocab).has_value());
    CHECK_FALSE(parse_caption(make_answer({}, vocab), vocab).has_value());
}

TEST_CASE("corrupt_caption changes exactly one claim and misdescribes the scene") {
    RngStream rng(33);
    int done = 0;
    while (done < 200) {
        Scene s = generate_scene(rng);
        if (s.empty()) continue;
        ++done;
        TokenSeq truth = caption_scene(s, vocab);
        RngStream crng = rng.child(static_cast<uint64_t>(done));
        TokenSeq corrupted = corrupt_caption(s, truth, vocab, crng);
        CHECK_FALSE(corrupted == truth);

        const auto before = parse_caption(truth, vocab);
        const auto after = parse_caption(corrupted, vocab);
        REQUIRE(after.has_value());
        REQUIRE(after->claims.size() == before->claims.size());
        int changed = 0;
        for (size_t k = 0; k < after->claims.size(); ++k)
            if (!(after->claims[k] == before->claims[k])) ++changed;
        CHECK(changed == 1);

        // the corrupted claim matches no object exactly
        bool contradiction = false;
        for (const auto& claim : after->claims)
            if (!s.has_exact(claim.color, claim.shape, claim.position)) contradiction = true;
        CHECK(contradiction);

        // scored by the judge: lands in exactly one error category
        const CaptionCategory cat = judge_caption(s, corrupted, vocab);
        CHECK(cat != CaptionCategory::correct);
        CHECK(cat != CaptionCategory::other);
    }
}

TEST_CASE("corrupt_caption on an empty scene throws") {
    Scene s;
    RngStream rng(1);
    CHECK_THROWS_AS(corrupt_caption(s, caption_scene(s, vocab), vocab, rng), EmptySceneError);
}

TEST_CASE("make_probe: empty scene always answers no") {
    Scene s;
    RngStream rng(5);
    for (int i = 0; i < 20; ++i) CHECK_FALSE(make_probe(s, vocab, rng).answer_yes);
}

TEST_CASE("make_probe: positive_prob=1 on a non-empty scene answers yes") {
    RngStream rng(6);
    Scene s = generate_scene(rng, 4);
    while (s.empty()) s = generate_scene(rng, 4);
    for (int i = 0; i < 20; ++i) CHECK(make_probe(s, vocab, rng, 1.0).answer_yes);
}

TEST_CASE("make_probe: every probe's answer matches exact pair membership") {
    RngStream rng(44);
    for (int i = 0; i < 50; ++i) {
        Scene s = generate_scene(rng);
        for (int k = 0; k < 20; ++k) {
            ProbeQuestion probe = make_probe(s, vocab, rng);
            // prompt is "<bos> is there a {color} {shape}"
            REQUIRE(probe.prompt.ids.size() == 6);
            const std::string color = vocab.word(probe.prompt.ids[4]);
            const std::string shape = vocab.word(probe.prompt.ids[5]);
            bool present = false;
            for (const auto& o : s.objects)
                if (color == color_name(o.color) && shape == shape_name(o.shape)) present = true;
            CHECK(probe.answer_yes == present);
        }
    }
}

TEST_CASE("split_dataset: arithmetic, determinism, answer stripping") {
    RngStream gen(77);
    std::vector<Example> examples = generate_corpus(500, gen);  // 1000 examples
    REQUIRE(examples.size() == 1000);

    RngStream r1(10), r2(10);
    DatasetSplit s1 = split_dataset(examples, 0.5, 100, r1);
    DatasetSplit s2 = split_dataset(examples, 0.5, 100, r2);
    CHECK(s1.labeled.size() == 450);
    CHECK(s1.unlabeled.size() == 450);
    CHECK(s1.eval.size() == 100);
    CHECK(s1.labeled == s2.labeled);
    CHECK(s1.unlabeled == s2.unlabeled);
    CHECK(s1.eval == s2.eval);
    for (const Example& e : s1.unlabeled) CHECK_FALSE(e.answer.has_value());

    RngStream r3(10);
    DatasetSplit s3 = split_dataset(examples, 1.0, 100, r3);
    CHECK(s3.labeled.size() == 900);
    CHECK(s3.unlabeled.empty());

    RngStream r4(10);
    CHECK_THROWS_AS(split_dataset(examples, 0.4, 100, r4), FractionOutOfRangeError);
    CHECK_THROWS_AS(split_dataset(examples, 0.3, 1000, r4), ConfigError);
}

TEST_CASE("split_dataset partitions cover everything exactly once") {
    RngStream gen(78);
    std::vector<Example> examples = generate_corpus(100, gen);
    RngStream rng(3);
    DatasetSplit split = split_dataset(examples, 0.3, 40, rng);
    size_t total = split.labeled.size() + split.unlabeled.size() + split.eval.size();
    CHECK(total == examples.size());
    std::map<uint64_t, int> by_scene;
    for (const auto* pool : {&split.labeled, &split.unlabeled, &split.eval})
        for (const Example& e : *pool) ++by_scene[e.scene.scene_id];
    for (const auto& [id, count] : by_scene) CHECK(count == 2);  // caption + probe per scene
}

TEST_CASE("dataset serialization round-trips 100 random examples") {
    RngStream gen(55);
    std::vector<Example> examples = generate_corpus(50, gen);
    const std::string path = (std::filesystem::temp_directory_path() / "nb_test_roundtrip.nbds").string();
    serialize_dataset(examples, path);
    const std::vector<Example> loaded = load_dataset(path);
    CHECK(loaded == examples);
    std::filesystem::remove(path);
}

TEST_CASE("dataset load rejects truncation, bad magic and unknown version") {
    RngStream gen(56);
    std::vector<Example> examples = generate_corpus(4, gen);
    const auto tmp = std::filesystem::temp_directory_path();
    const std::string path = (tmp / "nb_test_corrupt.nbds").string();
    serialize_dataset(examples, path);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    const auto write_variant = [&](const std::string& suffix, const std::string& content) {
        std::ofstream out(path + suffix, std::ios::binary);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
    };

    write_variant(".trunc", bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_dataset(path + ".trunc"), CorruptFileError);

    std::string magic = bytes;
    magic[0] = 'X';
    write_variant(".magic", magic);
    CHECK_THROWS_AS(load_dataset(path + ".magic"), CorruptFileError);

    std::string ver = bytes;
    ver[4] = 9;
    write_variant(".ver", ver);
    CHECK_THROWS_AS(load_dataset(path + ".ver"), VersionMismatchError);

    std::string trailing = bytes + "junk";
    write_variant(".trail", trailing);
    CHECK_THROWS_AS(load_dataset(path + ".trail"), CorruptFileError);

    for (const char* suffix : {"", ".trunc", ".magic", ".ver", ".trail"}) std::filesystem::remove(path + suffix);
}

TEST_CASE("generate_corpus is a pure function of the seed") {
    RngStream a(31), b(31);
    CHECK(generate_corpus(20, a) == generate_corpus(20, b));
}

TEST_CASE("ground-truth captions never mention an absent pair") {
    RngStream rng(91);
    for (int i = 0; i < 300; ++i) {
        Scene s = generate_scene(rng);
        const auto parsed = parse_caption(caption_scene(s, vocab), vocab);
        REQUIRE(parsed.has_value());
        for (const auto& claim : parsed->claims) CHECK(s.has_pair(claim.color, claim.shape));
    }
}

TEST_CASE("build_preference_pairs: rejected differs and misdescribes") {
    RngStream gen(61);
    std::vector<Example> examples = generate_corpus(30, gen);
    auto pairs = build_preference_pairs(examples, vocab, RngStream(62));
    REQUIRE(!pairs.empty());
    for (const auto& p : pairs) {
        CHECK_FALSE(p.preferred == p.rejected);
        CHECK(judge_caption(p.scene, p.preferred, vocab) == CaptionCategory::correct);
        CHECK(judge_caption(p.scene, p.rejected, vocab) != CaptionCategory::correct);
    }
}
