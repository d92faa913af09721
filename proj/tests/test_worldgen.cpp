#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "refgame/world.hpp"

using refgame::Rng;
namespace ad = refgame::ad;
namespace world = refgame::world;
using world::ContextType;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "refgame_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

// ---------------------------------------------------------------- rendering

TEST_CASE("a centered red square paints the center pixel pure red") {
    world::ShapeSpec sp;
    sp.color = world::Color::red;
    sp.shape = world::Shape::square;
    sp.x = 16;
    sp.y = 16;
    sp.size = 12;
    auto img = world::render_shape(sp, 32);
    CHECK(img->shape == std::vector<int64_t>{3, 32, 32});
    const int at = 16 * 32 + 16;
    CHECK(img->read(at) == 1.0f);                  // R
    CHECK(img->read(32 * 32 + at) == 0.0f);        // G
    CHECK(img->read(2 * 32 * 32 + at) == 0.0f);    // B
    CHECK(img->read(0) == 0.0f);                   // background stays black
}

TEST_CASE("identical specs render bit-identical images") {
    world::ShapeSpec sp;
    sp.color = world::Color::yellow;
    sp.shape = world::Shape::triangle;
    sp.x = 20;
    sp.y = 14;
    sp.size = 13;
    auto a = world::render_shape(sp, 32);
    auto b = world::render_shape(sp, 32);
    for (int64_t i = 0; i < a->numel(); ++i) CHECK(a->read(i) == b->read(i));
}

TEST_CASE("circle coverage approximates its area") {
    world::ShapeSpec sp;
    sp.color = world::Color::white;
    sp.shape = world::Shape::circle;
    sp.x = 32;
    sp.y = 32;
    sp.size = 28;
    auto img = world::render_shape(sp, 64);
    int64_t lit = 0;
    for (int64_t i = 0; i < 64 * 64; ++i)
        if (img->read(i) > 0.0) ++lit;
    const double r = 14.0;
    const double expected = M_PI * r * r;
    CHECK(std::fabs(lit - expected) / expected < 0.10);
}

TEST_CASE("shapes that stick out of the image are rejected") {
    world::ShapeSpec sp;
    sp.color = world::Color::blue;
    sp.shape = world::Shape::square;
    sp.x = 2;
    sp.y = 16;
    sp.size = 12;
    CHECK_THROWS_AS(world::render_shape(sp, 32), std::runtime_error);
}

TEST_CASE("every shape kind renders some pixels of its own color") {
    for (int s = 0; s < world::kNumShapes; ++s) {
        world::ShapeSpec sp;
        sp.color = world::Color::green;
        sp.shape = static_cast<world::Shape>(s);
        sp.x = 16;
        sp.y = 16;
        sp.size = 14;
        auto img = world::render_shape(sp, 32);
        int64_t lit = 0;
        for (int64_t i = 32 * 32; i < 2 * 32 * 32; ++i)
            if (img->read(i) == 1.0f) ++lit;
        CHECK(lit > 10);
    }
}

// ---------------------------------------------------------------- vocabulary

TEST_CASE("the shapeworld vocabulary has 15 stable tokens with sentinels first") {
    auto v = world::Vocabulary::shapeworld();
    CHECK(v.size() == 15);
    CHECK(v.token(v.bos) == "<s>");
    CHECK(v.token(v.eos) == "</s>");
    CHECK(v.token(v.unk) == "<UNK>");
    CHECK(v.id("red") == 3);
    CHECK(v.id("shape") == 14);
    CHECK(v.id("nonexistent") == v.unk);
    CHECK(world::is_color_token(v, v.id("gray")));
    CHECK(!world::is_color_token(v, v.id("square")));
    CHECK(world::is_shape_token(v, v.id("triangle")));
    CHECK(!world::is_shape_token(v, v.id("shape")));  // the generic word is not a shape name
    CHECK(!world::is_shape_token(v, v.unk));
}

// ---------------------------------------------------------------- game sampling

TEST_CASE("both-needed games share the target's color and shape across distractors") {
    Rng rng(100);
    world::WorldConfig cfg;
    cfg.image_size = 32;
    for (int i = 0; i < 200; ++i) {
        auto g = world::sample_game(rng, ContextType::both_needed, cfg);
        const auto& t = g.specs[static_cast<size_t>(g.target)];
        bool color_shared = false, shape_shared = false;
        for (int k = 0; k < 3; ++k) {
            if (k == g.target) continue;
            const auto& d = g.specs[static_cast<size_t>(k)];
            CHECK(!(d.color == t.color && d.shape == t.shape));
            if (d.color == t.color) color_shared = true;
            if (d.shape == t.shape) shape_shared = true;
        }
        CHECK(color_shared);
        CHECK(shape_shared);
        CHECK(world::context_invariant_holds(g));
    }
}

TEST_CASE("color-sufficient games never repeat the target color") {
    Rng rng(101);
    world::WorldConfig cfg;
    cfg.image_size = 32;
    for (int i = 0; i < 200; ++i) {
        auto g = world::sample_game(rng, ContextType::color_sufficient, cfg);
        const auto& t = g.specs[static_cast<size_t>(g.target)];
        for (int k = 0; k < 3; ++k)
            if (k != g.target) CHECK(g.specs[static_cast<size_t>(k)].color != t.color);
        CHECK(world::context_invariant_holds(g));
    }
}

TEST_CASE("shape-sufficient games never repeat the target shape") {
    Rng rng(102);
    world::WorldConfig cfg;
    cfg.image_size = 32;
    for (int i = 0; i < 200; ++i) {
        auto g = world::sample_game(rng, ContextType::shape_sufficient, cfg);
        const auto& t = g.specs[static_cast<size_t>(g.target)];
        for (int k = 0; k < 3; ++k)
            if (k != g.target) CHECK(g.specs[static_cast<size_t>(k)].shape != t.shape);
        CHECK(world::context_invariant_holds(g));
    }
}

TEST_CASE("the uniform context mix lands near one third each") {
    world::WorldConfig cfg;
    cfg.image_size = 32;
    auto ds = world::generate_shapeworld(10000, {60, 15, 1}, cfg, 7);
    std::array<int, 3> counts{};
    for (const auto& g : ds.games) ++counts[static_cast<size_t>(g.context)];
    for (int c : counts) CHECK(std::fabs(c / 10000.0 - 1.0 / 3.0) < 0.02);
}

TEST_CASE("gold utterances are two tokens naming the target color") {
    Rng rng(103);
    world::WorldConfig cfg;
    cfg.image_size = 32;
    int generic = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto g = world::sample_game(rng, ContextType::both_needed, cfg);
        const auto& t = g.specs[static_cast<size_t>(g.target)];
        REQUIRE(g.gold.size() == 2);
        CHECK(g.gold[0] == world::color_name(t.color));
        if (g.gold[1] == "shape") ++generic;
        else CHECK(g.gold[1] == world::shape_name(t.shape));
    }
    CHECK(std::fabs(generic / static_cast<double>(n) - 0.3) < 0.02);
}

// ---------------------------------------------------------------- splits

TEST_CASE("the full-scale split is 60000/15000/1000") {
    auto s = world::make_splits(76000, {60, 15, 1});
    CHECK(s.train.second - s.train.first == 60000);
    CHECK(s.validation.second - s.validation.first == 15000);
    CHECK(s.test.second - s.test.first == 1000);
}

TEST_CASE("the desk-scale split rounds to 2604/651/45") {
    auto s = world::make_splits(3300, {60, 15, 1});
    CHECK(s.train.second - s.train.first == 2604);
    CHECK(s.validation.second - s.validation.first == 651);
    CHECK(s.test.second - s.test.first == 45);
}

TEST_CASE("train thirds tile the train split exactly") {
    for (int64_t n : {3300, 340, 76000, 61}) {
        auto s = world::make_splits(n, {60, 15, 1});
        CHECK(s.thirds[0].first == s.train.first);
        CHECK(s.thirds[0].second == s.thirds[1].first);
        CHECK(s.thirds[1].second == s.thirds[2].first);
        CHECK(s.thirds[2].second == s.train.second);
        const int64_t third = (s.train.second - s.train.first) / 3;
        for (const auto& t : s.thirds) CHECK(t.second - t.first == third);
        CHECK(s.train.second == s.validation.first);
        CHECK(s.validation.second == s.test.first);
        CHECK(s.test.second == n);
    }
}

TEST_CASE("too few games for a split is an error") {
    CHECK_THROWS_AS(world::make_splits(59, {60, 15, 1}), std::runtime_error);
    CHECK_THROWS_AS(world::make_splits(100, {60, 0, 1}), std::runtime_error);
}

// ---------------------------------------------------------------- determinism

TEST_CASE("dataset generation is bit-identical for a fixed seed") {
    world::WorldConfig cfg;
    cfg.image_size = 32;
    auto a = world::generate_shapeworld(100, {60, 15, 1}, cfg, 42);
    auto b = world::generate_shapeworld(100, {60, 15, 1}, cfg, 42);
    for (size_t i = 0; i < a.games.size(); ++i) {
        for (size_t k = 0; k < 3; ++k) {
            CHECK(a.games[i].specs[k].color == b.games[i].specs[k].color);
            CHECK(a.games[i].specs[k].shape == b.games[i].specs[k].shape);
            CHECK(a.games[i].specs[k].x == b.games[i].specs[k].x);
            CHECK(a.games[i].specs[k].y == b.games[i].specs[k].y);
            CHECK(a.games[i].specs[k].size == b.games[i].specs[k].size);
        }
        CHECK(a.games[i].target == b.games[i].target);
        CHECK(a.games[i].gold == b.games[i].gold);
    }
    auto c = world::generate_shapeworld(100, {60, 15, 1}, cfg, 43);
    bool any_diff = false;
    for (size_t i = 0; i < c.games.size() && !any_diff; ++i)
        any_diff = c.games[i].target != a.games[i].target || c.games[i].gold != a.games[i].gold;
    CHECK(any_diff);
}

// ---------------------------------------------------------------- holdouts

TEST_CASE("holding out red keeps red targets to the test block") {
    world::WorldConfig cfg;
    cfg.image_size = 32;
    auto h = world::parse_holdout("red");
    auto ds = world::make_heldout_dataset(h, 10000, 300, {80, 20, 0}, cfg, 11);
    for (int64_t i = 0; i < 10000; ++i) {
        const auto& g = ds.games[static_cast<size_t>(i)];
        CHECK(g.specs[static_cast<size_t>(g.target)].color != world::Color::red);
    }
    for (int64_t i = 10000; i < 10300; ++i) {
        const auto& g = ds.games[static_cast<size_t>(i)];
        CHECK(g.specs[static_cast<size_t>(g.target)].color == world::Color::red);
    }
    CHECK(ds.splits.test.first == 10000);
    CHECK(ds.splits.test.second == 10300);
}

TEST_CASE("combo holdouts exclude pairs, not their parts") {
    world::WorldConfig cfg;
    cfg.image_size = 32;
    auto h = world::parse_holdout("combos");
    auto ds = world::make_heldout_dataset(h, 4000, 200, {80, 20, 0}, cfg, 12);
    bool saw_red_target = false, saw_circle_target = false;
    for (int64_t i = 0; i < 4000; ++i) {
        const auto& g = ds.games[static_cast<size_t>(i)];
        const auto& t = g.specs[static_cast<size_t>(g.target)];
        CHECK(!h.excludes(t.color, t.shape));
        if (t.color == world::Color::red) saw_red_target = true;
        if (t.shape == world::Shape::circle) saw_circle_target = true;
    }
    CHECK(saw_red_target);
    CHECK(saw_circle_target);
    for (int64_t i = 4000; i < 4200; ++i) {
        const auto& g = ds.games[static_cast<size_t>(i)];
        const auto& t = g.specs[static_cast<size_t>(g.target)];
        CHECK(h.excludes(t.color, t.shape));
    }
}

TEST_CASE("holdout names parse and bad ones do not") {
    CHECK(world::parse_holdout("square").kind == world::Holdout::Kind::shape);
    CHECK(world::parse_holdout("gray").kind == world::Holdout::Kind::color);
    CHECK_THROWS_AS(world::parse_holdout("mauve"), std::runtime_error);
}

// ---------------------------------------------------------------- colors corpus

namespace {

std::filesystem::path write_colors_fixture() {
    auto path = temp_path("colors_fixture.ndjson");
    std::ofstream out(path);
    Rng rng(55);
    for (int i = 0; i < 90; ++i) {
        const int r = static_cast<int>(rng.below(256));
        const char* cond = i % 3 == 0 ? "close" : (i % 3 == 1 ? "far" : "split");
        const char* text = i % 2 == 0 ? "The Bright one" : "darker blue one";
        out << "{\"rgb\": [[" << r << ",10,20],[30,40,50],[60,70,80]], \"target\": " << i % 3
            << ", \"condition\": \"" << cond << "\", \"text\": \"" << (i == 0 ? "zzqx one" : text)
            << "\"}\n";
    }
    return path;
}

}  // namespace

TEST_CASE("colors records become solid-patch games with lowercased tokens") {
    auto path = temp_path("colors_single.ndjson");
    {
        std::ofstream out(path);
        for (int i = 0; i < 60; ++i)
            out << R"({"rgb": [[255,0,0],[0,255,0],[0,0,255]], "target": 0, "condition": "far", )"
                << R"("text": "The Red one"})" << "\n";
    }
    auto ds = world::ingest_colors(path.string(), 1, {60, 15, 1}, 16);
    REQUIRE(ds.games.size() == 60);
    const auto& g = ds.games[0];
    CHECK(g.kind == world::GameKind::colors);
    CHECK(g.rgb[0][0] == 1.0f);
    CHECK(g.rgb[0][1] == 0.0f);
    CHECK(g.gold == std::vector<std::string>{"the", "red", "one"});
    auto img = world::render_game(g, 16);
    CHECK(img->read(0) == 1.0f);                       // image 0, R channel
    CHECK(img->read(16 * 16) == 0.0f);                 // image 0, G channel
    CHECK(img->read(3 * 16 * 16 + 16 * 16) == 1.0f);   // image 1, G channel
}

TEST_CASE("rare tokens fall below the threshold and map to <UNK>") {
    auto path = write_colors_fixture();
    auto ds = world::ingest_colors(path.string(), 2, {60, 15, 1}, 16);
    CHECK(ds.vocab.id("zzqx") == ds.vocab.unk);   // appears once in train
    CHECK(ds.vocab.id("one") != ds.vocab.unk);    // appears everywhere
    auto ids = ds.vocab.encode(ds.games[0].gold);
    CHECK(ids[0] == ds.vocab.unk);
}

TEST_CASE("malformed colors records fail with their line number") {
    auto path = temp_path("colors_bad.ndjson");
    {
        std::ofstream out(path);
        out << R"({"rgb": [[1,2,3],[4,5,6],[7,8,9]], "target": 0, "condition": "far", "text": "ok"})"
            << "\n";
        out << "this is not json\n";
    }
    CHECK_THROWS_WITH_AS(world::ingest_colors(path.string(), 1, {60, 15, 1}, 16),
                         doctest::Contains("line 2"), std::runtime_error);

    auto path2 = temp_path("colors_badcond.ndjson");
    {
        std::ofstream out(path2);
        out << R"({"rgb": [[1,2,3],[4,5,6],[7,8,9]], "target": 0, "condition": "medium", "text": "x"})"
            << "\n";
    }
    CHECK_THROWS_WITH_AS(world::ingest_colors(path2.string(), 1, {60, 15, 1}, 16),
                         doctest::Contains("condition"), std::runtime_error);
}

// ---------------------------------------------------------------- files

TEST_CASE("datasets survive a save/load round trip") {
    world::WorldConfig cfg;
    cfg.image_size = 32;
    auto ds = world::generate_shapeworld(80, {60, 15, 1}, cfg, 9);
    auto dir = temp_path("ds_roundtrip");
    std::filesystem::create_directories(dir);
    world::save_dataset(ds, dir.string());
    auto back = world::load_dataset(dir.string());
    CHECK(back.kind == ds.kind);
    CHECK(back.image_size == ds.image_size);
    CHECK(back.vocab.tokens == ds.vocab.tokens);
    CHECK(back.splits.train == ds.splits.train);
    CHECK(back.splits.thirds[1] == ds.splits.thirds[1]);
    REQUIRE(back.games.size() == ds.games.size());
    for (size_t i = 0; i < ds.games.size(); ++i) {
        CHECK(back.games[i].target == ds.games[i].target);
        CHECK(back.games[i].context == ds.games[i].context);
        CHECK(back.games[i].gold == ds.games[i].gold);
        for (size_t k = 0; k < 3; ++k) {
            CHECK(back.games[i].specs[k].color == ds.games[i].specs[k].color);
            CHECK(back.games[i].specs[k].x == ds.games[i].specs[k].x);
            CHECK(back.games[i].specs[k].size == ds.games[i].specs[k].size);
        }
    }
}

TEST_CASE("render cache files round trip and reject corruption") {
    world::ShapeSpec sp;
    sp.color = world::Color::blue;
    sp.shape = world::Shape::ellipse;
    sp.x = 16;
    sp.y = 16;
    sp.size = 12;
    std::vector<ad::TensorPtr> tensors = {world::render_shape(sp, 32), ad::full({2, 3}, 0.25)};
    // full() makes an F64 tensor by default; cache files hold F32 only
    tensors[1] = ad::make_tensor({2, 3}, ad::Dtype::F32, false);
    for (int64_t i = 0; i < 6; ++i) tensors[1]->write(i, 0.25 * static_cast<double>(i));

    auto path = temp_path("render_cache.bin");
    world::save_render_cache(path.string(), tensors);
    auto back = world::load_render_cache(path.string());
    REQUIRE(back.size() == 2);
    CHECK(back[0]->shape == tensors[0]->shape);
    for (int64_t i = 0; i < tensors[0]->numel(); ++i) CHECK(back[0]->read(i) == tensors[0]->read(i));
    CHECK(back[1]->read(5) == 1.25);

    auto bad = temp_path("render_cache_trunc.bin");
    {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
        std::ofstream out(bad, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(world::load_render_cache(bad.string()), std::runtime_error);
}

TEST_CASE("the in-memory render cache returns the same tensor object") {
    world::WorldConfig cfg;
    cfg.image_size = 32;
    auto ds = world::generate_shapeworld(70, {60, 15, 1}, cfg, 5);
    world::RenderCache cache(&ds);
    const auto& a = cache.game_images(3);
    const auto& b = cache.game_images(3);
    CHECK(a.get() == b.get());
    CHECK(a->shape == std::vector<int64_t>{3, 3, 32, 32});
}
