#include <pelletworld/objrec.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

using namespace pelletworld;
using env::Frame;
using objrec::Detection;

namespace {

Frame black_frame(int h, int w) { return Frame(h, w); }

void paste(Frame& f, const Frame& tile, int y, int x)
{
    for (int ty = 0; ty < tile.h; ++ty)
        for (int tx = 0; tx < tile.w; ++tx) {
            const auto* s = tile.px(ty, tx);
            auto* d = f.px(y + ty, x + tx);
            d[0] = s[0];
            d[1] = s[1];
            d[2] = s[2];
        }
}

// brute-force oracle: every placement whose pixels equal the template exactly
std::vector<std::pair<int, int>> exact_matches(const Frame& f, const Frame& t)
{
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y + t.h <= f.h; ++y)
        for (int x = 0; x + t.w <= f.w; ++x) {
            bool eq = true;
            for (int ty = 0; ty < t.h && eq; ++ty)
                for (int tx = 0; tx < t.w && eq; ++tx) {
                    const auto* a = f.px(y + ty, x + tx);
                    const auto* b = t.px(ty, tx);
                    eq = a[0] == b[0] && a[1] == b[1] && a[2] == b[2];
                }
            if (eq) out.push_back({x, y});
        }
    return out;
}

} // namespace

TEST_CASE("whole-frame template self-matches at the origin with score 1")
{
    auto tset = objrec::canonical_templates();
    auto spec = env::default_grid(true);
    auto frame = env::render(spec, env::reset(spec));
    objrec::Template whole{0, "whole", frame};
    auto dets = objrec::match_template(frame, whole, 0.99f);
    REQUIRE(dets.size() == 1);
    REQUIRE(dets[0].x == 0);
    REQUIRE(dets[0].y == 0);
    REQUIRE(dets[0].score == 1.0f);
}

TEST_CASE("sprite pasted on black is found exactly where the brute-force oracle says")
{
    auto tmpl = objrec::canonical_templates().templates[env::kGhostType];
    auto f = black_frame(64, 64);
    paste(f, tmpl.image, 24, 16);

    auto oracle = exact_matches(f, tmpl.image);
    REQUIRE(oracle.size() == 1);
    REQUIRE(oracle[0] == std::pair(16, 24));

    auto dets = objrec::match_template(f, tmpl, 0.95f);
    REQUIRE(dets.size() == 1);
    REQUIRE(dets[0].x == 16);
    REQUIRE(dets[0].y == 24);
    REQUIRE(dets[0].score >= 0.999f);
}

TEST_CASE("a threshold above the global maximum yields nothing")
{
    // a frame holding only an agent sprite, probed with the cherry template:
    // the shapes differ, so no placement reaches a score of 1
    auto tset = objrec::canonical_templates();
    auto f = black_frame(40, 40);
    paste(f, tset.templates[env::kAgentType].image, 10, 10);
    auto all = objrec::match_template(f, tset.templates[env::kCherryType], 0.01f);
    float best = 0.0f;
    for (const auto& d : all) best = std::max(best, d.score);
    REQUIRE(best < 1.0f);
    REQUIRE(objrec::match_template(f, tset.templates[env::kCherryType], 1.0f).empty());
}

TEST_CASE("correlation is invariant to uniform intensity scaling")
{
    // a dimmed sprite still scores 1.0: the metric is zero-normalized
    auto tmpl = objrec::canonical_templates().templates[env::kPelletType];
    auto f = black_frame(40, 40);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            const auto* s = tmpl.image.px(y, x);
            for (int c = 0; c < 3; ++c) f.px(10 + y, 10 + x)[c] = s[c] / 2;
        }
    auto dets = objrec::match_template(f, tmpl, 0.999f);
    REQUIRE(dets.size() == 1);
    REQUIRE(dets[0].x == 10);
    REQUIRE(dets[0].y == 10);
}

TEST_CASE("flat-patch and flat-template degeneracy rules")
{
    // flat gray template matches only the exactly-equal flat region
    Frame gray(4, 4);
    for (auto& v : gray.rgb) v = 77;
    objrec::Template flat{0, "flat", gray};

    auto f = black_frame(16, 16);
    for (int y = 4; y < 8; ++y)
        for (int x = 4; x < 8; ++x)
            f.set(y, x, {77, 77, 77});
    auto dets = objrec::match_template(f, flat, 0.9f);
    REQUIRE(dets.size() == 1);
    REQUIRE(dets[0].x == 4);
    REQUIRE(dets[0].y == 4);
    REQUIRE(dets[0].score == 1.0f);

    // flat patches never match a structured template
    auto tmpl = objrec::canonical_templates().templates[env::kAgentType];
    auto allblack = black_frame(32, 32);
    REQUIRE(objrec::match_template(allblack, tmpl, 0.01f).empty());
}

TEST_CASE("template larger than the frame is rejected")
{
    auto tmpl = objrec::canonical_templates().templates[env::kAgentType];
    auto f = black_frame(4, 4);
    REQUIRE_THROWS_AS(objrec::match_template(f, tmpl, 0.9f), std::invalid_argument);
    REQUIRE_THROWS_AS(objrec::match_template(black_frame(32, 32), tmpl, 0.0f), std::invalid_argument);
}

TEST_CASE("canonical sprites are mutually distinguishable under correlation")
{
    auto tset = objrec::canonical_templates();
    for (const auto& a : tset.templates) {
        Frame f = black_frame(8, 8);
        paste(f, a.image, 0, 0);
        for (const auto& b : tset.templates) {
            auto dets = objrec::match_template(f, b, 0.01f);
            float best = -1.0f;
            for (const auto& d : dets) best = std::max(best, d.score);
            if (a.type_id == b.type_id) {
                REQUIRE(best == 1.0f);
            } else {
                INFO(a.name << " vs " << b.name << " scored " << best);
                REQUIRE(best < 0.9f);
            }
        }
    }
}

TEST_CASE("non-max suppression keeps the right boxes")
{
    SECTION("empty in, empty out")
    {
        REQUIRE(objrec::non_max_suppression({}, 0.3f).empty());
    }
    SECTION("two identical boxes collapse to one")
    {
        Detection d{1, 4, 4, 8, 8, 0.97f};
        auto kept = objrec::non_max_suppression({d, d}, 0.3f);
        REQUIRE(kept.size() == 1);
    }
    SECTION("disjoint boxes both survive; order is by descending score")
    {
        Detection a{1, 0, 0, 8, 8, 0.96f};
        Detection b{1, 20, 0, 8, 8, 0.99f};
        auto kept = objrec::non_max_suppression({a, b}, 0.0f);
        REQUIRE(kept.size() == 2);
        REQUIRE(kept[0].x == 20);
    }
    SECTION("different types never suppress each other")
    {
        Detection a{0, 0, 0, 8, 8, 0.99f};
        Detection b{1, 0, 0, 8, 8, 0.95f};
        REQUIRE(objrec::non_max_suppression({a, b}, 0.1f).size() == 2);
    }
    SECTION("bad threshold rejected")
    {
        REQUIRE_THROWS_AS(objrec::non_max_suppression({}, 1.0f), std::invalid_argument);
    }
}

TEST_CASE("detect_all on rendered states reproduces the renderer's entity list")
{
    auto spec = env::default_grid(true);
    auto tset = objrec::canonical_templates();
    std::mt19937_64 rng(5);
    int states_checked = 0;
    for (int ep = 0; ep < 8 && states_checked < 25; ++ep) {
        auto s = env::reset(spec);
        for (int t = 0; t < 40 && !s.terminal; ++t) {
            s = env::step(spec, s, static_cast<env::Action>(rng() % 4)).state;
            if (s.terminal) break;
            auto frame = env::render(spec, s);
            auto dets = objrec::detect_all(frame, tset);

            std::set<std::tuple<int, int, int>> expect;
            for (const auto& e : env::visible_entities(spec, s))
                expect.insert({e.type_id, spec.col_of(e.cell) * 8, spec.row_of(e.cell) * 8});
            std::set<std::tuple<int, int, int>> got;
            for (const auto& d : dets) got.insert({d.type_id, d.x, d.y});

            REQUIRE(got == expect);
            ++states_checked;
        }
    }
    REQUIRE(states_checked >= 25);
}

TEST_CASE("all-black frame produces no detections")
{
    auto tset = objrec::canonical_templates();
    REQUIRE(objrec::detect_all(black_frame(80, 80), tset).empty());
}

TEST_CASE("translation equivariance of detection positions")
{
    auto tmpl = objrec::canonical_templates().templates[env::kCherryType];
    auto base = black_frame(48, 48);
    paste(base, tmpl.image, 8, 8);
    auto moved = black_frame(48, 48);
    paste(moved, tmpl.image, 8 + 5, 8 + 3);

    auto d0 = objrec::match_template(base, tmpl, 0.95f);
    auto d1 = objrec::match_template(moved, tmpl, 0.95f);
    REQUIRE(d0.size() == 1);
    REQUIRE(d1.size() == 1);
    REQUIRE(d1[0].x - d0[0].x == 3);
    REQUIRE(d1[0].y - d0[0].y == 5);
}

TEST_CASE("object channels are binary unions of same-type boxes")
{
    SECTION("no detections: all planes zero")
    {
        auto oc = objrec::encode_object_channels(16, 16, {}, 3);
        REQUIRE(oc.ones() == 0);
        REQUIRE(oc.planes.size() == 3u * 16 * 16);
    }
    SECTION("one 8x8 box lights exactly 64 cells of its own plane")
    {
        std::vector<Detection> dets = {{2, 4, 6, 8, 8, 1.0f}};
        auto oc = objrec::encode_object_channels(32, 32, dets, 4);
        REQUIRE(oc.ones() == 64);
        REQUIRE(oc.at(2, 6, 4) == 1);
        REQUIRE(oc.at(2, 13, 11) == 1);
        REQUIRE(oc.at(2, 14, 4) == 0);
        REQUIRE(oc.at(1, 6, 4) == 0);
    }
    SECTION("overlapping same-type boxes count pixels once")
    {
        std::vector<Detection> dets = {{0, 0, 0, 8, 8, 1.0f}, {0, 4, 0, 8, 8, 0.9f}};
        auto oc = objrec::encode_object_channels(16, 16, dets, 1);
        REQUIRE(oc.ones() == 8 * 12);
        for (auto v : oc.planes) REQUIRE((v == 0 || v == 1));
    }
    SECTION("type_id out of range is rejected")
    {
        std::vector<Detection> dets = {{3, 0, 0, 8, 8, 1.0f}};
        REQUIRE_THROWS_AS(objrec::encode_object_channels(16, 16, dets, 3), std::invalid_argument);
    }
}
