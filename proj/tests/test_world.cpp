#include <pelletworld/grid.hpp>
#include <pelletworld/oracle.hpp>
#include <pelletworld/render.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

using namespace pelletworld;
using env::Action;

namespace {

// small bordered grid with everything placed explicitly
env::GridSpec tiny_spec(int width = 5, int height = 5)
{
    env::GridSpec g;
    g.width = width;
    g.height = height;
    g.walls = env::border_walls(width, height);
    g.agent_cell = g.cell(2, 2);
    g.pellets.clear();
    g.cherries.clear();
    g.ghost_enabled = false;
    return g;
}

} // namespace

TEST_CASE("reset is deterministic and spec-driven")
{
    auto spec = env::default_grid(true);
    auto a = env::reset(spec, 1);
    auto b = env::reset(spec, 99);
    REQUIRE(a == b);
    REQUIRE(a.items_remaining() == spec.item_count());
    REQUIRE(a.agent == spec.agent_cell);
    REQUIRE(a.ghost == spec.ghost_cell);
    REQUIRE_FALSE(a.terminal);
}

TEST_CASE("invalid specs are rejected with cell coordinates")
{
    auto spec = tiny_spec();
    spec.agent_cell = spec.cell(0, 2); // border wall
    REQUIRE_THROWS_WITH(env::reset(spec), Catch::Matchers::ContainsSubstring("(0,2)"));

    spec = tiny_spec();
    spec.pellets = {spec.cell(1, 1), spec.cell(1, 1)};
    REQUIRE_THROWS_WITH(env::reset(spec), Catch::Matchers::ContainsSubstring("duplicate"));

    spec = tiny_spec();
    spec.ghost_enabled = true;
    spec.ghost_cell = spec.cell(2, 2); // on agent
    REQUIRE_THROWS_AS(env::reset(spec), std::invalid_argument);

    spec = tiny_spec();
    spec.max_abs_reward = 2.0f; // smaller than |ghost| entry
    REQUIRE_THROWS_WITH(env::reset(spec), Catch::Matchers::ContainsSubstring("max_abs_reward"));
}

TEST_CASE("walking into a wall leaves the agent in place with zero reward")
{
    auto spec = tiny_spec();
    spec.agent_cell = spec.cell(1, 2);
    auto s = env::reset(spec);
    auto out = env::step(spec, s, Action::Up);
    REQUIRE(out.state.agent == s.agent);
    REQUIRE(out.reward_raw == 0.0f);
    REQUIRE_FALSE(out.terminal);
}

TEST_CASE("entering a pellet cell removes it and pays the pellet reward")
{
    auto spec = tiny_spec();
    spec.agent_cell = spec.cell(2, 2);
    spec.pellets = {spec.cell(2, 3), spec.cell(1, 1)};
    auto s = env::reset(spec);
    auto out = env::step(spec, s, Action::Right);
    REQUIRE(out.reward_raw == 1.0f);
    REQUIRE(out.state.items_remaining() == 1);
    REQUIRE_FALSE(out.state.item_present(0));
    REQUIRE_FALSE(out.terminal);
}

TEST_CASE("consuming the final item pays the clear bonus and terminates")
{
    auto spec = tiny_spec();
    spec.agent_cell = spec.cell(2, 2);
    spec.cherries = {spec.cell(2, 1)};
    auto s = env::reset(spec);
    auto out = env::step(spec, s, Action::Left);
    REQUIRE(out.reward_raw == 5.0f + 10.0f);
    REQUIRE(out.terminal);
    REQUIRE_THROWS_AS(env::step(spec, out.state, Action::Left), std::invalid_argument);
}

TEST_CASE("an item-less grid never pays the clear bonus")
{
    auto spec = tiny_spec();
    auto s = env::reset(spec);
    auto out = env::step(spec, s, Action::Right);
    REQUIRE(out.reward_raw == 0.0f);
    REQUIRE_FALSE(out.terminal);
}

TEST_CASE("stepping into the ghost terminates with the ghost penalty")
{
    auto spec = tiny_spec();
    spec.agent_cell = spec.cell(2, 2);
    spec.ghost_enabled = true;
    spec.ghost_cell = spec.cell(2, 3);
    spec.pellets = {spec.cell(2, 3 - 2)}; // keep a pellet elsewhere so no clear fires
    auto s = env::reset(spec);
    auto out = env::step(spec, s, Action::Right);
    REQUIRE(out.terminal);
    REQUIRE(out.reward_raw == -10.0f);
    // preempted: the pellet is untouched and the ghost never moved
    REQUIRE(out.state.items_remaining() == 1);
    REQUIRE(out.state.ghost == spec.ghost_cell);
}

TEST_CASE("ghost chase policy: distance, tie-break, phase")
{
    auto spec = tiny_spec(7, 7);
    spec.ghost_enabled = true;
    spec.agent_cell = spec.cell(1, 1);
    spec.ghost_cell = spec.cell(3, 3);
    auto s = env::reset(spec);

    SECTION("equidistant up/left ties break to up")
    {
        auto mv = env::ghost_policy(spec, s);
        REQUIRE(mv.has_value());
        REQUIRE(*mv == Action::Up);
    }

    SECTION("odd phase holds")
    {
        s.ghost_phase = 1;
        REQUIRE_FALSE(env::ghost_policy(spec, s).has_value());
    }

    SECTION("adjacent ghost on its move phase steps onto the agent")
    {
        s.ghost = spec.cell(1, 2);
        auto mv = env::ghost_policy(spec, s);
        REQUIRE(mv.has_value());
        REQUIRE(*mv == Action::Left);
        auto out = env::step(spec, s, Action::Down);
        // chase targets the agent's post-move cell; the left/down tie breaks left
        REQUIRE(out.state.ghost == env::detail::neighbor(spec, spec.cell(1, 2), Action::Left));
    }

    SECTION("disabled ghost rejects the policy query")
    {
        auto plain = tiny_spec();
        auto ps = env::reset(plain);
        REQUIRE_THROWS_AS(env::ghost_policy(plain, ps), std::invalid_argument);
    }
}

TEST_CASE("ghost moves only every other step")
{
    auto spec = tiny_spec(9, 9);
    spec.ghost_enabled = true;
    spec.agent_cell = spec.cell(1, 1);
    spec.ghost_cell = spec.cell(7, 7);
    auto s = env::reset(spec);
    auto o1 = env::step(spec, s, Action::Right); // phase 0: ghost moves
    REQUIRE(o1.state.ghost != s.ghost);
    auto o2 = env::step(spec, o1.state, Action::Left); // phase 1: holds
    REQUIRE(o2.state.ghost == o1.state.ghost);
    auto o3 = env::step(spec, o2.state, Action::Right); // phase 0 again
    REQUIRE(o3.state.ghost != o2.state.ghost);
}

TEST_CASE("swap-through collisions are caught")
{
    auto spec = tiny_spec(7, 7);
    spec.ghost_enabled = true;
    spec.agent_cell = spec.cell(1, 2);
    spec.ghost_cell = spec.cell(1, 3);
    spec.pellets = {spec.cell(5, 5)};
    auto s = env::reset(spec);
    // agent steps right into the ghost's cell: immediate collision
    auto out = env::step(spec, s, Action::Right);
    REQUIRE(out.terminal);
    REQUIRE(out.reward_raw == -10.0f);
}

TEST_CASE("episodes replay bitwise-identically from a seed and action list")
{
    auto spec = env::default_grid(true);
    std::mt19937_64 rng(42);
    std::vector<Action> script;
    for (int i = 0; i < 200; ++i) script.push_back(static_cast<Action>(rng() % 4));

    auto run = [&] {
        std::vector<env::GameState> tape;
        std::vector<float> rewards;
        auto s = env::reset(spec, 7);
        for (Action a : script) {
            if (s.terminal) break;
            auto out = env::step(spec, s, a);
            tape.push_back(out.state);
            rewards.push_back(out.reward_raw);
            s = out.state;
        }
        return std::pair(tape, rewards);
    };
    auto r1 = run();
    auto r2 = run();
    REQUIRE(r1.first == r2.first);
    REQUIRE(r1.second == r2.second);
}

TEST_CASE("random walks keep geometry and reward closure invariants")
{
    auto spec = env::default_grid(true);
    // every reward a step can emit: sums of co-occurring event rewards
    const std::set<float> closure = {0.0f, 1.0f, 5.0f, -10.0f, -9.0f, -5.0f, 11.0f, 15.0f, 16.0f};
    std::mt19937_64 rng(99);
    for (int ep = 0; ep < 40; ++ep) {
        auto s = env::reset(spec);
        int prev_items = s.items_remaining();
        for (int t = 0; t < 300 && !s.terminal; ++t) {
            auto out = env::step(spec, s, static_cast<Action>(rng() % 4));
            REQUIRE_FALSE(spec.is_wall(out.state.agent));
            REQUIRE_FALSE(spec.is_wall(out.state.ghost));
            REQUIRE(out.state.items_remaining() <= prev_items);
            REQUIRE(closure.count(out.reward_raw) == 1);
            prev_items = out.state.items_remaining();
            s = out.state;
        }
    }
}

TEST_CASE("rendering: dimensions, purity, background")
{
    auto spec = env::default_grid(true);
    auto s = env::reset(spec);

    auto f = env::render(spec, s);
    REQUIRE(f.h == 80);
    REQUIRE(f.w == 80);
    REQUIRE(f.rgb.size() == 80u * 80u * 3u);

    auto f2 = env::render(spec, s);
    REQUIRE(f == f2);

    auto bg = env::render_background(spec);
    for (int y = 0; y < bg.h; ++y)
        for (int x = 0; x < bg.w; ++x) {
            bool wall = spec.is_wall(spec.cell(y / 8, x / 8));
            const auto* p = bg.px(y, x);
            if (wall) {
                REQUIRE(p[0] == env::kWallColor.r);
            } else {
                REQUIRE(p[0] == 0);
                REQUIRE(p[1] == 0);
                REQUIRE(p[2] == 0);
            }
        }
}

TEST_CASE("sprites land at exact tile coordinates")
{
    auto spec = env::default_grid(false);
    auto s = env::reset(spec);
    auto f = env::render(spec, s);

    int ar = spec.row_of(s.agent), ac = spec.col_of(s.agent);
    // agent block starts 1 px inside its tile
    const auto* p = f.px(ar * 8 + 1, ac * 8 + 1);
    REQUIRE(p[0] == env::kAgentColor.r);
    REQUIRE(p[1] == env::kAgentColor.g);
    // tile margin stays black
    const auto* m = f.px(ar * 8, ac * 8);
    REQUIRE(m[0] == 0);

    // pellet dot is the center 2x2 of its tile
    int pc = spec.pellets[0];
    const auto* q = f.px(spec.row_of(pc) * 8 + 3, spec.col_of(pc) * 8 + 3);
    REQUIRE(q[0] == env::kPelletColor.r);
}

TEST_CASE("ghost covers the agent in the visible-entity list only when they collide")
{
    auto spec = env::default_grid(true);
    auto s = env::reset(spec);
    auto ents = env::visible_entities(spec, s);
    int agents = 0, ghosts = 0;
    for (auto& e : ents) {
        agents += e.type_id == env::kAgentType;
        ghosts += e.type_id == env::kGhostType;
    }
    REQUIRE(agents == 1);
    REQUIRE(ghosts == 1);
    REQUIRE(ents.size() == static_cast<std::size_t>(spec.item_count() + 2));

    s.ghost = s.agent;
    auto collided = env::visible_entities(spec, s);
    REQUIRE(collided.size() == static_cast<std::size_t>(spec.item_count() + 1));
}

TEST_CASE("oracle: single adjacent pellet with no clear bonus values at 0.1")
{
    auto spec = tiny_spec();
    spec.agent_cell = spec.cell(2, 2);
    spec.pellets = {spec.cell(2, 3)};
    spec.rewards.clear = 0.0f;
    auto oracle = env::value_iteration_oracle(spec, 0.99, 1e-10);
    REQUIRE_THAT(oracle.v_start(), Catch::Matchers::WithinAbs(0.1, 1e-9));
    REQUIRE(oracle.greedy[0] == Action::Right);
}

TEST_CASE("oracle: gamma zero collapses to the best immediate reward")
{
    auto spec = tiny_spec();
    spec.agent_cell = spec.cell(2, 2);
    spec.pellets = {spec.cell(2, 3)};
    spec.cherries = {spec.cell(2, 1)};
    auto oracle = env::value_iteration_oracle(spec, 0.0, 1e-12);
    // cherry left of the agent: 5 raw, normalized 0.5 (no clear: pellet remains)
    REQUIRE_THAT(oracle.v_start(), Catch::Matchers::WithinAbs(0.5, 1e-12));
    REQUIRE(oracle.greedy[0] == Action::Left);
}

TEST_CASE("oracle: no rewards anywhere means zero value everywhere")
{
    auto spec = tiny_spec();
    auto oracle = env::value_iteration_oracle(spec, 0.9, 1e-10);
    for (double v : oracle.values) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.0, 1e-9));
}

TEST_CASE("oracle: greedy rollout achieves the computed start value")
{
    auto spec = env::default_grid(false);
    auto oracle = env::value_iteration_oracle(spec, 0.99, 1e-10);
    REQUIRE(oracle.v_start() > 0.0);

    // replay the greedy policy and accumulate the discounted normalized return
    auto s = env::reset(spec);
    double ret = 0.0, disc = 1.0;
    for (int t = 0; t < 10'000 && !s.terminal; ++t) {
        auto key = s;
        key.step_count = 0;
        int idx = -1;
        for (std::size_t i = 0; i < oracle.states.size(); ++i)
            if (oracle.states[i] == key) {
                idx = static_cast<int>(i);
                break;
            }
        REQUIRE(idx >= 0);
        auto out = env::step(spec, s, oracle.greedy[idx]);
        ret += disc * std::clamp(static_cast<double>(out.reward_raw) / spec.max_abs_reward, -1.0, 1.0);
        disc *= 0.99;
        s = out.state;
    }
    REQUIRE(s.terminal);
    REQUIRE_THAT(ret, Catch::Matchers::WithinAbs(oracle.v_start(), 1e-6));
}

TEST_CASE("oracle rejects bad discount factors and state-space overflow")
{
    auto spec = tiny_spec();
    REQUIRE_THROWS_AS(env::value_iteration_oracle(spec, 1.0, 1e-8), std::invalid_argument);
    REQUIRE_THROWS_AS(env::value_iteration_oracle(spec, -0.1, 1e-8), std::invalid_argument);

    auto big = env::default_grid(true);
    REQUIRE_THROWS_WITH(env::value_iteration_oracle(big, 0.9, 1e-6, 100),
                        Catch::Matchers::ContainsSubstring("100"));
}
