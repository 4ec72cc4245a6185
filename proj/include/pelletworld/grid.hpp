#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pelletworld::env {

enum class Action : int { Up = 0, Down = 1, Left = 2, Right = 3 };
inline constexpr int kNumActions = 4;

inline const char* action_name(Action a)
{
    switch (a) {
    case Action::Up: return "up";
    case Action::Down: return "down";
    case Action::Left: return "left";
    case Action::Right: return "right";
    }
    return "?";
}

inline std::optional<Action> action_from_name(std::string_view s)
{
    if (s == "up") return Action::Up;
    if (s == "down") return Action::Down;
    if (s == "left") return Action::Left;
    if (s == "right") return Action::Right;
    return std::nullopt;
}

// Raw reward units; normalization to [-1,1] happens on the agent side.
struct RewardTable {
    float pellet = 1.0f;
    float cherry = 5.0f;
    float ghost = -10.0f;
    float clear = 10.0f;
    float step = 0.0f;
};

struct GridSpec {
    int width = 10, height = 10;
    int tile_size = 8;
    std::vector<std::uint8_t> walls; // row-major width*height, 1 = wall
    int agent_cell = 0;
    std::vector<int> pellets;
    std::vector<int> cherries;
    int ghost_cell = -1;
    bool ghost_enabled = false;
    RewardTable rewards;
    float max_abs_reward = 10.0f;

    int cell(int r, int c) const { return r * width + c; }
    int row_of(int cell) const { return cell / width; }
    int col_of(int cell) const { return cell % width; }
    bool in_bounds(int cell) const { return cell >= 0 && cell < width * height; }
    bool is_wall(int cell) const { return walls[static_cast<std::size_t>(cell)] != 0; }

    int item_count() const { return static_cast<int>(pellets.size() + cherries.size()); }
    bool item_is_cherry(int i) const { return i >= static_cast<int>(pellets.size()); }
    int item_cell(int i) const
    {
        return item_is_cherry(i) ? cherries[i - pellets.size()] : pellets[i];
    }
    float item_reward(int i) const { return item_is_cherry(i) ? rewards.cherry : rewards.pellet; }

    std::string cell_str(int cell) const
    {
        return "(" + std::to_string(row_of(cell)) + "," + std::to_string(col_of(cell)) + ")";
    }

    void validate() const
    {
        if (width < 3 || height < 3)
            throw std::invalid_argument("grid must be at least 3x3 (border walls leave no interior otherwise)");
        if (tile_size < 8)
            throw std::invalid_argument("tile_size must be >= 8, got " + std::to_string(tile_size));
        if (walls.size() != static_cast<std::size_t>(width) * height)
            throw std::invalid_argument("wall mask size " + std::to_string(walls.size()) + " != width*height");
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < width; ++c)
                if ((r == 0 || c == 0 || r == height - 1 || c == width - 1) && !is_wall(cell(r, c)))
                    throw std::invalid_argument("border cell " + cell_str(cell(r, c)) + " must be a wall");
        auto check_cell = [this](int cell, const char* what) {
            if (!in_bounds(cell))
                throw std::invalid_argument(std::string(what) + " cell index " + std::to_string(cell) + " out of bounds");
            if (is_wall(cell))
                throw std::invalid_argument(std::string(what) + " placed on wall cell " + cell_str(cell));
        };
        check_cell(agent_cell, "agent");
        if (ghost_enabled) {
            check_cell(ghost_cell, "ghost");
            if (ghost_cell == agent_cell)
                throw std::invalid_argument("agent and ghost share cell " + cell_str(agent_cell));
        }
        if (item_count() > 64)
            throw std::invalid_argument("at most 64 pellets+cherries supported, got " + std::to_string(item_count()));
        std::vector<std::uint8_t> seen(walls.size(), 0);
        for (int i = 0; i < item_count(); ++i) {
            int c = item_cell(i);
            check_cell(c, item_is_cherry(i) ? "cherry" : "pellet");
            if (c == agent_cell || (ghost_enabled && c == ghost_cell))
                throw std::invalid_argument("item overlaps agent/ghost at " + cell_str(c));
            if (seen[c]++)
                throw std::invalid_argument("duplicate item cell " + cell_str(c));
        }
        float max_entry = std::max({std::abs(rewards.pellet), std::abs(rewards.cherry), std::abs(rewards.ghost),
                                    std::abs(rewards.clear), std::abs(rewards.step)});
        if (max_abs_reward <= 0.0f || max_abs_reward < max_entry)
            throw std::invalid_argument("max_abs_reward must cover every reward-table entry");
    }
};

inline std::vector<std::uint8_t> border_walls(int width, int height)
{
    std::vector<std::uint8_t> w(static_cast<std::size_t>(width) * height, 0);
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c)
            if (r == 0 || c == 0 || r == height - 1 || c == width - 1)
                w[r * width + c] = 1;
    return w;
}

// 10x10 bordered world: five pellets, one cherry, one chasing ghost.
inline GridSpec default_grid(bool ghost_enabled = true)
{
    GridSpec g;
    g.width = 10;
    g.height = 10;
    g.tile_size = 8;
    g.walls = border_walls(10, 10);
    g.agent_cell = g.cell(5, 4);
    g.pellets = {g.cell(2, 2), g.cell(2, 7), g.cell(4, 5), g.cell(7, 2), g.cell(7, 7)};
    g.cherries = {g.cell(6, 5)};
    g.ghost_cell = g.cell(1, 8);
    g.ghost_enabled = ghost_enabled;
    return g;
}

struct GameState {
    std::uint16_t agent = 0;
    std::uint16_t ghost = 0;
    std::uint8_t ghost_phase = 0; // ghost moves on even values
    std::uint32_t step_count = 0;
    std::uint64_t items = 0; // bit i set = item i (spec.pellets then spec.cherries) still present
    bool terminal = false;

    bool operator==(const GameState&) const = default;

    bool item_present(int i) const { return (items >> i) & 1; }
    int items_remaining() const { return __builtin_popcountll(items); }
};

struct StepOutcome {
    GameState state;
    float reward_raw = 0.0f;
    bool terminal = false;
};

// Deterministic: the layout is entirely spec-driven; the seed parameter is
// kept for interface stability but feeds no randomness.
inline GameState reset(const GridSpec& spec, std::uint64_t seed = 0)
{
    (void)seed;
    spec.validate();
    GameState s;
    s.agent = static_cast<std::uint16_t>(spec.agent_cell);
    s.ghost = spec.ghost_enabled ? static_cast<std::uint16_t>(spec.ghost_cell) : 0;
    s.ghost_phase = 0;
    s.step_count = 0;
    s.items = spec.item_count() == 64 ? ~0ull : ((1ull << spec.item_count()) - 1);
    s.terminal = false;
    return s;
}

namespace detail {
    // -1 when the move leaves the grid
    inline int neighbor(const GridSpec& spec, int cell, Action a)
    {
        int r = spec.row_of(cell), c = spec.col_of(cell);
        switch (a) {
        case Action::Up: --r; break;
        case Action::Down: ++r; break;
        case Action::Left: --c; break;
        case Action::Right: ++c; break;
        }
        if (r < 0 || c < 0 || r >= spec.height || c >= spec.width) return -1;
        return spec.cell(r, c);
    }

    inline int manhattan(const GridSpec& spec, int a, int b)
    {
        return std::abs(spec.row_of(a) - spec.row_of(b)) + std::abs(spec.col_of(a) - spec.col_of(b));
    }
} // namespace detail

// Chase policy: on even phase, the legal move minimizing Manhattan distance
// to the agent, ties broken Up > Left > Down > Right; odd phase holds.
inline std::optional<Action> ghost_policy(const GridSpec& spec, const GameState& s)
{
    if (!spec.ghost_enabled)
        throw std::invalid_argument("ghost_policy: ghost disabled in this spec");
    if (s.ghost_phase % 2 != 0) return std::nullopt;
    static constexpr Action order[4] = {Action::Up, Action::Left, Action::Down, Action::Right};
    std::optional<Action> best;
    int best_d = std::numeric_limits<int>::max();
    for (Action a : order) {
        int n = detail::neighbor(spec, s.ghost, a);
        if (n < 0 || spec.is_wall(n)) continue;
        int d = detail::manhattan(spec, n, s.agent);
        if (d < best_d) {
            best_d = d;
            best = a;
        }
    }
    return best;
}

// One environment step. Resolution order: agent sub-move (wall-blocked);
// stepping onto the ghost's cell ends the episode immediately (motion
// preempted); otherwise items at the agent's cell are consumed, an emptied
// board pays the clear bonus and ends the episode before the ghost moves;
// otherwise the ghost takes its sub-move (even phase only) and a shared or
// swapped cell ends the episode with the ghost penalty. Rewards for
// co-occurring events sum.
inline StepOutcome step(const GridSpec& spec, const GameState& s, Action a)
{
    if (s.terminal)
        throw std::invalid_argument("step on terminal state rejected");
    GameState n = s;
    n.step_count = s.step_count + 1;
    n.ghost_phase = s.ghost_phase ^ 1;
    float reward = spec.rewards.step;

    int target = detail::neighbor(spec, s.agent, a);
    if (target >= 0 && !spec.is_wall(target))
        n.agent = static_cast<std::uint16_t>(target);

    bool collided = false;
    if (spec.ghost_enabled && n.agent == s.ghost) {
        collided = true;
    } else {
        bool consumed = false;
        for (int i = 0; i < spec.item_count(); ++i)
            if (n.item_present(i) && spec.item_cell(i) == n.agent) {
                n.items &= ~(1ull << i);
                reward += spec.item_reward(i);
                consumed = true;
            }
        if (consumed && n.items == 0) {
            reward += spec.rewards.clear;
            n.terminal = true;
        }
        if (!n.terminal && spec.ghost_enabled) {
            GameState mid = n;
            mid.ghost = s.ghost;
            mid.ghost_phase = s.ghost_phase;
            if (auto mv = ghost_policy(spec, mid)) {
                int g = detail::neighbor(spec, s.ghost, *mv);
                if (g >= 0 && !spec.is_wall(g)) n.ghost = static_cast<std::uint16_t>(g);
            }
            if (n.ghost == n.agent) collided = true;
            if (n.agent == s.ghost && n.ghost == s.agent) collided = true; // swap-through
        }
    }
    if (collided) {
        reward += spec.rewards.ghost;
        n.terminal = true;
    }
    return {n, reward, n.terminal};
}

} // namespace pelletworld::env
