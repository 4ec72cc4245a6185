#pragma once

#include "pelletworld/grid.hpp"

#include <cstdint>
#include <deque>
#include <unordered_map>
#include <vector>

namespace pelletworld::env {

// Exact tabular solution over the reachable state set, in normalized reward
// units. Index 0 is the reset state.
struct TabularOracle {
    double gamma = 0.0;
    double tol = 0.0;
    int sweeps = 0;
    std::vector<GameState> states; // step_count canonicalized to 0
    std::vector<double> values;
    std::vector<Action> greedy; // meaningful for non-terminal states
    double v_start() const { return values.empty() ? 0.0 : values[0]; }
};

namespace detail {
    struct StateKey {
        std::uint64_t hi = 0, lo = 0;
        bool operator==(const StateKey&) const = default;
    };
    inline StateKey key_of(const GameState& s)
    {
        StateKey k;
        k.hi = (static_cast<std::uint64_t>(s.agent) << 18) | (static_cast<std::uint64_t>(s.ghost) << 2) |
               (static_cast<std::uint64_t>(s.ghost_phase & 1) << 1) | (s.terminal ? 1 : 0);
        k.lo = s.items;
        return k;
    }
    struct StateKeyHash {
        std::size_t operator()(const StateKey& k) const
        {
            std::uint64_t h = k.hi * 0x9e3779b97f4a7c15ull;
            h ^= k.lo + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
            return static_cast<std::size_t>(h);
        }
    };
} // namespace detail

// Value iteration to Bellman residual <= tol. Rejects gamma outside [0,1)
// and reachable state sets above max_states (count reported).
inline TabularOracle value_iteration_oracle(const GridSpec& spec, double gamma, double tol,
                                            std::size_t max_states = 1'000'000)
{
    if (gamma < 0.0 || gamma >= 1.0)
        throw std::invalid_argument("gamma must lie in [0,1) for a convergent tabular solution");
    if (tol <= 0.0)
        throw std::invalid_argument("tolerance must be positive");

    TabularOracle result;
    result.gamma = gamma;
    result.tol = tol;

    auto canonical = [](GameState s) {
        s.step_count = 0;
        return s;
    };

    std::unordered_map<detail::StateKey, int, detail::StateKeyHash> index;
    std::vector<GameState>& states = result.states;
    std::deque<int> frontier;

    auto intern = [&](const GameState& s) {
        auto key = detail::key_of(s);
        auto [it, inserted] = index.try_emplace(key, static_cast<int>(states.size()));
        if (inserted) {
            states.push_back(s);
            if (states.size() > max_states)
                throw std::invalid_argument("state space overflow: more than " + std::to_string(max_states) +
                                            " reachable configurations");
            if (!s.terminal) frontier.push_back(it->second);
        }
        return it->second;
    };

    intern(canonical(reset(spec)));

    struct Edge {
        int next = 0;
        double reward = 0.0; // normalized
    };
    std::vector<Edge> edges; // 4 per non-terminal state, indexed by expansion order
    std::vector<int> edge_base(1, -1);

    // breadth-first expansion
    std::vector<int> order;
    while (!frontier.empty()) {
        int i = frontier.front();
        frontier.pop_front();
        order.push_back(i);
        edge_base.resize(states.size(), -1);
        edge_base[i] = static_cast<int>(edges.size());
        for (int a = 0; a < kNumActions; ++a) {
            StepOutcome out = step(spec, states[i], static_cast<Action>(a));
            int j = intern(canonical(out.state));
            double rn = std::clamp(static_cast<double>(out.reward_raw) / spec.max_abs_reward, -1.0, 1.0);
            edges.push_back({j, rn});
        }
    }
    edge_base.resize(states.size(), -1);

    result.values.assign(states.size(), 0.0);
    result.greedy.assign(states.size(), Action::Up);

    std::vector<double> next_values(states.size(), 0.0);
    const int max_sweeps = 1'000'000;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double residual = 0.0;
        for (int i : order) {
            const int base = edge_base[i];
            double best = -std::numeric_limits<double>::infinity();
            Action best_a = Action::Up;
            for (int a = 0; a < kNumActions; ++a) {
                const Edge& e = edges[base + a];
                double v = e.reward + (states[e.next].terminal ? 0.0 : gamma * result.values[e.next]);
                if (v > best) {
                    best = v;
                    best_a = static_cast<Action>(a);
                }
            }
            next_values[i] = best;
            result.greedy[i] = best_a;
            residual = std::max(residual, std::abs(best - result.values[i]));
        }
        for (int i : order) result.values[i] = next_values[i];
        result.sweeps = sweep + 1;
        if (residual <= tol) break;
    }
    return result;
}

} // namespace pelletworld::env
