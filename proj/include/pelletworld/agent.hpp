#pragma once

#include "pelletworld/grid.hpp"
#include "pelletworld/net.hpp"
#include "pelletworld/objrec.hpp"
#include "pelletworld/optim.hpp"
#include "pelletworld/render.hpp"

#include <array>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <tuple>

namespace pelletworld::agent {

using env::Action;

// raw -> [-1,1] against the a-priori maximum; the clamp only fires if the
// spec's reward bound was violated
inline float normalize_reward(float raw, float max_abs)
{
    if (max_abs <= 0.0f)
        throw std::invalid_argument("normalize_reward: max_abs must be positive");
    return std::clamp(raw / max_abs, -1.0f, 1.0f);
}

// In-place variant: reuses `t`'s storage when the shape already matches.
inline void assemble_state_into(std::span<const env::Frame> history, const objrec::ObjectChannels* channels,
                                nn::Tensor& t)
{
    if (history.size() != 4)
        throw std::invalid_argument("state assembly needs exactly 4 history frames, got " +
                                    std::to_string(history.size()));
    const int h = history[0].h, w = history[0].w;
    for (const auto& f : history)
        if (f.h != h || f.w != w)
            throw std::invalid_argument("history frame dimensions differ");
    const int k = channels ? channels->k : 0;
    if (channels && (channels->h != h || channels->w != w))
        throw std::invalid_argument("object channel dimensions do not match the frames");

    const std::vector<int> shape = {12 + k, h, w};
    if (t.shape != shape) {
        t.shape = shape;
        t.data.resize(nn::shape_numel(shape));
    }
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    constexpr float kScale = 1.0f / 255.0f;
    for (int fi = 0; fi < 4; ++fi) {
        const std::uint8_t* src = history[fi].rgb.data();
        float* r = t.data.data() + (3 * fi + 0) * plane;
        float* g = t.data.data() + (3 * fi + 1) * plane;
        float* b = t.data.data() + (3 * fi + 2) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            r[i] = src[3 * i + 0] * kScale;
            g[i] = src[3 * i + 1] * kScale;
            b[i] = src[3 * i + 2] * kScale;
        }
    }
    for (int c = 0; c < k; ++c) {
        float* dst = t.data.data() + (12 + c) * plane;
        const std::uint8_t* src = channels->planes.data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i)
            dst[i] = static_cast<float>(src[i]);
    }
}

// Network input: 4 history frames oldest->newest as RGB plane triples scaled
// to [0,1], then the k object planes (from the newest frame only).
inline nn::Tensor assemble_state(std::span<const env::Frame> history, const objrec::ObjectChannels* channels)
{
    nn::Tensor t;
    assemble_state_into(history, channels, t);
    return t;
}

// Writes one sample into column b of a (12+k, B, H, W) packed batch tensor.
inline void assemble_state_into_packed(std::span<const env::Frame> history, const objrec::ObjectChannels* channels,
                                       nn::Tensor& packed, int b)
{
    const int B = packed.shape[1];
    const int h = packed.shape[2], w = packed.shape[3];
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    constexpr float kScale = 1.0f / 255.0f;
    auto dst_plane = [&](int p) { return packed.data.data() + (static_cast<std::size_t>(p) * B + b) * plane; };
    for (int fi = 0; fi < 4; ++fi) {
        const std::uint8_t* src = history[fi].rgb.data();
        float* r = dst_plane(3 * fi + 0);
        float* g = dst_plane(3 * fi + 1);
        float* bl = dst_plane(3 * fi + 2);
        for (std::size_t i = 0; i < plane; ++i) {
            r[i] = src[3 * i + 0] * kScale;
            g[i] = src[3 * i + 1] * kScale;
            bl[i] = src[3 * i + 2] * kScale;
        }
    }
    const int k = packed.shape[0] - 12;
    for (int c = 0; c < k; ++c) {
        float* dst = dst_plane(12 + c);
        const std::uint8_t* src = channels->planes.data() + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i)
            dst[i] = static_cast<float>(src[i]);
    }
}

// epsilon-greedy; greedy ties resolve to the lowest action index
inline Action select_action(const nn::QNetwork& net, const nn::Tensor& state, float epsilon, std::mt19937_64& rng)
{
    if (!(epsilon >= 0.0f && epsilon <= 1.0f))
        throw std::invalid_argument("epsilon must lie in [0,1]");
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    if (u01(rng) < epsilon) {
        std::uniform_int_distribution<int> pick(0, env::kNumActions - 1);
        return static_cast<Action>(pick(rng));
    }
    auto q = nn::forward(net, state);
    int best = 0;
    for (int a = 1; a < static_cast<int>(q.numel()); ++a)
        if (q.data[a] > q.data[best]) best = a;
    return static_cast<Action>(best);
}

enum class Mode { DQN, DDQN };

inline const char* mode_name(Mode m) { return m == Mode::DQN ? "dqn" : "ddqn"; }
inline std::optional<Mode> mode_from_name(std::string_view s)
{
    if (s == "dqn") return Mode::DQN;
    if (s == "ddqn") return Mode::DDQN;
    return std::nullopt;
}

struct Transition {
    nn::Tensor state;
    int action = 0;
    float reward_norm = 0.0f;
    nn::Tensor next_state;
    bool terminal = false;
};

// Terminal transitions cut bootstrapping; DQN evaluates the target net's own
// maximum, DDQN evaluates the target net at the online argmax.
inline std::vector<float> compute_targets(std::span<const Transition> batch, const nn::QNetwork& online,
                                          const nn::QNetwork& target, double gamma, Mode mode)
{
    if (batch.empty())
        throw std::invalid_argument("compute_targets: empty batch");
    std::vector<float> out;
    out.reserve(batch.size());
    for (const auto& tr : batch) {
        if (tr.terminal) {
            out.push_back(tr.reward_norm);
            continue;
        }
        auto qt = nn::forward(target, tr.next_state);
        float v;
        if (mode == Mode::DQN) {
            v = qt.data[0];
            for (float x : qt.data) v = std::max(v, x);
        } else {
            auto qo = nn::forward(online, tr.next_state);
            int best = 0;
            for (int a = 1; a < static_cast<int>(qo.numel()); ++a)
                if (qo.data[a] > qo.data[best]) best = a;
            v = qt.data[best];
        }
        out.push_back(static_cast<float>(tr.reward_norm + gamma * v));
    }
    return out;
}

struct TrainConfig {
    double gamma = 0.99;
    float learning_rate = 2.5e-4f;
    int batch_size = 32;
    int target_sync_period = 1000;
    float epsilon_start = 1.0f;
    float epsilon_end = 0.05f;
    int epsilon_decay_steps = 20000;
    int total_steps = 50000;
    int warmup_steps = 1000;
    int replay_capacity = 50000;
    std::uint64_t seed = 1;
    Mode mode = Mode::DQN;
    bool use_objects = false;
    int max_episode_steps = 300; // truncation (no terminal flag) so episodes always end
    float rmsprop_decay = 0.95f;
    float rmsprop_eps = 1e-8f;
    float huber_delta = 1.0f;
    int eval_episodes = 20;   // post-training evaluation recorded in the checkpoint
    float eval_epsilon = 0.05f;
    // optional greedy probe: stop once the probe return reaches the threshold
    int eval_every = 0;
    std::optional<double> stop_at_return;

    void validate() const
    {
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0,1]");
        if (learning_rate <= 0.0f) throw std::invalid_argument("learning_rate must be positive");
        if (batch_size <= 0 || target_sync_period <= 0 || total_steps < 0 || warmup_steps < 0 ||
            replay_capacity <= 0 || max_episode_steps <= 0 || epsilon_decay_steps <= 0)
            throw std::invalid_argument("train config fields must be positive");
        if (!(epsilon_start >= 0.0f && epsilon_start <= 1.0f && epsilon_end >= 0.0f && epsilon_end <= 1.0f))
            throw std::invalid_argument("epsilon bounds must lie in [0,1]");
        if (eval_episodes < 0 || eval_every < 0) throw std::invalid_argument("eval fields must be non-negative");
    }
};

inline float epsilon_at(const TrainConfig& cfg, int step)
{
    if (step >= cfg.epsilon_decay_steps) return cfg.epsilon_end;
    double frac = static_cast<double>(step) / cfg.epsilon_decay_steps;
    return static_cast<float>(cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac);
}

// discounted return of one episode, reverse accumulation (Horner)
inline double discounted_return(std::span<const float> rewards, double gamma)
{
    double r = 0.0;
    for (std::size_t i = rewards.size(); i-- > 0;)
        r = rewards[i] + gamma * r;
    return r;
}

struct EpisodeStats {
    int episode = 0;
    int steps = 0;
    double return_raw = 0.0;
    double return_norm = 0.0;
    double discounted_return = 0.0; // over normalized rewards
    double epsilon = 0.0;           // schedule value when the episode ended
    bool operator==(const EpisodeStats&) const = default;
};

// One stored step: the four states whose renders form s_t, the successor
// state, and the cached newest-frame detections for both endpoints.
struct StepRecord {
    std::array<env::GameState, 4> history; // oldest -> newest; history[3] is the acting state
    env::GameState next;
    std::uint8_t action = 0;
    float reward_norm = 0.0f;
    bool terminal = false;
    std::vector<objrec::Detection> dets;
    std::vector<objrec::Detection> next_dets;
};

// FIFO ring; logical index 0 is the oldest retained record.
class ReplayBuffer {
public:
    explicit ReplayBuffer(int capacity) : cap_(capacity)
    {
        if (capacity <= 0)
            throw std::invalid_argument("replay capacity must be positive");
        ring_.reserve(std::min(capacity, 1 << 20));
    }

    void push(StepRecord r)
    {
        if (static_cast<int>(ring_.size()) < cap_)
            ring_.push_back(std::move(r));
        else
            ring_[count_ % cap_] = std::move(r);
        ++count_;
    }

    int size() const { return static_cast<int>(std::min<std::uint64_t>(count_, cap_)); }
    std::uint64_t inserted() const { return count_; }

    const StepRecord& at(int logical) const
    {
        const std::uint64_t oldest = count_ - size();
        return ring_[(oldest + logical) % cap_];
    }

private:
    std::vector<StepRecord> ring_;
    int cap_ = 0;
    std::uint64_t count_ = 0;
};

// Rebuilds network inputs from stored game states (renders are pure, so the
// compact records reproduce the exact tensors). Holds scratch frames so the
// sampling loop does not reallocate.
struct TransitionAssembler {
    const env::GridSpec* spec = nullptr;
    int k = 0; // object planes; 0 disables them
    mutable std::array<env::Frame, 4> frames_scratch;

    void state_tensor_into(std::span<const env::GameState, 4> states, std::span<const objrec::Detection> dets,
                           nn::Tensor& out) const
    {
        for (int i = 0; i < 4; ++i) env::render_into(*spec, states[i], frames_scratch[i]);
        if (k == 0) {
            assemble_state_into(frames_scratch, nullptr, out);
        } else {
            auto channels = objrec::encode_object_channels(frames_scratch[3].h, frames_scratch[3].w, dets, k);
            assemble_state_into(frames_scratch, &channels, out);
        }
    }

    nn::Tensor state_tensor(std::span<const env::GameState, 4> states, std::span<const objrec::Detection> dets) const
    {
        nn::Tensor t;
        state_tensor_into(states, dets, t);
        return t;
    }

    void state_into_packed(std::span<const env::GameState, 4> states, std::span<const objrec::Detection> dets,
                           nn::Tensor& packed, int b) const
    {
        for (int i = 0; i < 4; ++i) env::render_into(*spec, states[i], frames_scratch[i]);
        if (k == 0) {
            assemble_state_into_packed(frames_scratch, nullptr, packed, b);
        } else {
            auto channels = objrec::encode_object_channels(frames_scratch[3].h, frames_scratch[3].w, dets, k);
            assemble_state_into_packed(frames_scratch, &channels, packed, b);
        }
    }

    void materialize_into(const StepRecord& r, Transition& t) const
    {
        state_tensor_into(r.history, r.dets, t.state);
        std::array<env::GameState, 4> nh = {r.history[1], r.history[2], r.history[3], r.next};
        state_tensor_into(nh, r.next_dets, t.next_state);
        t.action = r.action;
        t.reward_norm = r.reward_norm;
        t.terminal = r.terminal;
    }

    Transition materialize(const StepRecord& r) const
    {
        Transition t;
        materialize_into(r, t);
        return t;
    }
};

struct EvalSummary {
    int episodes = 0;
    double mean_return_raw = 0.0, std_return_raw = 0.0;
    double mean_return_norm = 0.0, std_return_norm = 0.0;
    double mean_discounted = 0.0, std_discounted = 0.0;
    double mean_length = 0.0;
};

namespace detail {
    inline std::pair<double, double> mean_std(std::span<const double> xs)
    {
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        double var = 0.0;
        for (double x : xs) var += (x - mean) * (x - mean);
        var = xs.size() > 1 ? var / static_cast<double>(xs.size() - 1) : 0.0;
        return {mean, std::sqrt(var)};
    }
} // namespace detail

// Frozen-policy evaluation; deterministic given the seed.
inline EvalSummary evaluate(const nn::QNetwork& net, const env::GridSpec& spec, const objrec::TemplateSet* templates,
                            bool use_objects, int episodes, float epsilon_eval, std::uint64_t seed,
                            double gamma = 0.99, int max_episode_steps = 300)
{
    if (episodes <= 0)
        throw std::invalid_argument("evaluate: episode count must be positive");
    spec.validate();
    if (use_objects && (!templates || templates->k() == 0))
        throw std::invalid_argument("evaluate: object channels requested but no templates given");
    const int k = use_objects ? templates->k() : 0;
    const int h = spec.height * spec.tile_size, w = spec.width * spec.tile_size;
    if (net.in_channels != 12 + k || net.in_h != h || net.in_w != w)
        throw std::invalid_argument("evaluate: checkpoint input " + nn::shape_str({net.in_channels, net.in_h, net.in_w}) +
                                    " incompatible with environment " + nn::shape_str({12 + k, h, w}));

    std::mt19937_64 rng(seed);
    TransitionAssembler assembler{&spec, k};
    std::vector<double> raw, norm, disc, lengths;
    for (int ep = 0; ep < episodes; ++ep) {
        auto cur = env::reset(spec);
        std::array<env::GameState, 4> hist = {cur, cur, cur, cur};
        std::vector<objrec::Detection> dets;
        if (use_objects) dets = objrec::detect_all(env::render(spec, cur), *templates);
        double ep_raw = 0.0, ep_norm = 0.0;
        std::vector<float> rewards;
        int steps = 0;
        while (steps < max_episode_steps && !cur.terminal) {
            auto st = assembler.state_tensor(hist, dets);
            Action a = select_action(net, st, epsilon_eval, rng);
            auto out = env::step(spec, cur, a);
            float rn = normalize_reward(out.reward_raw, spec.max_abs_reward);
            ep_raw += out.reward_raw;
            ep_norm += rn;
            rewards.push_back(rn);
            ++steps;
            cur = out.state;
            hist = {hist[1], hist[2], hist[3], cur};
            if (use_objects && !cur.terminal) dets = objrec::detect_all(env::render(spec, cur), *templates);
        }
        raw.push_back(ep_raw);
        norm.push_back(ep_norm);
        disc.push_back(discounted_return(rewards, gamma));
        lengths.push_back(steps);
    }
    EvalSummary s;
    s.episodes = episodes;
    std::tie(s.mean_return_raw, s.std_return_raw) = detail::mean_std(raw);
    std::tie(s.mean_return_norm, s.std_return_norm) = detail::mean_std(norm);
    std::tie(s.mean_discounted, s.std_discounted) = detail::mean_std(disc);
    double ml = 0.0;
    for (double l : lengths) ml += l;
    s.mean_length = ml / lengths.size();
    return s;
}

struct TrainResult {
    nn::QNetwork net;
    std::vector<EpisodeStats> episodes;
    int steps_trained = 0;
    int optimizer_steps = 0;
    bool stopped_early = false;
    bool failed = false;         // non-finite loss; net holds the diagnostic state
    std::string failure_message;
};

using EpisodeSink = std::function<void(const EpisodeStats&)>;

// Single-threaded DQN/DDQN training loop. All stochasticity (weight init,
// exploration, batch sampling) flows from one generator seeded with cfg.seed,
// so the run is a pure function of (spec, cfg, arch).
inline TrainResult train(const env::GridSpec& spec, const objrec::TemplateSet* templates, const TrainConfig& cfg,
                         std::vector<nn::LayerSpec> arch = {}, const EpisodeSink& sink = nullptr)
{
    cfg.validate();
    spec.validate();
    if (cfg.use_objects && (!templates || templates->k() == 0))
        throw std::invalid_argument("train: use_objects requires a non-empty template set");
    const int k = cfg.use_objects ? templates->k() : 0;
    const int H = spec.height * spec.tile_size, W = spec.width * spec.tile_size;
    if (arch.empty()) arch = nn::default_architecture(env::kNumActions);

    std::mt19937_64 rng(cfg.seed);
    TrainResult result;
    result.net = nn::make_network(std::move(arch), 12 + k, H, W, rng);
    nn::QNetwork target = result.net;
    nn::RmsProp opt(result.net, {cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps});
    ReplayBuffer buffer(cfg.replay_capacity);
    TransitionAssembler assembler{&spec, k};
    const int B = cfg.batch_size;
    nn::Tensor packed_states({12 + k, B, H, W});
    nn::Tensor packed_next({12 + k, B, H, W});
    std::vector<int> b_actions(B);
    std::vector<char> b_terminal(B);
    nn::Tensor b_rewards({B});
    nn::BatchTrace btrace;
    nn::Gradients grads = nn::zero_gradients(result.net);
    nn::Tensor act_state;

    auto detect = [&](const env::GameState& s) -> std::vector<objrec::Detection> {
        if (!cfg.use_objects) return {};
        return objrec::detect_all(env::render(spec, s), *templates);
    };

    env::GameState cur = env::reset(spec);
    std::array<env::GameState, 4> hist = {cur, cur, cur, cur};
    std::vector<objrec::Detection> dets = detect(cur);
    int episode_index = 0, episode_steps = 0;
    double ep_raw = 0.0, ep_norm = 0.0;
    std::vector<float> ep_rewards;

    for (int step = 0; step < cfg.total_steps; ++step) {
        result.steps_trained = step + 1;
        if (step % cfg.target_sync_period == 0) target = result.net;

        const float eps = epsilon_at(cfg, step);
        assembler.state_tensor_into(hist, dets, act_state);
        Action a = select_action(result.net, act_state, eps, rng);
        auto out = env::step(spec, cur, a);
        float rn = normalize_reward(out.reward_raw, spec.max_abs_reward);
        auto next_dets = detect(out.state);
        buffer.push({hist, out.state, static_cast<std::uint8_t>(a), rn, out.terminal, dets, next_dets});

        ep_raw += out.reward_raw;
        ep_norm += rn;
        ep_rewards.push_back(rn);
        ++episode_steps;

        const bool truncated = !out.terminal && episode_steps >= cfg.max_episode_steps;
        if (out.terminal || truncated) {
            EpisodeStats stats{episode_index, episode_steps, ep_raw, ep_norm,
                               discounted_return(ep_rewards, cfg.gamma), eps};
            result.episodes.push_back(stats);
            if (sink) sink(stats);
            ++episode_index;
            episode_steps = 0;
            ep_raw = ep_norm = 0.0;
            ep_rewards.clear();
            cur = env::reset(spec);
            hist = {cur, cur, cur, cur};
            dets = detect(cur);
        } else {
            cur = out.state;
            hist = {hist[1], hist[2], hist[3], cur};
            dets = std::move(next_dets);
        }

        if (step < cfg.warmup_steps) continue;

        // one optimizer step on a uniform batch (sample-packed tensors keep
        // the whole batch in one GEMM per layer)
        std::uniform_int_distribution<int> pick(0, buffer.size() - 1);
        for (int j = 0; j < B; ++j) {
            const StepRecord& rec = buffer.at(pick(rng));
            assembler.state_into_packed(rec.history, rec.dets, packed_states, j);
            std::array<env::GameState, 4> nh = {rec.history[1], rec.history[2], rec.history[3], rec.next};
            assembler.state_into_packed(nh, rec.next_dets, packed_next, j);
            b_actions[j] = rec.action;
            b_terminal[j] = rec.terminal;
            b_rewards.data[j] = rec.reward_norm;
        }

        // targets: terminal cut; DQN maxes the target net, DDQN evaluates it
        // at the online argmax (same formula as compute_targets)
        auto qt = nn::forward_batch(target, packed_next);
        nn::Tensor qo_next;
        if (cfg.mode == Mode::DDQN) qo_next = nn::forward_batch(result.net, packed_next);
        nn::Tensor targets({B});
        const int A = static_cast<int>(qt.shape[0]);
        for (int j = 0; j < B; ++j) {
            if (b_terminal[j]) {
                targets.data[j] = b_rewards.data[j];
                continue;
            }
            float v;
            if (cfg.mode == Mode::DQN) {
                v = qt.data[j];
                for (int a = 1; a < A; ++a) v = std::max(v, qt.data[a * B + j]);
            } else {
                int best = 0;
                for (int a = 1; a < A; ++a)
                    if (qo_next.data[a * B + j] > qo_next.data[best * B + j]) best = a;
                v = qt.data[best * B + j];
            }
            targets.data[j] = static_cast<float>(b_rewards.data[j] + cfg.gamma * v);
        }

        auto q = nn::forward_batch_traced(result.net, std::move(packed_states), btrace);
        nn::Tensor preds({B});
        for (int j = 0; j < B; ++j)
            preds.data[j] = q.data[b_actions[j] * B + j];
        auto [loss_sum, dl] = nn::huber_loss(preds, targets, cfg.huber_delta);
        const float inv_b = 1.0f / static_cast<float>(B);
        const double loss = static_cast<double>(loss_sum) * inv_b;
        if (!std::isfinite(loss)) {
            result.failed = true;
            result.failure_message = "non-finite loss at step " + std::to_string(step + 1) +
                                     " (optimizer step " + std::to_string(result.optimizer_steps + 1) + ")";
            return result;
        }

        nn::Tensor dq(q.shape);
        for (int j = 0; j < B; ++j)
            dq.data[b_actions[j] * B + j] = dl.data[j] * inv_b;

        for (auto& gw : grads.weights) gw.fill(0.0f);
        for (auto& gb : grads.biases) gb.fill(0.0f);
        nn::backward_params_batch(result.net, btrace, dq, grads);
        packed_states = std::move(btrace.acts[0]); // reclaim the buffer
        try {
            opt.step(result.net, grads);
        } catch (const nn::NumericalError& e) {
            result.failed = true;
            result.failure_message = std::string(e.what()) + " at step " + std::to_string(step + 1);
            return result;
        }
        ++result.optimizer_steps;

        if (cfg.eval_every > 0 && cfg.stop_at_return && (step + 1) % cfg.eval_every == 0) {
            auto probe = evaluate(result.net, spec, templates, cfg.use_objects, 1, 0.0f, 0,
                                  cfg.gamma, cfg.max_episode_steps);
            if (probe.mean_return_norm >= *cfg.stop_at_return) {
                result.stopped_early = true;
                break;
            }
        }
    }
    return result;
}

} // namespace pelletworld::agent
