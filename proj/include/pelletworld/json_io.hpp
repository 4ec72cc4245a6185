#pragma once

#include "pelletworld/agent.hpp"
#include "pelletworld/grid.hpp"
#include "pelletworld/net.hpp"
#include "pelletworld/netpbm.hpp"
#include "pelletworld/objrec.hpp"

#include <json.hpp>

#include <bit>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

namespace pelletworld::io {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;

// Input/config problems; the CLI maps this (and std::invalid_argument) to exit 2.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline json read_json_file(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw InputError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InputError(path.string() + ": " + e.what());
    }
}

inline void write_json_file(const fs::path& path, const json& j)
{
    std::ofstream out(path);
    if (!out)
        throw InputError("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

namespace detail {
    template <typename T>
    T get_field(const json& j, const char* key, const char* ctx)
    {
        if (!j.contains(key))
            throw InputError(std::string(ctx) + ": missing field '" + key + "'");
        try {
            return j.at(key).get<T>();
        } catch (const json::exception& e) {
            throw InputError(std::string(ctx) + ": field '" + key + "': " + e.what());
        }
    }
    template <typename T>
    T get_or(const json& j, const char* key, T fallback, const char* ctx)
    {
        if (!j.contains(key)) return fallback;
        return get_field<T>(j, key, ctx);
    }
} // namespace detail

// ---- grid -----------------------------------------------------------------

inline json grid_to_json(const env::GridSpec& g)
{
    json walls = json::array();
    for (int r = 1; r + 1 < g.height; ++r)
        for (int c = 1; c + 1 < g.width; ++c)
            if (g.is_wall(g.cell(r, c)))
                walls.push_back({r, c});
    auto cells = [&](const std::vector<int>& v) {
        json a = json::array();
        for (int cell : v) a.push_back({g.row_of(cell), g.col_of(cell)});
        return a;
    };
    json j = {
        {"format_version", kFormatVersion},
        {"width", g.width},
        {"height", g.height},
        {"tile_size", g.tile_size},
        {"walls", walls}, // interior walls; the border ring is implicit
        {"agent", {g.row_of(g.agent_cell), g.col_of(g.agent_cell)}},
        {"pellets", cells(g.pellets)},
        {"cherries", cells(g.cherries)},
        {"rewards",
         {{"pellet", g.rewards.pellet},
          {"cherry", g.rewards.cherry},
          {"ghost", g.rewards.ghost},
          {"clear", g.rewards.clear},
          {"step", g.rewards.step}}},
        {"max_abs_reward", g.max_abs_reward},
    };
    if (g.ghost_enabled || g.ghost_cell >= 0)
        j["ghost"] = {{"cell", {g.row_of(g.ghost_cell), g.col_of(g.ghost_cell)}}, {"enabled", g.ghost_enabled}};
    return j;
}

inline env::GridSpec grid_from_json(const json& j)
{
    const char* ctx = "grid";
    env::GridSpec g;
    g.width = detail::get_field<int>(j, "width", ctx);
    g.height = detail::get_field<int>(j, "height", ctx);
    g.tile_size = detail::get_or<int>(j, "tile_size", 8, ctx);
    if (g.width < 3 || g.height < 3)
        throw InputError("grid: width/height must be at least 3");
    g.walls = env::border_walls(g.width, g.height);
    auto cell_of = [&](const json& rc, const char* what) {
        if (!rc.is_array() || rc.size() != 2 || !rc[0].is_number_integer() || !rc[1].is_number_integer())
            throw InputError(std::string("grid: ") + what + " entries must be [row,col] integer pairs");
        int r = rc[0].get<int>(), c = rc[1].get<int>();
        if (r < 0 || c < 0 || r >= g.height || c >= g.width)
            throw InputError(std::string("grid: ") + what + " cell (" + std::to_string(r) + "," + std::to_string(c) +
                             ") out of bounds");
        return g.cell(r, c);
    };
    for (const auto& rc : detail::get_or<json>(j, "walls", json::array(), ctx))
        g.walls[cell_of(rc, "walls")] = 1;
    g.agent_cell = cell_of(detail::get_field<json>(j, "agent", ctx), "agent");
    for (const auto& rc : detail::get_or<json>(j, "pellets", json::array(), ctx))
        g.pellets.push_back(cell_of(rc, "pellets"));
    for (const auto& rc : detail::get_or<json>(j, "cherries", json::array(), ctx))
        g.cherries.push_back(cell_of(rc, "cherries"));
    if (j.contains("ghost")) {
        const json& gh = j.at("ghost");
        g.ghost_cell = cell_of(detail::get_field<json>(gh, "cell", "grid.ghost"), "ghost");
        g.ghost_enabled = detail::get_or<bool>(gh, "enabled", true, "grid.ghost");
    }
    if (j.contains("rewards")) {
        const json& r = j.at("rewards");
        g.rewards.pellet = detail::get_or<float>(r, "pellet", g.rewards.pellet, "grid.rewards");
        g.rewards.cherry = detail::get_or<float>(r, "cherry", g.rewards.cherry, "grid.rewards");
        g.rewards.ghost = detail::get_or<float>(r, "ghost", g.rewards.ghost, "grid.rewards");
        g.rewards.clear = detail::get_or<float>(r, "clear", g.rewards.clear, "grid.rewards");
        g.rewards.step = detail::get_or<float>(r, "step", g.rewards.step, "grid.rewards");
    }
    g.max_abs_reward = detail::get_or<float>(j, "max_abs_reward", 10.0f, ctx);
    g.validate();
    return g;
}

// ---- network architecture ---------------------------------------------------

inline json layer_specs_to_json(const std::vector<nn::LayerSpec>& specs)
{
    json a = json::array();
    for (const auto& s : specs) {
        json l = {{"kind", nn::layer_kind_name(s.kind)}};
        if (s.kind == nn::LayerKind::conv) {
            l["out_channels"] = s.out_channels;
            l["kernel"] = {s.kernel_h, s.kernel_w};
            l["stride"] = s.stride;
        } else if (s.kind == nn::LayerKind::fc) {
            l["out_units"] = s.out_units;
        }
        a.push_back(l);
    }
    return a;
}

inline std::vector<nn::LayerSpec> layer_specs_from_json(const json& a)
{
    if (!a.is_array() || a.empty())
        throw InputError("network: expected a non-empty array of layers");
    std::vector<nn::LayerSpec> specs;
    for (const auto& l : a) {
        auto kind = detail::get_field<std::string>(l, "kind", "network layer");
        if (kind == "conv") {
            auto kernel = detail::get_field<json>(l, "kernel", "conv layer");
            if (!kernel.is_array() || kernel.size() != 2)
                throw InputError("conv layer: kernel must be [kh,kw]");
            specs.push_back(nn::LayerSpec::conv(detail::get_field<int>(l, "out_channels", "conv layer"),
                                                kernel[0].get<int>(), kernel[1].get<int>(),
                                                detail::get_or<int>(l, "stride", 1, "conv layer")));
        } else if (kind == "maxpool") {
            specs.push_back(nn::LayerSpec::maxpool());
        } else if (kind == "fc") {
            specs.push_back(nn::LayerSpec::fc(detail::get_field<int>(l, "out_units", "fc layer")));
        } else if (kind == "relu") {
            specs.push_back(nn::LayerSpec::relu());
        } else if (kind == "flatten") {
            specs.push_back(nn::LayerSpec::flatten());
        } else {
            throw InputError("network layer: unknown kind '" + kind + "'");
        }
    }
    return specs;
}

// ---- train config -----------------------------------------------------------

inline json train_config_to_json(const agent::TrainConfig& c)
{
    json j = {
        {"gamma", c.gamma},
        {"learning_rate", c.learning_rate},
        {"batch_size", c.batch_size},
        {"target_sync_period", c.target_sync_period},
        {"epsilon_start", c.epsilon_start},
        {"epsilon_end", c.epsilon_end},
        {"epsilon_decay_steps", c.epsilon_decay_steps},
        {"total_steps", c.total_steps},
        {"warmup_steps", c.warmup_steps},
        {"replay_capacity", c.replay_capacity},
        {"seed", c.seed},
        {"mode", agent::mode_name(c.mode)},
        {"use_objects", c.use_objects},
        {"max_episode_steps", c.max_episode_steps},
        {"rmsprop_decay", c.rmsprop_decay},
        {"rmsprop_eps", c.rmsprop_eps},
        {"huber_delta", c.huber_delta},
        {"eval_episodes", c.eval_episodes},
        {"eval_epsilon", c.eval_epsilon},
        {"eval_every", c.eval_every},
    };
    j["stop_at_return"] = c.stop_at_return ? json(*c.stop_at_return) : json(nullptr);
    return j;
}

inline agent::TrainConfig train_config_from_json(const json& j)
{
    const char* ctx = "train config";
    agent::TrainConfig c;
    c.gamma = detail::get_or<double>(j, "gamma", c.gamma, ctx);
    c.learning_rate = detail::get_or<float>(j, "learning_rate", c.learning_rate, ctx);
    c.batch_size = detail::get_or<int>(j, "batch_size", c.batch_size, ctx);
    c.target_sync_period = detail::get_or<int>(j, "target_sync_period", c.target_sync_period, ctx);
    c.epsilon_start = detail::get_or<float>(j, "epsilon_start", c.epsilon_start, ctx);
    c.epsilon_end = detail::get_or<float>(j, "epsilon_end", c.epsilon_end, ctx);
    c.epsilon_decay_steps = detail::get_or<int>(j, "epsilon_decay_steps", c.epsilon_decay_steps, ctx);
    c.total_steps = detail::get_or<int>(j, "total_steps", c.total_steps, ctx);
    c.warmup_steps = detail::get_or<int>(j, "warmup_steps", c.warmup_steps, ctx);
    c.replay_capacity = detail::get_or<int>(j, "replay_capacity", c.replay_capacity, ctx);
    c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed, ctx);
    auto mode = detail::get_or<std::string>(j, "mode", "dqn", ctx);
    auto parsed = agent::mode_from_name(mode);
    if (!parsed)
        throw InputError("train config: mode must be 'dqn' or 'ddqn', got '" + mode + "'");
    c.mode = *parsed;
    c.use_objects = detail::get_or<bool>(j, "use_objects", c.use_objects, ctx);
    c.max_episode_steps = detail::get_or<int>(j, "max_episode_steps", c.max_episode_steps, ctx);
    c.rmsprop_decay = detail::get_or<float>(j, "rmsprop_decay", c.rmsprop_decay, ctx);
    c.rmsprop_eps = detail::get_or<float>(j, "rmsprop_eps", c.rmsprop_eps, ctx);
    c.huber_delta = detail::get_or<float>(j, "huber_delta", c.huber_delta, ctx);
    c.eval_episodes = detail::get_or<int>(j, "eval_episodes", c.eval_episodes, ctx);
    c.eval_epsilon = detail::get_or<float>(j, "eval_epsilon", c.eval_epsilon, ctx);
    c.eval_every = detail::get_or<int>(j, "eval_every", c.eval_every, ctx);
    if (j.contains("stop_at_return") && !j.at("stop_at_return").is_null())
        c.stop_at_return = j.at("stop_at_return").get<double>();
    c.validate();
    return c;
}

// ---- detections ---------------------------------------------------------------

inline json detections_to_json(std::span<const objrec::Detection> dets)
{
    json a = json::array();
    for (const auto& d : dets)
        a.push_back({{"type_id", d.type_id}, {"x", d.x}, {"y", d.y}, {"w", d.w}, {"h", d.h}, {"score", d.score}});
    return a;
}

inline std::vector<objrec::Detection> detections_from_json(const json& a)
{
    std::vector<objrec::Detection> out;
    for (const auto& d : a)
        out.push_back({detail::get_field<int>(d, "type_id", "detection"), detail::get_field<int>(d, "x", "detection"),
                       detail::get_field<int>(d, "y", "detection"), detail::get_field<int>(d, "w", "detection"),
                       detail::get_field<int>(d, "h", "detection"), detail::get_field<float>(d, "score", "detection")});
    return out;
}

// ---- template sets -------------------------------------------------------------

inline void save_template_set(const fs::path& dir, const objrec::TemplateSet& set)
{
    set.validate();
    fs::create_directories(dir);
    json manifest = {{"format_version", kFormatVersion}, {"templates", json::array()}};
    for (const auto& t : set.templates) {
        std::string file = t.name + ".ppm";
        write_ppm(dir / file, t.image);
        manifest["templates"].push_back({{"type_id", t.type_id}, {"name", t.name}, {"file", file}});
    }
    write_json_file(dir / "manifest.json", manifest);
}

inline objrec::TemplateSet load_template_set(const fs::path& dir)
{
    json manifest = read_json_file(dir / "manifest.json");
    objrec::TemplateSet set;
    for (const auto& e : detail::get_field<json>(manifest, "templates", "template manifest")) {
        objrec::Template t;
        t.type_id = detail::get_field<int>(e, "type_id", "template entry");
        t.name = detail::get_field<std::string>(e, "name", "template entry");
        t.image = read_ppm(dir / detail::get_field<std::string>(e, "file", "template entry"));
        set.templates.push_back(std::move(t));
    }
    set.validate();
    return set;
}

// ---- checkpoints -----------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "weights blob is little-endian");

struct CheckpointInfo {
    std::vector<nn::LayerSpec> arch;
    int in_channels = 0, in_h = 0, in_w = 0;
    int k = 0;
    bool use_objects = false;
    agent::TrainConfig cfg;
    env::GridSpec grid;
    std::string templates_dir;
    int steps_trained = 0;
    int optimizer_steps = 0;
    bool stopped_early = false;
    bool diagnostic = false; // saved after a numerical failure
    std::string failure_message;
    json evaluation; // summary of the post-training evaluation (may be null)
};

inline void save_checkpoint(const fs::path& dir, const nn::QNetwork& net, const CheckpointInfo& info)
{
    fs::create_directories(dir);
    json manifest = {
        {"format_version", kFormatVersion},
        {"architecture", layer_specs_to_json(net.specs)},
        {"input", {{"channels", net.in_channels}, {"height", net.in_h}, {"width", net.in_w}}},
        {"k", info.k},
        {"use_objects", info.use_objects},
        {"train_config", train_config_to_json(info.cfg)},
        {"environment", {{"grid", grid_to_json(info.grid)}, {"templates_dir", info.templates_dir}}},
        {"seed", info.cfg.seed},
        {"steps_trained", info.steps_trained},
        {"optimizer_steps", info.optimizer_steps},
        {"stopped_early", info.stopped_early},
        {"parameter_count", net.parameter_count()},
        {"diagnostic", info.diagnostic},
        {"evaluation", info.evaluation},
    };
    if (info.diagnostic)
        manifest["failure_message"] = info.failure_message;
    write_json_file(dir / "manifest.json", manifest);

    std::ofstream blob(dir / "weights.bin", std::ios::binary);
    if (!blob)
        throw InputError("cannot write " + (dir / "weights.bin").string());
    // per layer: weights then biases, raw float32
    for (std::size_t i = 0; i < net.specs.size(); ++i) {
        if (!net.weights[i].numel()) continue;
        blob.write(reinterpret_cast<const char*>(net.weights[i].data.data()),
                   static_cast<std::streamsize>(net.weights[i].data.size() * sizeof(float)));
        blob.write(reinterpret_cast<const char*>(net.biases[i].data.data()),
                   static_cast<std::streamsize>(net.biases[i].data.size() * sizeof(float)));
    }
    if (!blob)
        throw InputError("short write to " + (dir / "weights.bin").string());
}

inline std::pair<nn::QNetwork, CheckpointInfo> load_checkpoint(const fs::path& dir)
{
    json manifest = read_json_file(dir / "manifest.json");
    const char* ctx = "checkpoint manifest";
    if (detail::get_field<int>(manifest, "format_version", ctx) != kFormatVersion)
        throw InputError("checkpoint: unsupported format_version");

    CheckpointInfo info;
    info.arch = layer_specs_from_json(detail::get_field<json>(manifest, "architecture", ctx));
    json input = detail::get_field<json>(manifest, "input", ctx);
    info.in_channels = detail::get_field<int>(input, "channels", "checkpoint input");
    info.in_h = detail::get_field<int>(input, "height", "checkpoint input");
    info.in_w = detail::get_field<int>(input, "width", "checkpoint input");
    info.k = detail::get_field<int>(manifest, "k", ctx);
    info.use_objects = detail::get_field<bool>(manifest, "use_objects", ctx);
    info.cfg = train_config_from_json(detail::get_field<json>(manifest, "train_config", ctx));
    json environment = detail::get_field<json>(manifest, "environment", ctx);
    info.grid = grid_from_json(detail::get_field<json>(environment, "grid", "checkpoint environment"));
    info.templates_dir = detail::get_or<std::string>(environment, "templates_dir", "", "checkpoint environment");
    info.steps_trained = detail::get_or<int>(manifest, "steps_trained", 0, ctx);
    info.optimizer_steps = detail::get_or<int>(manifest, "optimizer_steps", 0, ctx);
    info.stopped_early = detail::get_or<bool>(manifest, "stopped_early", false, ctx);
    info.diagnostic = detail::get_or<bool>(manifest, "diagnostic", false, ctx);
    info.evaluation = detail::get_or<json>(manifest, "evaluation", json(nullptr), ctx);

    nn::QNetwork net = nn::make_network(info.arch, info.in_channels, info.in_h, info.in_w, 0);

    std::ifstream blob(dir / "weights.bin", std::ios::binary);
    if (!blob)
        throw InputError("cannot open " + (dir / "weights.bin").string());
    blob.seekg(0, std::ios::end);
    const auto blob_len = static_cast<std::int64_t>(blob.tellg());
    blob.seekg(0, std::ios::beg);
    const std::int64_t expect = net.parameter_count() * static_cast<std::int64_t>(sizeof(float));
    if (blob_len != expect)
        throw InputError("weights blob is " + std::to_string(blob_len) + " bytes, manifest implies " +
                         std::to_string(expect));
    for (std::size_t i = 0; i < net.specs.size(); ++i) {
        if (!net.weights[i].numel()) continue;
        blob.read(reinterpret_cast<char*>(net.weights[i].data.data()),
                  static_cast<std::streamsize>(net.weights[i].data.size() * sizeof(float)));
        blob.read(reinterpret_cast<char*>(net.biases[i].data.data()),
                  static_cast<std::streamsize>(net.biases[i].data.size() * sizeof(float)));
    }
    if (!blob)
        throw InputError("short read from " + (dir / "weights.bin").string());
    return {std::move(net), std::move(info)};
}

// ---- trajectory records -------------------------------------------------------

struct TrajectoryStep {
    int step = 0;
    env::Action action = env::Action::Up;
    float reward_raw = 0.0f;
    float reward_norm = 0.0f;
    bool terminal = false;
    std::string frame_file;
    std::vector<objrec::Detection> detections;
};

inline json trajectory_step_to_json(const TrajectoryStep& s)
{
    return {{"step", s.step},          {"action", env::action_name(s.action)},
            {"reward_raw", s.reward_raw}, {"reward_norm", s.reward_norm},
            {"terminal", s.terminal},  {"frame_file", s.frame_file},
            {"detections", detections_to_json(s.detections)}};
}

inline TrajectoryStep trajectory_step_from_json(const json& j)
{
    TrajectoryStep s;
    s.step = detail::get_field<int>(j, "step", "trajectory step");
    auto a = env::action_from_name(detail::get_field<std::string>(j, "action", "trajectory step"));
    if (!a)
        throw InputError("trajectory step: bad action name");
    s.action = *a;
    s.reward_raw = detail::get_field<float>(j, "reward_raw", "trajectory step");
    s.reward_norm = detail::get_field<float>(j, "reward_norm", "trajectory step");
    s.terminal = detail::get_field<bool>(j, "terminal", "trajectory step");
    s.frame_file = detail::get_field<std::string>(j, "frame_file", "trajectory step");
    s.detections = detections_from_json(detail::get_or<json>(j, "detections", json::array(), "trajectory step"));
    return s;
}

inline std::vector<TrajectoryStep> load_trajectory(const fs::path& dir)
{
    std::ifstream in(dir / "index.jsonl");
    if (!in)
        throw InputError("cannot open " + (dir / "index.jsonl").string());
    std::vector<TrajectoryStep> steps;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            steps.push_back(trajectory_step_from_json(json::parse(line)));
        } catch (const json::parse_error& e) {
            throw InputError((dir / "index.jsonl").string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    for (std::size_t i = 0; i < steps.size(); ++i)
        if (steps[i].step != static_cast<int>(i))
            throw InputError("trajectory steps must be contiguous from 0, found " + std::to_string(steps[i].step) +
                             " at line " + std::to_string(i + 1));
    return steps;
}

} // namespace pelletworld::io
