// pelletworld: train pixel-gridworld DQN agents, roll out trajectories, and
// explain decisions with pixel/object saliency maps.
//
// Exit codes: 0 success, 2 input error, 3 numerical failure.

#include <pelletworld/agent.hpp>
#include <pelletworld/json_io.hpp>
#include <pelletworld/netpbm.hpp>
#include <pelletworld/oracle.hpp>
#include <pelletworld/saliency.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace pelletworld;
using io::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;

std::string frame_name(int step)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frames/step_%06d.ppm", step);
    return buf;
}

struct TrainArgs {
    std::string config, out, mode, objects;
    std::int64_t seed = -1;
};

// config file: {format_version, grid | grid_file, train, templates_dir?, network?}
int cmd_train(const TrainArgs& args)
{
    json config = io::read_json_file(args.config);
    env::GridSpec grid = config.contains("grid_file")
                             ? io::grid_from_json(io::read_json_file(config.at("grid_file").get<std::string>()))
                             : io::grid_from_json(io::detail::get_field<json>(config, "grid", "config"));
    agent::TrainConfig cfg = io::train_config_from_json(io::detail::get_field<json>(config, "train", "config"));
    if (!args.mode.empty()) {
        auto m = agent::mode_from_name(args.mode);
        if (!m) throw io::InputError("--mode must be dqn or ddqn");
        cfg.mode = *m;
    }
    if (!args.objects.empty()) {
        if (args.objects != "on" && args.objects != "off") throw io::InputError("--objects must be on or off");
        cfg.use_objects = args.objects == "on";
    }
    if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);

    std::vector<nn::LayerSpec> arch;
    if (config.contains("network")) arch = io::layer_specs_from_json(config.at("network"));

    std::string templates_dir = io::detail::get_or<std::string>(config, "templates_dir", "", "config");
    objrec::TemplateSet templates;
    if (cfg.use_objects) {
        if (templates_dir.empty())
            throw io::InputError("config: use_objects requires templates_dir");
        templates = io::load_template_set(templates_dir);
    }

    fs::create_directories(args.out);
    std::ofstream metrics(fs::path(args.out) / "episodes.jsonl");
    if (!metrics)
        throw io::InputError("cannot write metrics log in " + args.out);
    auto sink = [&metrics](const agent::EpisodeStats& e) {
        json j = {{"episode", e.episode},       {"steps", e.steps},
                  {"return_raw", e.return_raw}, {"return_norm", e.return_norm},
                  {"discounted_return", e.discounted_return}, {"epsilon", e.epsilon}};
        metrics << j.dump() << "\n";
    };

    auto result = agent::train(grid, cfg.use_objects ? &templates : nullptr, cfg, arch, sink);
    metrics.flush();

    io::CheckpointInfo info;
    info.arch = result.net.specs;
    info.in_channels = result.net.in_channels;
    info.in_h = result.net.in_h;
    info.in_w = result.net.in_w;
    info.k = cfg.use_objects ? templates.k() : 0;
    info.use_objects = cfg.use_objects;
    info.cfg = cfg;
    info.grid = grid;
    info.templates_dir = templates_dir;
    info.steps_trained = result.steps_trained;
    info.optimizer_steps = result.optimizer_steps;
    info.stopped_early = result.stopped_early;

    if (result.failed) {
        info.diagnostic = true;
        info.failure_message = result.failure_message;
        info.evaluation = nullptr;
        io::save_checkpoint(args.out, result.net, info);
        std::cerr << "numerical failure: " << result.failure_message << " (diagnostic checkpoint saved to "
                  << args.out << ")\n";
        return kExitNumerical;
    }

    if (cfg.eval_episodes > 0) {
        auto ev = agent::evaluate(result.net, grid, cfg.use_objects ? &templates : nullptr, cfg.use_objects,
                                  cfg.eval_episodes, cfg.eval_epsilon, cfg.seed + 1, cfg.gamma,
                                  cfg.max_episode_steps);
        info.evaluation = {{"episodes", ev.episodes},
                           {"epsilon", cfg.eval_epsilon},
                           {"seed", cfg.seed + 1},
                           {"mean_return_raw", ev.mean_return_raw},
                           {"std_return_raw", ev.std_return_raw},
                           {"mean_return_norm", ev.mean_return_norm},
                           {"std_return_norm", ev.std_return_norm},
                           {"mean_discounted_return", ev.mean_discounted},
                           {"std_discounted_return", ev.std_discounted},
                           {"mean_length", ev.mean_length}};
    } else {
        info.evaluation = nullptr;
    }

    io::save_checkpoint(args.out, result.net, info);
    std::cout << "trained " << result.steps_trained << " steps (" << result.optimizer_steps << " optimizer steps, "
              << result.episodes.size() << " episodes" << (result.stopped_early ? ", stopped early" : "") << ")\n";
    if (!info.evaluation.is_null())
        std::cout << "evaluation: mean normalized return " << info.evaluation["mean_return_norm"].dump() << "\n";
    std::cout << "checkpoint: " << args.out << "\n";
    return kExitOk;
}

struct RolloutArgs {
    std::string ckpt, record, templates;
    int episodes = 1;
    double epsilon = 0.0;
    std::uint64_t seed = 0;
};

int cmd_rollout(const RolloutArgs& args)
{
    if (args.episodes <= 0)
        throw io::InputError("--episodes must be positive");
    auto [net, info] = io::load_checkpoint(args.ckpt);
    const env::GridSpec& grid = info.grid;

    std::string tdir = !args.templates.empty() ? args.templates : info.templates_dir;
    if (tdir.empty())
        throw io::InputError("no template directory: pass --templates or record one in the checkpoint");
    auto templates = io::load_template_set(tdir);

    const int k = info.use_objects ? templates.k() : 0;
    const int H = grid.height * grid.tile_size, W = grid.width * grid.tile_size;
    if (net.in_channels != 12 + k || net.in_h != H || net.in_w != W)
        throw io::InputError("checkpoint input " + nn::shape_str({net.in_channels, net.in_h, net.in_w}) +
                             " incompatible with environment " + nn::shape_str({12 + k, H, W}));

    fs::create_directories(fs::path(args.record) / "frames");
    std::ofstream index(fs::path(args.record) / "index.jsonl");
    if (!index)
        throw io::InputError("cannot write " + args.record);

    std::mt19937_64 rng(args.seed);
    int step_id = 0;
    for (int ep = 0; ep < args.episodes; ++ep) {
        auto cur = env::reset(grid);
        std::array<env::GameState, 4> hist = {cur, cur, cur, cur};
        for (int t = 0; t < info.cfg.max_episode_steps && !cur.terminal; ++t) {
            std::array<env::Frame, 4> frames;
            for (int i = 0; i < 4; ++i) frames[i] = env::render(grid, hist[i]);
            auto dets = objrec::detect_all(frames[3], templates);

            nn::Tensor st;
            if (info.use_objects) {
                auto channels = objrec::encode_object_channels(H, W, dets, k);
                st = agent::assemble_state(frames, &channels);
            } else {
                st = agent::assemble_state(frames, nullptr);
            }
            auto a = agent::select_action(net, st, static_cast<float>(args.epsilon), rng);
            auto out = env::step(grid, cur, a);
            float rn = agent::normalize_reward(out.reward_raw, grid.max_abs_reward);

            io::TrajectoryStep rec;
            rec.step = step_id;
            rec.action = a;
            rec.reward_raw = out.reward_raw;
            rec.reward_norm = rn;
            rec.terminal = out.terminal;
            rec.frame_file = frame_name(step_id);
            rec.detections = dets;
            io::write_ppm(fs::path(args.record) / rec.frame_file, frames[3]);
            index << io::trajectory_step_to_json(rec).dump() << "\n";

            ++step_id;
            cur = out.state;
            hist = {hist[1], hist[2], hist[3], cur};
        }
    }
    json meta = {{"format_version", io::kFormatVersion},
                 {"checkpoint", args.ckpt},
                 {"episodes", args.episodes},
                 {"epsilon", args.epsilon},
                 {"seed", args.seed},
                 {"steps", step_id},
                 {"use_objects", info.use_objects},
                 {"k", k},
                 {"max_episode_steps", info.cfg.max_episode_steps}};
    io::write_json_file(fs::path(args.record) / "meta.json", meta);
    std::cout << "recorded " << step_id << " steps over " << args.episodes << " episodes in " << args.record << "\n";
    return kExitOk;
}

struct SaliencyArgs {
    std::string ckpt, traj, kind, out;
    int step = 0;
};

int cmd_saliency(const SaliencyArgs& args)
{
    if (args.kind != "pixel" && args.kind != "object")
        throw io::InputError("--kind must be pixel or object");
    auto [net, info] = io::load_checkpoint(args.ckpt);
    auto steps = io::load_trajectory(args.traj);
    if (args.step < 0 || args.step >= static_cast<int>(steps.size()))
        throw io::InputError("step " + std::to_string(args.step) + " out of range (trajectory holds " +
                             std::to_string(steps.size()) + " steps)");

    // episode boundaries: after a terminal step or a full-length episode
    std::vector<int> episode_start(steps.size(), 0);
    int start = 0;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        episode_start[i] = start;
        if (steps[i].terminal || static_cast<int>(i) - start + 1 >= info.cfg.max_episode_steps)
            start = static_cast<int>(i) + 1;
    }

    // history N-3..N, repeating the episode's first frame when short
    std::array<env::Frame, 4> frames;
    for (int i = 0; i < 4; ++i) {
        int idx = std::max(args.step - 3 + i, episode_start[args.step]);
        frames[i] = io::read_ppm(fs::path(args.traj) / steps[idx].frame_file);
    }

    nn::Tensor state;
    if (info.use_objects) {
        auto channels = objrec::encode_object_channels(frames[3].h, frames[3].w, steps[args.step].detections, info.k);
        state = agent::assemble_state(frames, &channels);
    } else {
        state = agent::assemble_state(frames, nullptr);
    }
    const int action = static_cast<int>(steps[args.step].action);

    fs::create_directories(args.out);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%s_%06d", args.kind.c_str(), args.step);

    if (args.kind == "pixel") {
        auto map = saliency::pixel_saliency(net, state, action);
        io::write_pgm(fs::path(args.out) / (std::string(stem) + ".pgm"), saliency::render_pixel_saliency(map));
        json j = {{"format_version", io::kFormatVersion},
                  {"kind", "pixel"},
                  {"step", args.step},
                  {"action", env::action_name(steps[args.step].action)},
                  {"q_base", map.q_value}};
        io::write_json_file(fs::path(args.out) / (std::string(stem) + ".json"), j);
    } else {
        auto result = saliency::object_saliency(net, state, steps[args.step].detections, action,
                                                env::kBackgroundColor);
        io::write_pgm(fs::path(args.out) / (std::string(stem) + ".pgm"),
                      saliency::render_object_saliency(frames[3], result));
        json objects = json::array();
        for (const auto& [det, w] : result.weights)
            objects.push_back({{"type_id", det.type_id}, {"x", det.x}, {"y", det.y}, {"w", w}});
        json j = {{"format_version", io::kFormatVersion},
                  {"kind", "object"},
                  {"step", args.step},
                  {"action", env::action_name(steps[args.step].action)},
                  {"q_base", result.q_base},
                  {"forward_passes", result.forward_passes},
                  {"objects", objects}};
        io::write_json_file(fs::path(args.out) / (std::string(stem) + ".json"), j);
    }
    std::cout << "wrote " << args.out << "/" << stem << ".{pgm,json}\n";
    return kExitOk;
}

struct RecognizeArgs {
    std::string frame, templates, out;
    double threshold = 0.95;
    double iou = 0.3;
};

int cmd_recognize(const RecognizeArgs& args)
{
    auto frame = io::read_ppm(args.frame);
    auto templates = io::load_template_set(args.templates);
    auto dets = objrec::detect_all(frame, templates, static_cast<float>(args.threshold),
                                   static_cast<float>(args.iou));
    json j = {{"format_version", io::kFormatVersion},
              {"frame", args.frame},
              {"threshold", args.threshold},
              {"iou_thresh", args.iou},
              {"detections", io::detections_to_json(dets)}};
    io::write_json_file(args.out, j);
    std::cout << dets.size() << " detections -> " << args.out << "\n";
    return kExitOk;
}

struct OracleArgs {
    std::string grid, out;
    double gamma = 0.99;
    double tol = 1e-9;
};

int cmd_oracle(const OracleArgs& args)
{
    auto grid = io::grid_from_json(io::read_json_file(args.grid));
    auto oracle = env::value_iteration_oracle(grid, args.gamma, args.tol);

    std::cout << "states " << oracle.states.size() << ", sweeps " << oracle.sweeps << ", v_start "
              << oracle.v_start() << "\n";
    if (args.out.empty()) return kExitOk;

    // streamed write: the policy table can hold hundreds of thousands of rows
    std::ofstream out(args.out);
    if (!out)
        throw io::InputError("cannot write " + args.out);
    out << "{\n  \"format_version\": " << io::kFormatVersion << ",\n  \"gamma\": " << args.gamma
        << ",\n  \"tol\": " << args.tol << ",\n  \"states\": " << oracle.states.size()
        << ",\n  \"sweeps\": " << oracle.sweeps << ",\n  \"v_start\": " << json(oracle.v_start()).dump()
        << ",\n  \"policy\": [\n";
    for (std::size_t i = 0; i < oracle.states.size(); ++i) {
        const auto& s = oracle.states[i];
        json row = {{"agent", {grid.row_of(s.agent), grid.col_of(s.agent)}},
                    {"items", s.items},
                    {"terminal", s.terminal},
                    {"value", oracle.values[i]}};
        if (grid.ghost_enabled) {
            row["ghost"] = {grid.row_of(s.ghost), grid.col_of(s.ghost)};
            row["phase"] = s.ghost_phase;
        }
        if (!s.terminal) row["action"] = env::action_name(oracle.greedy[i]);
        out << "    " << row.dump() << (i + 1 < oracle.states.size() ? "," : "") << "\n";
    }
    out << "  ]\n}\n";
    std::cout << "policy table -> " << args.out << "\n";
    return kExitOk;
}

int cmd_make_assets(const std::string& out)
{
    fs::path root(out);
    io::save_template_set(root / "templates", objrec::canonical_templates());

    fs::create_directories(root / "grids");
    io::write_json_file(root / "grids" / "default.json", io::grid_to_json(env::default_grid(true)));
    io::write_json_file(root / "grids" / "default_noghost.json", io::grid_to_json(env::default_grid(false)));

    // desk-scale architecture: tile-aligned encoder, two heads of plain relu MLP
    json network = io::layer_specs_to_json({nn::LayerSpec::conv(16, 8, 8, 8), nn::LayerSpec::relu(),
                                            nn::LayerSpec::conv(16, 3, 3, 1), nn::LayerSpec::relu(),
                                            nn::LayerSpec::flatten(), nn::LayerSpec::fc(128), nn::LayerSpec::relu(),
                                            nn::LayerSpec::fc(env::kNumActions)});
    fs::create_directories(root / "configs");
    agent::TrainConfig cfg;
    json train_dqn = {{"format_version", io::kFormatVersion},
                      {"grid", io::grid_to_json(env::default_grid(false))},
                      {"train", io::train_config_to_json(cfg)},
                      {"templates_dir", (root / "templates").string()},
                      {"network", network}};
    io::write_json_file(root / "configs" / "train_dqn.json", train_dqn);

    agent::TrainConfig ocfg;
    ocfg.use_objects = true;
    json train_odqn = {{"format_version", io::kFormatVersion},
                       {"grid", io::grid_to_json(env::default_grid(true))},
                       {"train", io::train_config_to_json(ocfg)},
                       {"templates_dir", (root / "templates").string()},
                       {"network", network}};
    io::write_json_file(root / "configs" / "train_odqn.json", train_odqn);

    std::cout << "assets in " << out << ": templates/, grids/, configs/\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"PelletWorld DQN workbench: training, rollouts, object recognition, saliency maps"};
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* train = app.add_subcommand("train", "train a DQN/DDQN agent from a JSON config");
    train->add_option("--config", train_args.config, "config JSON")->required();
    train->add_option("--out", train_args.out, "checkpoint directory")->required();
    train->add_option("--mode", train_args.mode, "dqn or ddqn (overrides config)");
    train->add_option("--objects", train_args.objects, "on or off (overrides config)");
    train->add_option("--seed", train_args.seed, "seed (overrides config)");

    RolloutArgs rollout_args;
    auto* rollout = app.add_subcommand("rollout", "record frames, actions and detections of a checkpointed agent");
    rollout->add_option("--ckpt", rollout_args.ckpt, "checkpoint directory")->required();
    rollout->add_option("--record", rollout_args.record, "output trajectory directory")->required();
    rollout->add_option("--episodes", rollout_args.episodes, "episode count")->required();
    rollout->add_option("--epsilon", rollout_args.epsilon, "evaluation epsilon (default 0)");
    rollout->add_option("--seed", rollout_args.seed, "rollout seed");
    rollout->add_option("--templates", rollout_args.templates, "template directory (defaults to checkpoint's)");

    SaliencyArgs saliency_args;
    auto* sal = app.add_subcommand("saliency", "compute a saliency map at one recorded step");
    sal->add_option("--ckpt", saliency_args.ckpt, "checkpoint directory")->required();
    sal->add_option("--traj", saliency_args.traj, "trajectory directory")->required();
    sal->add_option("--step", saliency_args.step, "step index")->required();
    sal->add_option("--kind", saliency_args.kind, "pixel or object")->required();
    sal->add_option("--out", saliency_args.out, "output directory")->required();

    RecognizeArgs rec_args;
    auto* rec = app.add_subcommand("recognize", "run the template matcher over one PPM frame");
    rec->add_option("--frame", rec_args.frame, "input PPM")->required();
    rec->add_option("--templates", rec_args.templates, "template directory")->required();
    rec->add_option("--out", rec_args.out, "output JSON")->required();
    rec->add_option("--threshold", rec_args.threshold, "match threshold (default 0.95)");
    rec->add_option("--iou", rec_args.iou, "NMS IoU threshold (default 0.3)");

    OracleArgs oracle_args;
    auto* orc = app.add_subcommand("oracle", "tabular value iteration over a grid spec");
    orc->add_option("--grid", oracle_args.grid, "grid JSON")->required();
    orc->add_option("--gamma", oracle_args.gamma, "discount factor")->required();
    orc->add_option("--tol", oracle_args.tol, "Bellman residual tolerance (default 1e-9)");
    orc->add_option("--out", oracle_args.out, "policy table JSON (optional)");

    std::string assets_out = "assets";
    auto* assets = app.add_subcommand("make-assets", "write canonical templates, grids and sample configs");
    assets->add_option("--out", assets_out, "output directory (default assets/)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return kExitInput;
    }

    try {
        if (train->parsed()) return cmd_train(train_args);
        if (rollout->parsed()) return cmd_rollout(rollout_args);
        if (sal->parsed()) return cmd_saliency(saliency_args);
        if (rec->parsed()) return cmd_recognize(rec_args);
        if (orc->parsed()) return cmd_oracle(oracle_args);
        if (assets->parsed()) return cmd_make_assets(assets_out);
    } catch (const nn::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    }
    return kExitInput;
}
