#include <dmarl/config.hpp>
#include <dmarl/consensus.hpp>
#include <dmarl/continuous.hpp>
#include <dmarl/experiment.hpp>
#include <dmarl/mdp.hpp>
#include <dmarl/spread.hpp>
#include <dmarl/tabular.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Eigenvalues>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dmarl;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitAssert = 2;

/// Thrown when an --assert check fails; mapped to exit code 2.
struct AssertionFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

ConfigTable load_table(const std::string& path) {
    return path.empty() ? ConfigTable{} : load_config(path);
}

// Flag > config file > built-in default. The config key is consumed either
// way so a flag override does not turn a valid file into an unknown-key error.
long long pick_int(const CLI::App* sub, const char* flag, long long cli_value,
                   const ConfigTable& cfg, const char* key, long long fallback) {
    const long long from_cfg = cfg.get_int(key, fallback);
    return sub->count(flag) ? cli_value : from_cfg;
}

double pick_double(const CLI::App* sub, const char* flag, double cli_value,
                   const ConfigTable& cfg, const char* key, double fallback) {
    const double from_cfg = cfg.get_double(key, fallback);
    return sub->count(flag) ? cli_value : from_cfg;
}

bool pick_flag(const CLI::App* sub, const char* flag, const ConfigTable& cfg, const char* key) {
    const bool from_cfg = cfg.get_bool(key, false);
    return sub->count(flag) ? true : from_cfg;
}

std::string pick_string(const CLI::App* sub, const char* flag, const std::string& cli_value,
                        const ConfigTable& cfg, const char* key, const std::string& fallback) {
    const std::string from_cfg = cfg.get_string(key, fallback);
    return sub->count(flag) ? cli_value : from_cfg;
}

std::vector<int> to_int_vector(const std::vector<long long>& xs, const char* what) {
    std::vector<int> out;
    out.reserve(xs.size());
    for (long long x : xs) {
        if (x < 1)
            throw std::runtime_error(std::string(what) + ": entries must be >= 1");
        out.push_back(static_cast<int>(x));
    }
    return out;
}

json threshold_json(long long steps_to_threshold) {
    return steps_to_threshold < 0 ? json(nullptr) : json(steps_to_threshold);
}

void write_json_file(const fs::path& path, const json& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << body.dump(2) << "\n";
}

std::vector<std::uint64_t> resolve_seeds(const ConfigTable& cfg, std::uint64_t base_seed,
                                         long long runs) {
    if (runs < 1)
        throw std::runtime_error("runs must be >= 1");
    std::vector<std::uint64_t> seeds;
    if (cfg.has("experiment.seeds")) {
        for (long long s : cfg.get_int_list("experiment.seeds", {}))
            seeds.push_back(static_cast<std::uint64_t>(s));
        if (seeds.empty())
            throw std::runtime_error("experiment.seeds must not be empty");
        return seeds;
    }
    for (long long k = 0; k < runs; ++k)
        seeds.push_back(base_seed + static_cast<std::uint64_t>(k));
    return seeds;
}

void assert_thresholds_reached(bool assert_mode, std::optional<double> threshold,
                               const std::vector<SeriesSummary>& summaries) {
    if (!assert_mode)
        return;
    if (!threshold)
        throw std::runtime_error("--assert on a training command needs --threshold");
    for (std::size_t k = 0; k < summaries.size(); ++k)
        if (summaries[k].steps_to_threshold < 0)
            throw AssertionFailure("run " + std::to_string(k) +
                                   " never reached the return threshold " +
                                   format_double(*threshold));
}

// --- train-tabular ---------------------------------------------------------

struct TrainTabularOpts {
    std::string config_path, out_dir;
    std::uint64_t seed = 0, mdp_seed = 7;
    long long states = 20, agents = 4, actions = 3, steps = 100000, episode_length = 100,
              runs = 1;
    double gamma = 0.9, omega = 0.7, scale = 1.0, beta = 0.01, ratio = 10.0, clip = 5.0,
           threshold = 0.0, init_logit_scale = 0.0;
    bool sequential = false, track_residual = false, assert_mode = false;
};

void run_train_tabular(const TrainTabularOpts& o, const CLI::App* sub) {
    const ConfigTable cfg = load_table(o.config_path);

    const std::uint64_t mdp_seed =
        static_cast<std::uint64_t>(pick_int(sub, "--mdp-seed", o.mdp_seed, cfg, "mdp.seed", 7));
    const int states = static_cast<int>(pick_int(sub, "--states", o.states, cfg, "mdp.states", 20));
    const int agents = static_cast<int>(pick_int(sub, "--agents", o.agents, cfg, "mdp.agents", 4));
    const int actions =
        static_cast<int>(pick_int(sub, "--actions", o.actions, cfg, "mdp.actions", 3));
    const double gamma = pick_double(sub, "--gamma", o.gamma, cfg, "mdp.gamma", 0.9);
    std::vector<int> action_sizes(agents, actions);
    if (cfg.has("mdp.action_sizes")) {
        action_sizes = to_int_vector(cfg.get_int_list("mdp.action_sizes", {}), "mdp.action_sizes");
        if (static_cast<int>(action_sizes.size()) != agents)
            throw std::runtime_error("mdp.action_sizes length differs from the agent count");
    }

    TabularConfig train;
    train.steps = pick_int(sub, "--steps", o.steps, cfg, "tabular.steps", 100000);
    train.episode_length = static_cast<int>(
        pick_int(sub, "--episode-length", o.episode_length, cfg, "tabular.episode_length", 100));
    train.alpha.exponent = pick_double(sub, "--omega", o.omega, cfg, "tabular.omega", 0.7);
    train.alpha.scale = pick_double(sub, "--scale", o.scale, cfg, "tabular.scale", 1.0);
    train.beta = pick_double(sub, "--beta", o.beta, cfg, "tabular.beta", 0.01);
    train.timescale_ratio = pick_double(sub, "--ratio", o.ratio, cfg, "tabular.ratio", 10.0);
    const double clip = pick_double(sub, "--clip", o.clip, cfg, "tabular.clip", 5.0);
    train.clip_min = -clip;
    train.clip_max = clip;
    train.init_logit_scale = pick_double(sub, "--init-logit-scale", o.init_logit_scale, cfg,
                                         "tabular.init_logit_scale", 0.0);
    train.sequential = pick_flag(sub, "--sequential", cfg, "tabular.sequential");
    train.track_q_residual = pick_flag(sub, "--track-residual", cfg, "tabular.track_q_residual");

    const std::uint64_t base_seed =
        static_cast<std::uint64_t>(pick_int(sub, "--seed", o.seed, cfg, "experiment.seed", 0));
    const long long runs = pick_int(sub, "--runs", o.runs, cfg, "experiment.runs", 1);
    std::optional<double> threshold;
    if (sub->count("--threshold") || cfg.has("experiment.threshold"))
        threshold = pick_double(sub, "--threshold", o.threshold, cfg, "experiment.threshold", 0.0);
    const std::vector<std::uint64_t> seeds = resolve_seeds(cfg, base_seed, runs);
    cfg.require_all_consumed();

    const Mdp mdp = generate_random_mdp(mdp_seed, states, action_sizes, gamma);

    if (!o.out_dir.empty())
        fs::create_directories(o.out_dir);

    json summary;
    summary["task"] = "train-tabular";
    summary["mdp"] = {{"seed", mdp_seed},
                      {"states", states},
                      {"action_sizes", action_sizes},
                      {"gamma", gamma}};
    summary["config"] = {{"steps", train.steps},
                         {"episode_length", train.episode_length},
                         {"omega", train.alpha.exponent},
                         {"scale", train.alpha.scale},
                         {"beta", train.beta},
                         {"ratio", train.timescale_ratio},
                         {"clip", clip},
                         {"init_logit_scale", train.init_logit_scale},
                         {"sequential", train.sequential}};
    summary["per_seed"] = json::array();

    std::vector<double> final_means, aucs;
    std::vector<SeriesSummary> run_summaries;
    for (const std::uint64_t seed : seeds) {
        train.seed = seed;
        const TabularTrainLog log = train_tabular(mdp, train);
        std::vector<std::pair<long long, double>> series;
        series.reserve(log.rows.size());
        for (const EpisodeRow& row : log.rows)
            series.emplace_back(row.step, row.episode_return);
        const SeriesSummary s = summarize_series(series, 0.1, threshold);
        run_summaries.push_back(s);
        final_means.push_back(s.final_mean);
        aucs.push_back(s.auc);

        if (!o.out_dir.empty())
            write_tabular_csv((fs::path(o.out_dir) / ("seed_" + std::to_string(seed) + ".csv"))
                                  .string(),
                              log);
        summary["per_seed"].push_back({{"seed", seed},
                                       {"auc", s.auc},
                                       {"final_mean", s.final_mean},
                                       {"steps_to_threshold",
                                        threshold_json(s.steps_to_threshold)}});
        std::cout << "seed " << seed << ": episodes " << log.rows.size()
                  << ", auc " << format_double(s.auc) << ", final_mean "
                  << format_double(s.final_mean) << "\n";
    }

    const Aggregate fin = aggregate(final_means);
    const Aggregate auc = aggregate(aucs);
    summary["aggregate"] = {{"final_return_mean", fin.mean},
                            {"final_return_stddev", fin.stddev},
                            {"auc_mean", auc.mean},
                            {"auc_stddev", auc.stddev}};
    if (threshold)
        summary["config"]["threshold"] = *threshold;

    if (!o.out_dir.empty()) {
        save_mdp(mdp, (fs::path(o.out_dir) / "mdp.json").string(), mdp_seed);
        write_json_file(fs::path(o.out_dir) / "summary.json", summary);
    } else {
        std::cout << summary.dump(2) << "\n";
    }
    std::cout << "final return " << format_double(fin.mean) << " +/- "
              << format_double(fin.stddev) << " across " << seeds.size() << " seed(s)\n";

    assert_thresholds_reached(o.assert_mode, threshold, run_summaries);
}

// --- train-continuous -------------------------------------------------------

struct TrainContinuousOpts {
    std::string config_path, out_dir, env_name = "spread", graph_spec;
    std::uint64_t seed = 0;
    long long agents = 3, steps = 200000, episode_length = 25, replay_capacity = 10000,
              batch = 64, warmup_batches = 10, consensus_rounds = 1, runs = 1,
              eval_episodes = 100;
    double collision_radius = 0.15, gamma = 0.95, critic_lr = 1e-3, actor_lr = 1e-4,
           momentum = 0.0, polyak = 0.005, threshold = 0.0;
    bool lazy_refresh = false, trajectories = false, assert_mode = false;
};

void run_train_continuous(const TrainContinuousOpts& o, const CLI::App* sub) {
    const ConfigTable cfg = load_table(o.config_path);

    const std::string env_name =
        pick_string(sub, "--env", o.env_name, cfg, "env.name", "spread");
    if (env_name != "spread")
        throw std::runtime_error("unknown environment '" + env_name +
                                 "' (this build ships: spread)");

    SpreadConfig env;
    env.num_agents =
        static_cast<int>(pick_int(sub, "--agents", o.agents, cfg, "env.agents", 3));
    env.episode_length = static_cast<int>(
        pick_int(sub, "--episode-length", o.episode_length, cfg, "env.episode_length", 25));
    env.collision_radius = pick_double(sub, "--collision-radius", o.collision_radius, cfg,
                                       "env.collision_radius", 0.15);
    env.damping = cfg.get_double("env.damping", env.damping);
    env.force_gain = cfg.get_double("env.force_gain", env.force_gain);
    env.dt = cfg.get_double("env.dt", env.dt);
    env.speed_cap = cfg.get_double("env.speed_cap", env.speed_cap);
    env.arena_half_width = cfg.get_double("env.arena_half_width", env.arena_half_width);

    ContinuousConfig train;
    train.total_steps = pick_int(sub, "--steps", o.steps, cfg, "continuous.steps", 200000);
    train.batch_size = static_cast<int>(pick_int(sub, "--batch", o.batch, cfg,
                                                 "continuous.batch_size", 64));
    train.warmup_batches = static_cast<int>(pick_int(sub, "--warmup-batches", o.warmup_batches,
                                                     cfg, "continuous.warmup_batches", 10));
    train.replay_capacity = static_cast<std::size_t>(pick_int(
        sub, "--replay-capacity", o.replay_capacity, cfg, "continuous.replay_capacity", 10000));
    train.gamma = pick_double(sub, "--gamma", o.gamma, cfg, "continuous.gamma", 0.95);
    train.critic_lr =
        pick_double(sub, "--critic-lr", o.critic_lr, cfg, "continuous.critic_lr", 1e-3);
    train.actor_lr = pick_double(sub, "--actor-lr", o.actor_lr, cfg, "continuous.actor_lr", 1e-4);
    train.momentum = pick_double(sub, "--momentum", o.momentum, cfg, "continuous.momentum", 0.0);
    train.polyak = pick_double(sub, "--polyak", o.polyak, cfg, "continuous.polyak", 0.005);
    train.consensus_rounds = static_cast<int>(pick_int(
        sub, "--consensus-rounds", o.consensus_rounds, cfg, "continuous.consensus_rounds", 1));
    train.lazy_refresh = pick_flag(sub, "--lazy-refresh", cfg, "continuous.lazy_refresh");
    train.actor_hidden =
        to_int_vector(cfg.get_int_list("continuous.actor_hidden", {64, 64}), "actor_hidden");
    train.critic_hidden =
        to_int_vector(cfg.get_int_list("continuous.critic_hidden", {64, 64}), "critic_hidden");

    const std::string graph_spec = pick_string(sub, "--graph", o.graph_spec, cfg,
                                               "continuous.graph", "");
    const Graph graph = graph_spec.empty()
                            ? (env.num_agents == 1 ? graph_from_edges(1, {})
                                                   : make_complete(env.num_agents))
                            : parse_graph_spec(graph_spec);

    const std::uint64_t base_seed =
        static_cast<std::uint64_t>(pick_int(sub, "--seed", o.seed, cfg, "experiment.seed", 0));
    const long long runs = pick_int(sub, "--runs", o.runs, cfg, "experiment.runs", 1);
    const long long eval_episodes = pick_int(sub, "--eval-episodes", o.eval_episodes, cfg,
                                             "experiment.eval_episodes", 100);
    std::optional<double> threshold;
    if (sub->count("--threshold") || cfg.has("experiment.threshold"))
        threshold = pick_double(sub, "--threshold", o.threshold, cfg, "experiment.threshold", 0.0);
    const std::vector<std::uint64_t> seeds = resolve_seeds(cfg, base_seed, runs);
    cfg.require_all_consumed();

    if (o.trajectories && o.out_dir.empty())
        throw std::runtime_error("--trajectories needs --out to know where to write");
    if (!o.out_dir.empty())
        fs::create_directories(o.out_dir);

    json summary;
    summary["task"] = "train-continuous";
    summary["env"] = {{"name", "spread"},
                      {"agents", env.num_agents},
                      {"episode_length", env.episode_length},
                      {"collision_radius", env.collision_radius}};
    summary["config"] = {{"steps", train.total_steps},
                         {"batch_size", train.batch_size},
                         {"warmup_batches", train.warmup_batches},
                         {"replay_capacity", train.replay_capacity},
                         {"gamma", train.gamma},
                         {"critic_lr", train.critic_lr},
                         {"actor_lr", train.actor_lr},
                         {"polyak", train.polyak},
                         {"consensus_rounds", train.consensus_rounds},
                         {"lazy_refresh", train.lazy_refresh},
                         {"actor_hidden", train.actor_hidden},
                         {"critic_hidden", train.critic_hidden},
                         {"graph", graph_spec.empty() ? "complete" : graph_spec}};
    summary["per_seed"] = json::array();

    std::vector<double> final_means, aucs;
    std::vector<SeriesSummary> run_summaries;
    for (const std::uint64_t seed : seeds) {
        ContinuousConfig per_run = train;
        per_run.seed = seed;
        std::unique_ptr<TrajectoryWriter> writer;
        if (o.trajectories) {
            writer = std::make_unique<TrajectoryWriter>(
                (fs::path(o.out_dir) / ("seed_" + std::to_string(seed) + "_trajectory.csv"))
                    .string());
            per_run.trajectory_sink = [&writer](int episode, int step, const SpreadState& state,
                                                const Eigen::VectorXd& rewards) {
                writer->record(episode, step, state, rewards);
            };
        }

        const ContinuousTrainLog log = train_continuous(env, graph, per_run);
        std::vector<std::pair<long long, double>> series;
        series.reserve(log.rows.size());
        for (const ContinuousEpisodeRow& row : log.rows)
            series.emplace_back(static_cast<long long>(row.episode + 1) * env.episode_length,
                                row.episode_return);
        const SeriesSummary s = summarize_series(series, 0.1, threshold);
        run_summaries.push_back(s);
        final_means.push_back(s.final_mean);
        aucs.push_back(s.auc);

        const SpreadEvaluation eval = evaluate_spread(
            env, log.agents, static_cast<int>(eval_episodes), mix_seed(seed, 424242));

        if (!o.out_dir.empty())
            write_continuous_csv(
                (fs::path(o.out_dir) / ("seed_" + std::to_string(seed) + ".csv")).string(),
                log.rows);
        summary["per_seed"].push_back(
            {{"seed", seed},
             {"auc", s.auc},
             {"final_mean", s.final_mean},
             {"steps_to_threshold", threshold_json(s.steps_to_threshold)},
             {"eval_mean_return", eval.mean_return},
             {"eval_mean_final_distance", eval.mean_final_distance}});
        std::cout << "seed " << seed << ": episodes " << log.rows.size() << ", auc "
                  << format_double(s.auc) << ", final_mean " << format_double(s.final_mean)
                  << ", eval_return " << format_double(eval.mean_return)
                  << ", eval_distance " << format_double(eval.mean_final_distance) << "\n";
    }

    const Aggregate fin = aggregate(final_means);
    const Aggregate auc = aggregate(aucs);
    summary["aggregate"] = {{"final_return_mean", fin.mean},
                            {"final_return_stddev", fin.stddev},
                            {"auc_mean", auc.mean},
                            {"auc_stddev", auc.stddev}};
    if (threshold)
        summary["config"]["threshold"] = *threshold;

    if (!o.out_dir.empty())
        write_json_file(fs::path(o.out_dir) / "summary.json", summary);
    else
        std::cout << summary.dump(2) << "\n";
    std::cout << "final return " << format_double(fin.mean) << " +/- "
              << format_double(fin.stddev) << " across " << seeds.size() << " seed(s)\n";

    assert_thresholds_reached(o.assert_mode, threshold, run_summaries);
}

// --- consensus-demo ---------------------------------------------------------

struct ConsensusOpts {
    std::string config_path, out_path, graph_spec = "ring:8";
    std::uint64_t seed = 0;
    long long iters = 500;
    double tol = 1e-8;
    bool assert_mode = false;
};

void run_consensus_demo(const ConsensusOpts& o, const CLI::App* sub) {
    const ConfigTable cfg = load_table(o.config_path);
    const std::string spec =
        pick_string(sub, "--graph", o.graph_spec, cfg, "consensus.graph", "ring:8");
    const long long iters = pick_int(sub, "--iters", o.iters, cfg, "consensus.iters", 500);
    const double tol = pick_double(sub, "--tol", o.tol, cfg, "consensus.tol", 1e-8);
    const std::uint64_t seed =
        static_cast<std::uint64_t>(pick_int(sub, "--seed", o.seed, cfg, "experiment.seed", 0));
    cfg.require_all_consumed();
    if (iters < 1)
        throw std::runtime_error("--iters must be >= 1");

    const Graph graph = parse_graph_spec(spec);
    const Eigen::MatrixXd kernel = consensus_kernel(graph);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eigen(kernel);
    const Eigen::VectorXd spectrum = eigen.eigenvalues(); // ascending
    const double lambda2 =
        graph.num_nodes > 1 ? spectrum(graph.num_nodes - 2) : 1.0;

    Rng rng(mix_seed(seed, 0));
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd x(graph.num_nodes);
    for (int i = 0; i < graph.num_nodes; ++i)
        x(i) = normal(rng);
    const double mean_before = x.mean();

    std::cout << "graph " << spec << ": " << graph.num_nodes << " nodes, "
              << graph.edges.size() << " edges, second-largest kernel eigenvalue "
              << format_double(lambda2) << "\n";

    std::unique_ptr<std::ofstream> csv;
    if (!o.out_path.empty()) {
        csv = std::make_unique<std::ofstream>(o.out_path, std::ios::binary);
        if (!*csv)
            throw std::runtime_error("cannot open " + o.out_path + " for writing");
        *csv << "iteration,deviation\n";
        *csv << 0 << "," << format_double(consensus_deviation(x)) << "\n";
    }

    const long long report_every = std::max<long long>(1, iters / 10);
    long long converged_at = -1;
    for (long long k = 1; k <= iters; ++k) {
        x = consensus_step(graph, x);
        const double deviation = consensus_deviation(x);
        if (csv)
            *csv << k << "," << format_double(deviation) << "\n";
        if (k % report_every == 0 || k == iters)
            std::cout << "  iteration " << k << ": deviation " << format_double(deviation)
                      << "\n";
        if (converged_at < 0 && deviation < tol)
            converged_at = k;
    }
    const double final_deviation = consensus_deviation(x);
    std::cout << "mean preserved: " << format_double(mean_before) << " -> "
              << format_double(x.mean()) << "\n";
    if (converged_at >= 0)
        std::cout << "deviation fell below " << format_double(tol) << " at iteration "
                  << converged_at << "\n";
    else
        std::cout << "deviation never fell below " << format_double(tol) << " ("
                  << format_double(final_deviation) << " after " << iters << " iterations)\n";

    if (o.assert_mode && final_deviation >= tol)
        throw AssertionFailure("final deviation " + format_double(final_deviation) +
                               " is not below " + format_double(tol));
}

// --- verify-theorem1: frozen-policy critics converge ------------------------

struct Theorem1Opts {
    std::string config_path, out_path;
    std::uint64_t seed = 0, mdp_seed = 7;
    long long states = 5, agents = 2, actions = 2, steps = 200000;
    double gamma = 0.8, omega = 0.7, scale = 1.0, tol = 0.05, init_logit_scale = 1.0;
    bool assert_mode = false;
};

void run_verify_theorem1(const Theorem1Opts& o, const CLI::App* sub) {
    const ConfigTable cfg = load_table(o.config_path);
    const std::uint64_t mdp_seed =
        static_cast<std::uint64_t>(pick_int(sub, "--mdp-seed", o.mdp_seed, cfg, "mdp.seed", 7));
    const int states = static_cast<int>(pick_int(sub, "--states", o.states, cfg, "mdp.states", 5));
    const int agents = static_cast<int>(pick_int(sub, "--agents", o.agents, cfg, "mdp.agents", 2));
    const int actions =
        static_cast<int>(pick_int(sub, "--actions", o.actions, cfg, "mdp.actions", 2));
    const double gamma = pick_double(sub, "--gamma", o.gamma, cfg, "mdp.gamma", 0.8);

    TabularConfig train;
    train.seed = static_cast<std::uint64_t>(pick_int(sub, "--seed", o.seed, cfg,
                                                     "experiment.seed", 0));
    train.steps = pick_int(sub, "--steps", o.steps, cfg, "tabular.steps", 200000);
    train.alpha.exponent = pick_double(sub, "--omega", o.omega, cfg, "tabular.omega", 0.7);
    train.alpha.scale = pick_double(sub, "--scale", o.scale, cfg, "tabular.scale", 1.0);
    train.beta = 0.0; // policies stay frozen; only the critics learn
    train.init_logit_scale = pick_double(sub, "--init-logit-scale", o.init_logit_scale, cfg,
                                         "tabular.init_logit_scale", 1.0);
    const double tol = pick_double(sub, "--tol", o.tol, cfg, "experiment.tol", 0.05);
    cfg.require_all_consumed();

    const Mdp mdp = generate_random_mdp(mdp_seed, states, std::vector<int>(agents, actions), gamma);
    const TabularTrainLog log = train_tabular(mdp, train);
    const JointPolicy frozen = policy_from_agents(log.agents);

    json report;
    report["check"] = "frozen-policy critic convergence";
    report["residuals"] = json::array();
    double worst = 0.0;
    for (int i = 0; i < agents; ++i) {
        const double residual =
            (log.agents[i].q - exact_local_q(mdp, frozen, i)).lpNorm<Eigen::Infinity>();
        worst = std::max(worst, residual);
        report["residuals"].push_back(residual);
        std::cout << "agent " << i << ": max |Q - Q_exact| = " << format_double(residual)
                  << "\n";
    }
    const bool pass = worst < tol;
    report["worst_residual"] = worst;
    report["tolerance"] = tol;
    report["pass"] = pass;
    std::cout << "worst residual " << format_double(worst) << " vs tolerance "
              << format_double(tol) << ": " << (pass ? "PASS" : "FAIL") << "\n";
    if (!o.out_path.empty())
        write_json_file(o.out_path, report);
    if (o.assert_mode && !pass)
        throw AssertionFailure("critic residual " + format_double(worst) +
                               " is not below " + format_double(tol));
}

// --- verify-theorem2: rotating exact improvement is monotone ----------------

struct Theorem2Opts {
    std::string config_path, out_path;
    std::uint64_t mdp_seed = 1;
    long long mdps = 20, states = 4, agents = 2, actions = 2, max_rounds = 100;
    double gamma = 0.9, monotone_tol = 1e-10;
    bool assert_mode = false;
};

void run_verify_theorem2(const Theorem2Opts& o, const CLI::App* sub) {
    const ConfigTable cfg = load_table(o.config_path);
    const std::uint64_t mdp_seed =
        static_cast<std::uint64_t>(pick_int(sub, "--mdp-seed", o.mdp_seed, cfg, "mdp.seed", 1));
    const long long mdps = pick_int(sub, "--mdps", o.mdps, cfg, "experiment.mdps", 20);
    const int states = static_cast<int>(pick_int(sub, "--states", o.states, cfg, "mdp.states", 4));
    const int agents = static_cast<int>(pick_int(sub, "--agents", o.agents, cfg, "mdp.agents", 2));
    const int actions =
        static_cast<int>(pick_int(sub, "--actions", o.actions, cfg, "mdp.actions", 2));
    const double gamma = pick_double(sub, "--gamma", o.gamma, cfg, "mdp.gamma", 0.9);
    const long long max_rounds =
        pick_int(sub, "--max-rounds", o.max_rounds, cfg, "experiment.max_rounds", 100);
    const double monotone_tol = pick_double(sub, "--monotone-tol", o.monotone_tol, cfg,
                                            "experiment.monotone_tol", 1e-10);
    cfg.require_all_consumed();
    if (mdps < 1)
        throw std::runtime_error("--mdps must be >= 1");

    json report;
    report["check"] = "rotating exact improvement: monotone values, finite termination";
    report["instances"] = json::array();
    bool all_pass = true;
    int worst_rounds = 0;
    for (long long k = 0; k < mdps; ++k) {
        const Mdp mdp = generate_random_mdp(mdp_seed + static_cast<std::uint64_t>(k), states,
                                            std::vector<int>(agents, actions), gamma);
        JointPolicy uniform;
        for (int i = 0; i < agents; ++i)
            uniform.per_agent.push_back(
                Eigen::MatrixXd::Constant(states, actions, 1.0 / actions));
        const ImprovementRun run = run_exact_improvement(mdp, uniform,
                                                         static_cast<int>(max_rounds),
                                                         monotone_tol);
        const bool pass = run.converged && run.monotone;
        all_pass = all_pass && pass;
        worst_rounds = std::max(worst_rounds, run.rounds);
        report["instances"].push_back({{"mdp_seed", mdp_seed + static_cast<std::uint64_t>(k)},
                                       {"rounds", run.rounds},
                                       {"converged", run.converged},
                                       {"monotone", run.monotone},
                                       {"worst_value_drop", run.worst_drop}});
        std::cout << "instance " << k << ": rounds " << run.rounds << ", monotone "
                  << (run.monotone ? "yes" : "NO") << ", converged "
                  << (run.converged ? "yes" : "NO") << ", worst value drop "
                  << format_double(run.worst_drop) << "\n";
    }
    report["all_pass"] = all_pass;
    report["max_rounds_seen"] = worst_rounds;
    std::cout << (all_pass ? "PASS" : "FAIL") << ": " << mdps
              << " instance(s), max rounds " << worst_rounds << "\n";
    if (!o.out_path.empty())
        write_json_file(o.out_path, report);
    if (o.assert_mode && !all_pass)
        throw AssertionFailure("an improvement run lost monotonicity or failed to terminate");
}

// --- compare -----------------------------------------------------------------

struct CompareOpts {
    std::string config_path, out_path;
    std::uint64_t seed = 0, mdp_seed = 7;
    long long mdps = 5, states = 20, agents = 4, actions = 3, steps = 100000,
              episode_length = 100;
    double gamma = 0.9, omega = 0.7, beta = 0.01, ratio = 10.0, epsilon = 0.1;
    bool assert_mode = false;
};

void run_compare(const CompareOpts& o, const CLI::App* sub) {
    const ConfigTable cfg = load_table(o.config_path);
    const std::uint64_t mdp_seed =
        static_cast<std::uint64_t>(pick_int(sub, "--mdp-seed", o.mdp_seed, cfg, "mdp.seed", 7));
    const long long mdps = pick_int(sub, "--mdps", o.mdps, cfg, "compare.mdps", 5);
    const int states = static_cast<int>(pick_int(sub, "--states", o.states, cfg, "mdp.states", 20));
    const int agents = static_cast<int>(pick_int(sub, "--agents", o.agents, cfg, "mdp.agents", 4));
    const int actions =
        static_cast<int>(pick_int(sub, "--actions", o.actions, cfg, "mdp.actions", 3));
    const double gamma = pick_double(sub, "--gamma", o.gamma, cfg, "mdp.gamma", 0.9);
    const std::uint64_t seed =
        static_cast<std::uint64_t>(pick_int(sub, "--seed", o.seed, cfg, "experiment.seed", 0));
    const long long steps = pick_int(sub, "--steps", o.steps, cfg, "compare.steps", 100000);
    const long long episode_length = pick_int(sub, "--episode-length", o.episode_length, cfg,
                                              "compare.episode_length", 100);

    // Both learners must spend the same interaction budget; rejecting a
    // mismatch keeps the comparison honest.
    const long long tabular_steps = cfg.get_int("compare.tabular_steps", steps);
    const long long joint_steps = cfg.get_int("compare.joint_steps", steps);
    if (tabular_steps != joint_steps)
        throw std::runtime_error("mismatched budgets: tabular_steps=" +
                                 std::to_string(tabular_steps) +
                                 " vs joint_steps=" + std::to_string(joint_steps) +
                                 "; a fair comparison needs equal step counts");

    TabularConfig tab;
    tab.steps = tabular_steps;
    tab.episode_length = static_cast<int>(episode_length);
    tab.alpha.exponent = pick_double(sub, "--omega", o.omega, cfg, "tabular.omega", 0.7);
    tab.beta = pick_double(sub, "--beta", o.beta, cfg, "tabular.beta", 0.01);
    tab.timescale_ratio = pick_double(sub, "--ratio", o.ratio, cfg, "tabular.ratio", 10.0);

    JointQConfig joint;
    joint.steps = joint_steps;
    joint.episode_length = static_cast<int>(episode_length);
    joint.alpha.exponent = tab.alpha.exponent;
    joint.epsilon = pick_double(sub, "--epsilon", o.epsilon, cfg, "joint.epsilon", 0.1);
    joint.joint_action_cap =
        static_cast<int>(cfg.get_int("joint.action_cap", joint.joint_action_cap));
    cfg.require_all_consumed();
    if (mdps < 1)
        throw std::runtime_error("--mdps must be >= 1");

    json report;
    report["task"] = "compare";
    report["instances"] = json::array();
    int wins = 0;
    std::cout << "instance  decentralized_auc   centralized_auc     joint_auc           "
                 "uniform_ref/window\n";
    for (long long k = 0; k < mdps; ++k) {
        const std::uint64_t instance_seed = mdp_seed + static_cast<std::uint64_t>(k);
        const Mdp mdp =
            generate_random_mdp(instance_seed, states, std::vector<int>(agents, actions), gamma);
        tab.seed = seed + static_cast<std::uint64_t>(k);
        joint.seed = seed + static_cast<std::uint64_t>(k);
        const TabularTrainLog ours = train_tabular(mdp, tab);
        const TabularTrainLog central = train_tabular(centralized_view(mdp), tab);
        const TabularTrainLog baseline = joint_q_learning_baseline(mdp, joint);

        JointPolicy uniform;
        for (int i = 0; i < agents; ++i)
            uniform.per_agent.push_back(
                Eigen::MatrixXd::Constant(states, actions, 1.0 / actions));
        const double uniform_ref =
            average_reward(mdp, uniform) * static_cast<double>(episode_length);

        const double ours_auc = ours.auc();
        const double central_auc = central.auc();
        const double baseline_auc = baseline.auc();
        const bool win = ours_auc > baseline_auc;
        wins += win ? 1 : 0;
        report["instances"].push_back(
            {{"mdp_seed", instance_seed},
             {"decentralized_auc", ours_auc},
             {"centralized_auc", central_auc},
             {"joint_auc", baseline_auc},
             {"decentralized_final_mean", ours.final_window_mean()},
             {"centralized_final_mean", central.final_window_mean()},
             {"joint_final_mean", baseline.final_window_mean()},
             {"uniform_reference_per_window", uniform_ref},
             {"beats_joint", win}});
        std::printf("%-9lld %-19.12g %-19.12g %-19.12g %-19.12g\n", k, ours_auc, central_auc,
                    baseline_auc, uniform_ref);
    }
    report["wins_vs_joint"] = wins;
    report["instances_total"] = mdps;
    std::cout << "decentralized beats joint Q-learning on " << wins << "/" << mdps
              << " instances by learning-curve area\n";
    if (!o.out_path.empty())
        write_json_file(o.out_path, report);
    if (o.assert_mode && 2 * wins < mdps)
        throw AssertionFailure("decentralized learner won only " + std::to_string(wins) + "/" +
                               std::to_string(mdps) + " instances");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"decentralized multi-agent reinforcement learning toolkit"};
    app.require_subcommand(1);

    TrainTabularOpts tab;
    CLI::App* tab_cmd = app.add_subcommand(
        "train-tabular", "train decentralized tabular actor-critics on a random task");
    tab_cmd->add_option("--config", tab.config_path, "configuration file");
    tab_cmd->add_option("--seed", tab.seed, "base run seed")->capture_default_str();
    tab_cmd->add_option("--out", tab.out_dir, "output directory for CSV and JSON artifacts");
    tab_cmd->add_flag("--assert", tab.assert_mode,
                      "exit 2 unless every run reaches --threshold");
    tab_cmd->add_option("--mdp-seed", tab.mdp_seed, "task generator seed")->capture_default_str();
    tab_cmd->add_option("--states", tab.states, "number of states")->capture_default_str();
    tab_cmd->add_option("--agents", tab.agents, "number of agents")->capture_default_str();
    tab_cmd->add_option("--actions", tab.actions, "actions per agent")->capture_default_str();
    tab_cmd->add_option("--gamma", tab.gamma, "discount factor")->capture_default_str();
    tab_cmd->add_option("--steps", tab.steps, "environment steps")->capture_default_str();
    tab_cmd->add_option("--episode-length", tab.episode_length, "steps per logging window")
        ->capture_default_str();
    tab_cmd->add_option("--omega", tab.omega, "step-size decay exponent")->capture_default_str();
    tab_cmd->add_option("--scale", tab.scale, "step-size scale")->capture_default_str();
    tab_cmd->add_option("--beta", tab.beta, "policy step size")->capture_default_str();
    tab_cmd->add_option("--ratio", tab.ratio, "critic/actor step-size ratio floor")
        ->capture_default_str();
    tab_cmd->add_option("--clip", tab.clip, "symmetric logit clip bound")->capture_default_str();
    tab_cmd->add_option("--init-logit-scale", tab.init_logit_scale,
                        "stddev of random initial logits");
    tab_cmd->add_option("--threshold", tab.threshold, "return threshold for the summary");
    tab_cmd->add_option("--runs", tab.runs, "number of seeds, counting up from --seed")
        ->capture_default_str();
    tab_cmd->add_flag("--sequential", tab.sequential, "one agent improves per tick");
    tab_cmd->add_flag("--track-residual", tab.track_residual,
                      "log per-agent critic error against the exact values (slow)");
    tab_cmd->callback([&tab, tab_cmd]() { run_train_tabular(tab, tab_cmd); });

    TrainContinuousOpts cont;
    CLI::App* cont_cmd = app.add_subcommand(
        "train-continuous", "train decentralized actor-critic networks on the planar task");
    cont_cmd->add_option("--config", cont.config_path, "configuration file");
    cont_cmd->add_option("--seed", cont.seed, "base run seed")->capture_default_str();
    cont_cmd->add_option("--out", cont.out_dir, "output directory for CSV and JSON artifacts");
    cont_cmd->add_flag("--assert", cont.assert_mode,
                       "exit 2 unless every run reaches --threshold");
    cont_cmd->add_option("--env", cont.env_name, "environment name")->capture_default_str();
    cont_cmd->add_option("--agents", cont.agents, "number of agents")->capture_default_str();
    cont_cmd->add_option("--steps", cont.steps, "environment steps")->capture_default_str();
    cont_cmd->add_option("--episode-length", cont.episode_length, "steps per episode")
        ->capture_default_str();
    cont_cmd->add_option("--collision-radius", cont.collision_radius, "contact penalty radius")
        ->capture_default_str();
    cont_cmd->add_option("--replay-capacity", cont.replay_capacity, "replay buffer capacity")
        ->capture_default_str();
    cont_cmd->add_option("--batch", cont.batch, "minibatch size")->capture_default_str();
    cont_cmd->add_option("--warmup-batches", cont.warmup_batches,
                         "batches of experience required before learning starts")
        ->capture_default_str();
    cont_cmd->add_option("--gamma", cont.gamma, "discount factor")->capture_default_str();
    cont_cmd->add_option("--critic-lr", cont.critic_lr, "critic learning rate")
        ->capture_default_str();
    cont_cmd->add_option("--actor-lr", cont.actor_lr, "actor learning rate")
        ->capture_default_str();
    cont_cmd->add_option("--momentum", cont.momentum, "SGD velocity blend for both optimizers")
        ->capture_default_str();
    cont_cmd->add_option("--polyak", cont.polyak, "target-net blend rate")
        ->capture_default_str();
    cont_cmd->add_option("--consensus-rounds", cont.consensus_rounds, "mixing rounds per tick")
        ->capture_default_str();
    cont_cmd->add_option("--graph", cont.graph_spec,
                         "communication graph (ring:N, complete:N, line:N, or a file)");
    cont_cmd->add_option("--eval-episodes", cont.eval_episodes,
                         "episodes for the final noise-free evaluation")
        ->capture_default_str();
    cont_cmd->add_option("--threshold", cont.threshold, "return threshold for the summary");
    cont_cmd->add_option("--runs", cont.runs, "number of seeds, counting up from --seed")
        ->capture_default_str();
    cont_cmd->add_flag("--lazy-refresh", cont.lazy_refresh,
                       "refresh density ratios only for sampled entries");
    cont_cmd->add_flag("--trajectories", cont.trajectories, "write per-step trajectory CSVs");
    cont_cmd->callback([&cont, cont_cmd]() { run_train_continuous(cont, cont_cmd); });

    ConsensusOpts cons;
    CLI::App* cons_cmd = app.add_subcommand(
        "consensus-demo", "run distributed averaging on a graph and report convergence");
    cons_cmd->add_option("--config", cons.config_path, "configuration file");
    cons_cmd->add_option("--seed", cons.seed, "seed for the initial values")
        ->capture_default_str();
    cons_cmd->add_option("--out", cons.out_path, "CSV file for the deviation trace");
    cons_cmd->add_flag("--assert", cons.assert_mode, "exit 2 unless the deviation ends below --tol");
    cons_cmd->add_option("--graph", cons.graph_spec, "graph spec or edge-list file")
        ->capture_default_str();
    cons_cmd->add_option("--iters", cons.iters, "mixing iterations")->capture_default_str();
    cons_cmd->add_option("--tol", cons.tol, "deviation tolerance")->capture_default_str();
    cons_cmd->callback([&cons, cons_cmd]() { run_consensus_demo(cons, cons_cmd); });

    Theorem1Opts th1;
    CLI::App* th1_cmd = app.add_subcommand(
        "verify-theorem1",
        "check that frozen-policy critics converge to the exact evaluation values");
    th1_cmd->add_option("--config", th1.config_path, "configuration file");
    th1_cmd->add_option("--seed", th1.seed, "run seed")->capture_default_str();
    th1_cmd->add_option("--out", th1.out_path, "JSON report file");
    th1_cmd->add_flag("--assert", th1.assert_mode, "exit 2 on failure");
    th1_cmd->add_option("--mdp-seed", th1.mdp_seed, "task generator seed")->capture_default_str();
    th1_cmd->add_option("--states", th1.states, "number of states")->capture_default_str();
    th1_cmd->add_option("--agents", th1.agents, "number of agents")->capture_default_str();
    th1_cmd->add_option("--actions", th1.actions, "actions per agent")->capture_default_str();
    th1_cmd->add_option("--gamma", th1.gamma, "discount factor")->capture_default_str();
    th1_cmd->add_option("--steps", th1.steps, "environment steps")->capture_default_str();
    th1_cmd->add_option("--omega", th1.omega, "step-size decay exponent")->capture_default_str();
    th1_cmd->add_option("--scale", th1.scale, "step-size scale")->capture_default_str();
    th1_cmd->add_option("--init-logit-scale", th1.init_logit_scale,
                        "stddev of the frozen random policies' logits")
        ->capture_default_str();
    th1_cmd->add_option("--tol", th1.tol, "residual tolerance")->capture_default_str();
    th1_cmd->callback([&th1, th1_cmd]() { run_verify_theorem1(th1, th1_cmd); });

    Theorem2Opts th2;
    CLI::App* th2_cmd = app.add_subcommand(
        "verify-theorem2",
        "check that rotating exact improvement is value-monotone and terminates");
    th2_cmd->add_option("--config", th2.config_path, "configuration file");
    th2_cmd->add_option("--out", th2.out_path, "JSON report file");
    th2_cmd->add_flag("--assert", th2.assert_mode, "exit 2 on failure");
    th2_cmd->add_option("--mdp-seed", th2.mdp_seed, "first task generator seed")
        ->capture_default_str();
    th2_cmd->add_option("--mdps", th2.mdps, "number of random tasks")->capture_default_str();
    th2_cmd->add_option("--states", th2.states, "number of states")->capture_default_str();
    th2_cmd->add_option("--agents", th2.agents, "number of agents")->capture_default_str();
    th2_cmd->add_option("--actions", th2.actions, "actions per agent")->capture_default_str();
    th2_cmd->add_option("--gamma", th2.gamma, "discount factor")->capture_default_str();
    th2_cmd->add_option("--max-rounds", th2.max_rounds, "termination bound")
        ->capture_default_str();
    th2_cmd->add_option("--monotone-tol", th2.monotone_tol, "permitted per-round value drop")
        ->capture_default_str();
    th2_cmd->callback([&th2, th2_cmd]() { run_verify_theorem2(th2, th2_cmd); });

    CompareOpts cmp;
    CLI::App* cmp_cmd = app.add_subcommand(
        "compare", "decentralized learners vs joint-table Q-learning on matched random tasks");
    cmp_cmd->add_option("--config", cmp.config_path, "configuration file");
    cmp_cmd->add_option("--seed", cmp.seed, "base run seed")->capture_default_str();
    cmp_cmd->add_option("--out", cmp.out_path, "JSON report file");
    cmp_cmd->add_flag("--assert", cmp.assert_mode,
                      "exit 2 unless the decentralized learner wins at least half");
    cmp_cmd->add_option("--mdp-seed", cmp.mdp_seed, "first task generator seed")
        ->capture_default_str();
    cmp_cmd->add_option("--mdps", cmp.mdps, "number of random tasks")->capture_default_str();
    cmp_cmd->add_option("--states", cmp.states, "number of states")->capture_default_str();
    cmp_cmd->add_option("--agents", cmp.agents, "number of agents")->capture_default_str();
    cmp_cmd->add_option("--actions", cmp.actions, "actions per agent")->capture_default_str();
    cmp_cmd->add_option("--gamma", cmp.gamma, "discount factor")->capture_default_str();
    cmp_cmd->add_option("--steps", cmp.steps, "environment steps for both learners")
        ->capture_default_str();
    cmp_cmd->add_option("--episode-length", cmp.episode_length, "steps per logging window")
        ->capture_default_str();
    cmp_cmd->add_option("--omega", cmp.omega, "step-size decay exponent")->capture_default_str();
    cmp_cmd->add_option("--beta", cmp.beta, "policy step size")->capture_default_str();
    cmp_cmd->add_option("--ratio", cmp.ratio, "critic/actor step-size ratio floor")
        ->capture_default_str();
    cmp_cmd->add_option("--epsilon", cmp.epsilon, "joint learner exploration rate")
        ->capture_default_str();
    cmp_cmd->callback([&cmp, cmp_cmd]() { run_compare(cmp, cmp_cmd); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    } catch (const AssertionFailure& e) {
        std::cerr << "assertion failed: " << e.what() << "\n";
        return kExitAssert;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return 0;
}
