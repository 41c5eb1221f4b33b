#pragma once

#include <dmarl/consensus.hpp>
#include <dmarl/gaussian.hpp>
#include <dmarl/mlp.hpp>
#include <dmarl/privacy.hpp>
#include <dmarl/replay.hpp>
#include <dmarl/rng.hpp>
#include <dmarl/spread.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

namespace dmarl {

// --- gradient estimators (pure, finite-difference testable) --------------

inline Eigen::VectorXd concat_state_action(const Eigen::VectorXd& s, const Eigen::VectorXd& a) {
    Eigen::VectorXd input(s.size() + a.size());
    input << s, a;
    return input;
}

/// One critic minibatch element with all randomness already resolved: the
/// bootstrap action for s_next is sampled by the caller, and the importance
/// weight is read off the replay entry before the call.
struct CriticSample {
    Eigen::VectorXd s;
    Eigen::VectorXd a;
    double r = 0.0;
    Eigen::VectorXd s_next;
    Eigen::VectorXd next_action;
    double weight = 1.0;
};

struct CriticGradient {
    MlpGradients grad;  // d loss / d critic parameters
    double loss = 0.0;  // (1 / 2|B|) sum_k w_k (Q - y)^2
};

/// Weighted TD regression toward the frozen target net:
/// y_k = r_k + gamma * target(s'_k, a'_k), gradient
/// (1/|B|) sum_k w_k (Q(s_k, a_k) - y_k) dQ/dphi. Nothing differentiates
/// through y; the target net and the bootstrap actions are constants here.
inline CriticGradient critic_loss_gradient(const MlpParams& critic, const MlpParams& target,
                                           const std::vector<CriticSample>& batch, double gamma) {
    if (batch.empty())
        throw std::invalid_argument("critic_loss_gradient: empty batch");
    CriticGradient out;
    out.grad = zero_gradients(critic);
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const CriticSample& item : batch) {
        const ForwardTrace trace = forward_trace(critic, concat_state_action(item.s, item.a));
        const double q = trace.post.back()(0);
        const double y =
            item.r +
            gamma * forward(target, concat_state_action(item.s_next, item.next_action))(0);
        const double residual = q - y;
        out.loss += 0.5 * inv * item.weight * residual * residual;
        Eigen::VectorXd upstream(1);
        upstream(0) = inv * item.weight * residual;
        out.grad.axpy(1.0, backward(critic, trace, upstream));
    }
    return out;
}

/// One actor minibatch element: a replayed state and a frozen exploration
/// noise draw, one component per action coordinate.
struct ActorSample {
    Eigen::VectorXd s;
    Eigen::VectorXd xi;
};

struct ActorGradient {
    MlpGradients grad;      // d objective / d actor trunk parameters
    double objective = 0.0; // (1/|B|) sum_k Q(s_k, f(xi_k; s_k))
};

/// Pathwise policy-improvement gradient: differentiates
/// J = (1/|B|) sum_k Q(s_k, f_theta(xi_k; s_k)) in the actor parameters with
/// the critic and the noise held fixed. dQ/da comes out of the critic's
/// input gradient; the squash chain rule lives in action_grad_of_noise.
inline ActorGradient actor_objective_gradient(const SquashedGaussianHead& actor,
                                              const MlpParams& critic,
                                              const std::vector<ActorSample>& batch) {
    if (batch.empty())
        throw std::invalid_argument("actor_objective_gradient: empty batch");
    if (critic.output_dim() != 1)
        throw std::invalid_argument("actor_objective_gradient: critic must be scalar-valued");
    ActorGradient out;
    out.grad = zero_gradients(actor.trunk);
    const double inv = 1.0 / static_cast<double>(batch.size());
    Eigen::VectorXd unit(1);
    unit(0) = 1.0;
    for (const ActorSample& item : batch) {
        const Eigen::VectorXd action = action_of_noise(actor, item.s, item.xi);
        const ForwardTrace trace = forward_trace(critic, concat_state_action(item.s, action));
        out.objective += inv * trace.post.back()(0);
        const Eigen::VectorXd dq_da =
            backward(critic, trace, unit).input.tail(actor.action_dim);
        out.grad.axpy(inv, action_grad_of_noise(actor, item.s, item.xi, dq_da).trunk);
    }
    return out;
}

// --- training loop --------------------------------------------------------

/// The fixed within-tick schedule. Learning ticks run every phase in this
/// order; warmup ticks run only Act, Store, Consensus.
enum class TickPhase { Act, Store, Sample, Evaluate, Improve, Consensus, TargetUpdate };

inline const char* tick_phase_name(TickPhase phase) {
    switch (phase) {
    case TickPhase::Act:
        return "act";
    case TickPhase::Store:
        return "store";
    case TickPhase::Sample:
        return "sample";
    case TickPhase::Evaluate:
        return "evaluate";
    case TickPhase::Improve:
        return "improve";
    case TickPhase::Consensus:
        return "consensus";
    case TickPhase::TargetUpdate:
        return "target_update";
    }
    return "unknown";
}

struct ContinuousConfig {
    std::uint64_t seed = 0;
    long long total_steps = 200000;
    int batch_size = 64;
    int warmup_batches = 10; // learning starts once a buffer holds this many batches
    std::size_t replay_capacity = 10000;
    double gamma = 0.95;
    double critic_lr = 1e-3;
    double actor_lr = 1e-4;
    double momentum = 0.0;
    double polyak = 0.005;
    int consensus_rounds = 1; // mixing rounds per environment tick
    bool lazy_refresh = false;
    std::vector<int> actor_hidden{64, 64};
    std::vector<int> critic_hidden{64, 64};
    std::function<void(TickPhase, long long)> phase_observer;
    // called after every environment step with the post-step state
    std::function<void(int episode, int step, const SpreadState& state,
                       const Eigen::VectorXd& agent_rewards)>
        trajectory_sink;

    void validate() const {
        if (total_steps < 1)
            throw std::invalid_argument("ContinuousConfig: total_steps must be >= 1");
        if (batch_size < 1 || warmup_batches < 1)
            throw std::invalid_argument(
                "ContinuousConfig: batch_size and warmup_batches must be >= 1");
        if (static_cast<std::size_t>(warmup_batches) * batch_size > replay_capacity)
            throw std::invalid_argument(
                "ContinuousConfig: warmup exceeds replay capacity, learning would never start");
        if (!(gamma >= 0.0 && gamma < 1.0))
            throw std::invalid_argument("ContinuousConfig: gamma must lie in [0, 1)");
        if (critic_lr < 0.0 || actor_lr < 0.0)
            throw std::invalid_argument("ContinuousConfig: learning rates must be >= 0");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw std::invalid_argument("ContinuousConfig: momentum must lie in [0, 1)");
        if (!(polyak > 0.0 && polyak <= 1.0))
            throw std::invalid_argument("ContinuousConfig: polyak rate must lie in (0, 1]");
        if (consensus_rounds < 0)
            throw std::invalid_argument("ContinuousConfig: consensus_rounds must be >= 0");
    }
};

/// Everything one agent owns. Nothing in here is ever handed to another
/// agent's update; the replay x-values are the only cross-agent traffic.
struct ContinuousAgent {
    SquashedGaussianHead actor;
    MlpParams critic;
    MlpParams target_critic;
    SgdState actor_sgd;
    SgdState critic_sgd;
    ReplayBuffer buffer{1};
};

inline std::vector<ContinuousAgent> make_continuous_agents(int num_agents, int obs_dim,
                                                           int action_dim,
                                                           const ContinuousConfig& config) {
    std::vector<ContinuousAgent> agents;
    agents.reserve(num_agents);
    for (int i = 0; i < num_agents; ++i) {
        ContinuousAgent agent;
        agent.actor = make_gaussian_head(config.actor_hidden, obs_dim, action_dim,
                                         mix_seed(config.seed, 1000 + i));
        std::vector<int> critic_sizes;
        critic_sizes.push_back(obs_dim + action_dim);
        for (int h : config.critic_hidden)
            critic_sizes.push_back(h);
        critic_sizes.push_back(1);
        agent.critic = make_mlp(critic_sizes, mix_seed(config.seed, 2000 + i));
        agent.target_critic = agent.critic;
        agent.actor_sgd = make_sgd_state(agent.actor.trunk);
        agent.critic_sgd = make_sgd_state(agent.critic);
        agent.buffer = ReplayBuffer(config.replay_capacity);
        agents.push_back(std::move(agent));
    }
    return agents;
}

struct ContinuousEpisodeRow {
    int episode = 0;
    double episode_return = 0.0; // sum of global rewards over the fixed-length episode
    // NaN until learning has started within the episode
    double critic_loss = std::numeric_limits<double>::quiet_NaN();
    double mean_abs_c = std::numeric_limits<double>::quiet_NaN();
};

struct ContinuousTrainLog {
    std::vector<ContinuousEpisodeRow> rows;
    std::vector<ContinuousAgent> agents;

    double mean_return_over(std::size_t begin, std::size_t end) const {
        if (begin >= end || end > rows.size())
            throw std::invalid_argument("mean_return_over: bad episode range");
        double total = 0.0;
        for (std::size_t k = begin; k < end; ++k)
            total += rows[k].episode_return;
        return total / static_cast<double>(end - begin);
    }
    double head_mean(std::size_t count) const { return mean_return_over(0, count); }
    double tail_mean(std::size_t count) const {
        if (count > rows.size())
            throw std::invalid_argument("tail_mean: fewer episodes than requested");
        return mean_return_over(rows.size() - count, rows.size());
    }
};

/// Decentralized off-policy training on the cooperative-navigation task.
/// Per tick: every agent acts from its own policy on the shared
/// observation, stores the transition with the global reward, then (after
/// warmup) takes one critic and one actor step from its own buffer,
/// refreshes its local density ratios, and mixes x-values with its graph
/// neighbors. Passing a PrivacyAudit records every parameter read with the
/// agent scope it happened under.
inline ContinuousTrainLog train_continuous(const SpreadConfig& env, const Graph& graph,
                                           const ContinuousConfig& config,
                                           PrivacyAudit* audit = nullptr) {
    env.validate();
    config.validate();
    if (graph.num_nodes != env.num_agents)
        throw std::invalid_argument("train_continuous: graph size differs from agent count");
    if (!is_connected(graph))
        throw std::invalid_argument("train_continuous: consensus needs a connected graph");

    const int n = env.num_agents;
    const int obs_dim = spread_observation_dim(n);

    ContinuousTrainLog log;
    log.agents = make_continuous_agents(n, obs_dim, kSpreadActionDim, config);

    Rng env_rng(mix_seed(config.seed, 0));
    std::vector<Rng> agent_rng;
    agent_rng.reserve(n);
    for (int i = 0; i < n; ++i)
        agent_rng.emplace_back(mix_seed(config.seed, 1 + i));

    const std::size_t warmup =
        static_cast<std::size_t>(config.warmup_batches) * config.batch_size;
    const auto emit = [&](TickPhase phase, long long t) {
        if (config.phase_observer)
            config.phase_observer(phase, t);
    };

    std::vector<ReplayBuffer*> buffers;
    for (ContinuousAgent& agent : log.agents)
        buffers.push_back(&agent.buffer);

    SpreadState state = spread_reset(env, env_rng);
    double episode_return = 0.0;
    double loss_sum = 0.0, c_sum = 0.0;
    long long loss_count = 0, c_count = 0;
    int episode_index = 0;

    for (long long t = 0; t < config.total_steps; ++t) {
        emit(TickPhase::Act, t);
        const Eigen::VectorXd obs = spread_observation(state);
        std::vector<Eigen::VectorXd> actions(n);
        std::vector<double> behavior(n);
        for (int i = 0; i < n; ++i) {
            AuditScope scope(audit, i);
            note_param_read(audit, i);
            actions[i] = sample_squashed(log.agents[i].actor, obs, agent_rng[i]).action;
            note_param_read(audit, i);
            behavior[i] = log_prob(log.agents[i].actor, obs, actions[i]);
        }

        const SpreadStepResult stepped = spread_step(env, state, actions);
        episode_return += stepped.global_reward;
        if (config.trajectory_sink)
            config.trajectory_sink(episode_index, stepped.state.step_count, stepped.state,
                                   stepped.agent_rewards);
        const Eigen::VectorXd next_obs = spread_observation(stepped.state);

        emit(TickPhase::Store, t);
        for (int i = 0; i < n; ++i) {
            ReplayEntry entry;
            entry.s = obs;
            entry.a_local = actions[i];
            entry.r = stepped.global_reward;
            entry.s_next = next_obs;
            entry.behavior_logprob = behavior[i];
            entry.timestep = t;
            log.agents[i].buffer.insert(std::move(entry));
        }

        const bool learning = log.agents.front().buffer.size() >= warmup;
        std::vector<std::vector<std::size_t>> picked(n);
        if (learning) {
            emit(TickPhase::Sample, t);
            for (int i = 0; i < n; ++i) {
                AuditScope scope(audit, i);
                picked[i] = log.agents[i].buffer.sample_indices(config.batch_size, agent_rng[i]);
            }

            emit(TickPhase::Evaluate, t);
            for (int i = 0; i < n; ++i) {
                AuditScope scope(audit, i);
                ContinuousAgent& agent = log.agents[i];
                std::vector<CriticSample> batch;
                batch.reserve(picked[i].size());
                for (std::size_t index : picked[i]) {
                    const ReplayEntry& entry = agent.buffer.entry(index);
                    CriticSample item;
                    item.s = entry.s;
                    item.a = entry.a_local;
                    item.r = entry.r;
                    item.s_next = entry.s_next;
                    note_param_read(audit, i);
                    item.next_action =
                        sample_squashed(agent.actor, entry.s_next, agent_rng[i]).action;
                    item.weight = is_weight(entry, n);
                    c_sum += std::abs(n * entry.x - entry.beta);
                    ++c_count;
                    batch.push_back(std::move(item));
                }
                note_param_read(audit, i); // critic
                note_param_read(audit, i); // target critic
                const CriticGradient cg =
                    critic_loss_gradient(agent.critic, agent.target_critic, batch, config.gamma);
                sgd_step(agent.critic, cg.grad, config.critic_lr, config.momentum,
                         agent.critic_sgd);
                loss_sum += cg.loss;
                ++loss_count;
            }

            emit(TickPhase::Improve, t);
            for (int i = 0; i < n; ++i) {
                AuditScope scope(audit, i);
                ContinuousAgent& agent = log.agents[i];
                std::normal_distribution<double> normal(0.0, 1.0);
                std::vector<ActorSample> batch;
                batch.reserve(picked[i].size());
                for (std::size_t index : picked[i]) {
                    ActorSample item;
                    item.s = agent.buffer.entry(index).s;
                    item.xi.resize(kSpreadActionDim);
                    for (int k = 0; k < kSpreadActionDim; ++k)
                        item.xi(k) = normal(agent_rng[i]);
                    batch.push_back(std::move(item));
                }
                note_param_read(audit, i); // actor
                note_param_read(audit, i); // own critic, read only for the improvement direction
                ActorGradient ag = actor_objective_gradient(agent.actor, agent.critic, batch);
                ag.grad.scale(-1.0); // ascend the objective with a descent-form optimizer
                sgd_step(agent.actor.trunk, ag.grad, config.actor_lr, config.momentum,
                         agent.actor_sgd);
            }
        }

        emit(TickPhase::Consensus, t);
        for (int i = 0; i < n; ++i) {
            AuditScope scope(audit, i);
            ContinuousAgent& agent = log.agents[i];
            const auto current_logprob = [&](const ReplayEntry& entry) {
                note_param_read(audit, i);
                return log_prob(agent.actor, entry.s, entry.a_local);
            };
            if (config.lazy_refresh)
                agent.buffer.local_beta_refresh_at(picked[i], current_logprob);
            else
                agent.buffer.local_beta_refresh(current_logprob);
        }
        for (int round = 0; round < config.consensus_rounds; ++round)
            consensus_exchange(buffers, graph, [&](int reader, int source, long long timestep) {
                if (audit)
                    audit->note_transfer(reader, source, timestep);
            });

        if (learning) {
            emit(TickPhase::TargetUpdate, t);
            for (int i = 0; i < n; ++i) {
                AuditScope scope(audit, i);
                note_param_read(audit, i);
                polyak_update(log.agents[i].target_critic, log.agents[i].critic, config.polyak);
            }
        }

        if (stepped.state.step_count >= env.episode_length) {
            ContinuousEpisodeRow row;
            row.episode = episode_index++;
            row.episode_return = episode_return;
            if (loss_count > 0)
                row.critic_loss = loss_sum / static_cast<double>(loss_count);
            if (c_count > 0)
                row.mean_abs_c = c_sum / static_cast<double>(c_count);
            log.rows.push_back(row);
            episode_return = 0.0;
            loss_sum = 0.0;
            loss_count = 0;
            c_sum = 0.0;
            c_count = 0;
            state = spread_reset(env, env_rng);
        } else {
            state = stepped.state;
        }
    }
    return log;
}

// --- evaluation -----------------------------------------------------------

struct SpreadEvaluation {
    double mean_return = 0.0;
    double mean_final_distance = 0.0;
};

/// Rolls the noise-free policy (action = tanh(mu)) through fresh episodes
/// and averages the undiscounted return and the end-of-episode mean
/// agent-to-target distance.
inline SpreadEvaluation evaluate_spread(const SpreadConfig& env,
                                        const std::vector<ContinuousAgent>& agents, int episodes,
                                        std::uint64_t seed) {
    env.validate();
    if (static_cast<int>(agents.size()) != env.num_agents)
        throw std::invalid_argument("evaluate_spread: agent count differs from environment");
    if (episodes < 1)
        throw std::invalid_argument("evaluate_spread: need at least one episode");
    Rng rng(mix_seed(seed, 0));
    const Eigen::VectorXd zero_noise = Eigen::VectorXd::Zero(kSpreadActionDim);
    SpreadEvaluation eval;
    for (int ep = 0; ep < episodes; ++ep) {
        SpreadState state = spread_reset(env, rng);
        double episode_return = 0.0;
        for (int step = 0; step < env.episode_length; ++step) {
            const Eigen::VectorXd obs = spread_observation(state);
            std::vector<Eigen::VectorXd> actions;
            actions.reserve(agents.size());
            for (const ContinuousAgent& agent : agents)
                actions.push_back(action_of_noise(agent.actor, obs, zero_noise));
            SpreadStepResult result = spread_step(env, state, actions);
            episode_return += result.global_reward;
            state = std::move(result.state);
        }
        eval.mean_return += episode_return;
        eval.mean_final_distance += mean_distance_to_targets(state);
    }
    eval.mean_return /= episodes;
    eval.mean_final_distance /= episodes;
    return eval;
}

} // namespace dmarl
