#pragma once

#include <dmarl/mdp.hpp>
#include <dmarl/privacy.hpp>
#include <dmarl/rng.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmarl {

/// Polynomial step-size schedule alpha(n) = scale / (1 + n)^exponent,
/// evaluated on per-(state, action) visit counts. The exponent range
/// (0.5, 1] is what makes the step sizes square-summable but not summable.
struct StepSizeSchedule {
    double exponent = 0.7;
    double scale = 1.0;

    void validate() const {
        if (!(exponent > 0.5 && exponent <= 1.0))
            throw std::invalid_argument("StepSizeSchedule: exponent must lie in (0.5, 1], got " +
                                        std::to_string(exponent));
        if (!(scale > 0.0 && scale <= 1.0))
            throw std::invalid_argument("StepSizeSchedule: scale must lie in (0, 1]");
    }

    double operator()(long long visits) const {
        return scale / std::pow(1.0 + static_cast<double>(visits), exponent);
    }
};

/// Numerically stable softmax of a logits row (max subtraction). Strictly
/// positive output for finite input.
inline Eigen::RowVectorXd softmax_policy(const Eigen::RowVectorXd& logits) {
    const double top = logits.maxCoeff();
    Eigen::RowVectorXd p = (logits.array() - top).exp();
    return p / p.sum();
}

/// One agent's local learning state: action-value table, policy logits,
/// and visit counts. Logits stay inside [clip_min, clip_max] after every
/// update, which bounds every action probability away from zero.
struct TabularAgent {
    Eigen::MatrixXd q;
    Eigen::MatrixXd logits;
    Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic> visit_counts;
    double clip_min = -5.0;
    double clip_max = 5.0;

    TabularAgent(int num_states, int num_actions, double clip_lo = -5.0, double clip_hi = 5.0)
        : q(Eigen::MatrixXd::Zero(num_states, num_actions)),
          logits(Eigen::MatrixXd::Zero(num_states, num_actions)),
          visit_counts(Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic>::Zero(
              num_states, num_actions)),
          clip_min(clip_lo), clip_max(clip_hi) {
        if (num_states < 1 || num_actions < 1)
            throw std::invalid_argument("TabularAgent: empty table");
        if (!(clip_min < clip_max))
            throw std::invalid_argument("TabularAgent: clip_min must be below clip_max");
    }

    int num_states() const { return static_cast<int>(q.rows()); }
    int num_actions() const { return static_cast<int>(q.cols()); }

    Eigen::RowVectorXd policy_row(int state) const { return softmax_policy(logits.row(state)); }
};

inline int sample_action(const TabularAgent& agent, int state, Rng& rng) {
    if (state < 0 || state >= agent.num_states())
        throw std::invalid_argument("sample_action: state out of range");
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    return sample_from_row(agent.policy_row(state), uniform(rng));
}

/// Temporal-difference update of the single entry (s, a). The target
/// bootstraps through a next action freshly sampled from the agent's own
/// current policy (the caller draws it). Returns the new entry.
inline double q_update(TabularAgent& agent, int s, int a, double r, int s_next,
                       int fresh_next_action, double alpha, double gamma) {
    if (s < 0 || s >= agent.num_states() || s_next < 0 || s_next >= agent.num_states())
        throw std::invalid_argument("q_update: state out of range");
    if (a < 0 || a >= agent.num_actions() || fresh_next_action < 0 ||
        fresh_next_action >= agent.num_actions())
        throw std::invalid_argument("q_update: action out of range");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw std::invalid_argument("q_update: alpha must lie in [0, 1]");
    const double target = r + gamma * agent.q(s_next, fresh_next_action);
    agent.q(s, a) += alpha * (target - agent.q(s, a));
    agent.visit_counts(s, a) += 1;
    return agent.q(s, a);
}

/// Gradient-ascent step on the state's logits row. With pi the softmax of
/// the row and v = pi . q the baseline, the exact gradient of pi . q in the
/// logits is pi (q - v) elementwise; the row is clipped back into
/// [clip_min, clip_max] afterwards.
inline void policy_gradient_step(TabularAgent& agent, int s, double beta) {
    if (s < 0 || s >= agent.num_states())
        throw std::invalid_argument("policy_gradient_step: state out of range");
    if (!(beta >= 0.0))
        throw std::invalid_argument("policy_gradient_step: beta must be >= 0");
    const Eigen::RowVectorXd pi = agent.policy_row(s);
    const double v = pi.dot(agent.q.row(s));
    agent.logits.row(s) +=
        beta * (pi.array() * (agent.q.row(s).array() - v)).matrix();
    agent.logits.row(s) =
        agent.logits.row(s).cwiseMax(agent.clip_min).cwiseMin(agent.clip_max);
}

/// One exact improvement step: agent `agent` switches every state to a
/// point mass on the argmax of its exact action values under `policy`;
/// everyone else is untouched. Ties keep the incumbent row, which makes
/// repeated application terminate deterministically.
inline JointPolicy exact_policy_improvement(const Mdp& mdp, const JointPolicy& policy,
                                            int agent) {
    if (agent < 0 || agent >= mdp.num_agents())
        throw std::invalid_argument("exact_policy_improvement: agent out of range");
    const Eigen::MatrixXd q = exact_local_q(mdp, policy, agent);
    JointPolicy next = policy;
    for (int s = 0; s < mdp.num_states; ++s) {
        int best = 0;
        int ties = 1;
        for (int a = 1; a < mdp.action_sizes[agent]; ++a) {
            if (q(s, a) > q(s, best)) {
                best = a;
                ties = 1;
            } else if (q(s, a) == q(s, best)) {
                ++ties;
            }
        }
        if (ties > 1)
            continue; // every maximizer is optimal; keep the incumbent
        next.per_agent[agent].row(s).setZero();
        next.per_agent[agent](s, best) = 1.0;
    }
    return next;
}

struct ImprovementRun {
    JointPolicy final_policy;
    int rounds = 0;        // single-agent improvement steps executed
    bool converged = false;
    bool monotone = true;
    double worst_drop = 0.0; // most negative per-state value change seen
    std::vector<Eigen::VectorXd> value_trace;
};

/// Rotating exact improvements (agent k = round mod N) until a full
/// rotation changes nothing. Records the state-value vector after every
/// round; `monotone` reports whether values ever dropped more than
/// `monotone_tol` below the previous round.
inline ImprovementRun run_exact_improvement(const Mdp& mdp, JointPolicy policy, int max_rounds,
                                            double monotone_tol = 1e-10) {
    ImprovementRun run;
    run.value_trace.push_back(exact_state_values(mdp, policy));
    int unchanged_streak = 0;
    while (run.rounds < max_rounds) {
        const int agent = run.rounds % mdp.num_agents();
        JointPolicy next = exact_policy_improvement(mdp, policy, agent);
        bool changed = false;
        for (int i = 0; i < mdp.num_agents() && !changed; ++i)
            changed = !(next.per_agent[i].array() == policy.per_agent[i].array()).all();
        policy = std::move(next);
        ++run.rounds;

        const Eigen::VectorXd v = exact_state_values(mdp, policy);
        const double drop = (v - run.value_trace.back()).minCoeff();
        run.worst_drop = std::min(run.worst_drop, drop);
        if (drop < -monotone_tol)
            run.monotone = false;
        run.value_trace.push_back(v);

        unchanged_streak = changed ? 0 : unchanged_streak + 1;
        if (unchanged_streak >= mdp.num_agents()) {
            run.converged = true;
            break;
        }
    }
    run.final_policy = std::move(policy);
    return run;
}

// --- training loop ----------------------------------------------------

struct TabularConfig {
    std::uint64_t seed = 0;
    long long steps = 100000;
    int episode_length = 100; // logging window on the continuing task
    StepSizeSchedule alpha{0.7, 1.0};
    double beta = 0.01;
    double timescale_ratio = 10.0; // enforced floor on alpha/beta per update
    double clip_min = -5.0;
    double clip_max = 5.0;
    double init_logit_scale = 0.0; // stddev of the random initial logits; 0 = uniform start
    bool sequential = false;  // one agent improves per tick instead of all
    bool track_q_residual = false;

    void validate() const {
        alpha.validate();
        if (steps < 1)
            throw std::invalid_argument("TabularConfig: steps must be >= 1");
        if (episode_length < 1)
            throw std::invalid_argument("TabularConfig: episode_length must be >= 1");
        if (!(beta >= 0.0))
            throw std::invalid_argument("TabularConfig: beta must be >= 0");
        if (!(timescale_ratio >= 10.0))
            throw std::invalid_argument(
                "TabularConfig: timescale_ratio must be >= 10 so the critic step "
                "dominates the actor step at every update");
        if (!(clip_min < clip_max))
            throw std::invalid_argument("TabularConfig: clip bounds inverted");
        if (!(init_logit_scale >= 0.0))
            throw std::invalid_argument("TabularConfig: init_logit_scale must be >= 0");
    }
};

struct EpisodeRow {
    long long step = 0;      // global step count at the window boundary
    double episode_return = 0.0;
    std::vector<double> q_residuals; // per agent, only when tracking is on
};

struct TabularTrainLog {
    std::vector<EpisodeRow> rows;
    std::vector<TabularAgent> agents;

    double auc() const {
        double total = 0.0;
        for (const auto& row : rows)
            total += row.episode_return;
        return total;
    }

    /// Mean episode return over the last `fraction` of logged windows.
    double final_window_mean(double fraction = 0.1) const {
        if (rows.empty())
            throw std::runtime_error("final_window_mean: empty log");
        const auto count = std::max<std::size_t>(
            1, static_cast<std::size_t>(fraction * static_cast<double>(rows.size())));
        double total = 0.0;
        for (std::size_t i = rows.size() - count; i < rows.size(); ++i)
            total += rows[i].episode_return;
        return total / static_cast<double>(count);
    }
};

inline JointPolicy policy_from_agents(const std::vector<TabularAgent>& agents) {
    JointPolicy policy;
    policy.per_agent.reserve(agents.size());
    for (const auto& agent : agents) {
        Eigen::MatrixXd table(agent.num_states(), agent.num_actions());
        for (int s = 0; s < agent.num_states(); ++s)
            table.row(s) = agent.policy_row(s);
        policy.per_agent.push_back(std::move(table));
    }
    return policy;
}

/// Main learning loop. Each tick: every agent samples its local action,
/// the environment advances once, every agent applies one critic update
/// (with its own freshly sampled bootstrap action), then the improving
/// agents take one logits step. Per-agent generators make the result
/// independent of agent iteration order.
///
/// The actor step size is min(beta, alpha_used / timescale_ratio) so the
/// critic's effective step dominates the actor's at every single update
/// even after the visit-count schedule has decayed below beta * ratio.
///
/// Passing a PrivacyAudit records every table read with the agent scope it
/// happened under; the loop only ever touches agent i's tables inside
/// agent i's scope.
inline TabularTrainLog train_tabular(const Mdp& mdp, const TabularConfig& config,
                                     PrivacyAudit* audit = nullptr) {
    validate_mdp(mdp);
    config.validate();

    const int num_agents = mdp.num_agents();
    TabularTrainLog log;
    log.agents.reserve(num_agents);
    for (int i = 0; i < num_agents; ++i)
        log.agents.emplace_back(mdp.num_states, mdp.action_sizes[i], config.clip_min,
                                config.clip_max);
    if (config.init_logit_scale > 0.0) {
        std::normal_distribution<double> normal(0.0, config.init_logit_scale);
        for (int i = 0; i < num_agents; ++i) {
            Rng init_rng(mix_seed(config.seed, 1000 + i));
            TabularAgent& agent = log.agents[i];
            for (int s = 0; s < agent.num_states(); ++s)
                for (int a = 0; a < agent.num_actions(); ++a)
                    agent.logits(s, a) =
                        std::clamp(normal(init_rng), config.clip_min, config.clip_max);
        }
    }

    Rng env_rng(mix_seed(config.seed, 0));
    std::vector<Rng> agent_rng;
    agent_rng.reserve(num_agents);
    for (int i = 0; i < num_agents; ++i)
        agent_rng.emplace_back(mix_seed(config.seed, 1 + i));

    std::vector<int> locals(num_agents);
    int state = 0;
    double window_return = 0.0;

    for (long long t = 0; t < config.steps; ++t) {
        for (int i = 0; i < num_agents; ++i) {
            AuditScope scope(audit, i);
            note_param_read(audit, i); // own logits drive the draw
            locals[i] = sample_action(log.agents[i], state, agent_rng[i]);
        }
        const StepOutcome outcome = step(mdp, state, encode_joint_action(mdp, locals), env_rng);
        window_return += outcome.reward;

        for (int i = 0; i < num_agents; ++i) {
            AuditScope scope(audit, i);
            TabularAgent& agent = log.agents[i];
            note_param_read(audit, i); // own logits for the bootstrap draw
            const int fresh = sample_action(agent, outcome.next_state, agent_rng[i]);
            const double alpha = config.alpha(agent.visit_counts(state, locals[i]));
            note_param_read(audit, i); // own q table
            q_update(agent, state, locals[i], outcome.reward, outcome.next_state, fresh, alpha,
                     mdp.gamma);
            const bool improves = !config.sequential || (t % num_agents == i);
            if (improves && config.beta > 0.0) {
                note_param_read(audit, i); // own q row and logits row
                policy_gradient_step(agent, state,
                                     std::min(config.beta, alpha / config.timescale_ratio));
            }
        }

        state = outcome.next_state;
        if ((t + 1) % config.episode_length == 0) {
            EpisodeRow row;
            row.step = t + 1;
            row.episode_return = window_return;
            if (config.track_q_residual) {
                const JointPolicy current = policy_from_agents(log.agents);
                row.q_residuals.reserve(num_agents);
                for (int i = 0; i < num_agents; ++i)
                    row.q_residuals.push_back(
                        (log.agents[i].q - exact_local_q(mdp, current, i))
                            .lpNorm<Eigen::Infinity>());
            }
            log.rows.push_back(std::move(row));
            window_return = 0.0;
        }
    }
    return log;
}

// --- centralized and joint baselines ------------------------------------

/// The same MDP seen by a single global agent whose action set is the
/// whole joint space. Transition and reward tensors are reused unchanged;
/// only the action factorization collapses.
inline Mdp centralized_view(const Mdp& mdp) {
    Mdp view = mdp;
    view.action_sizes = {mdp.num_joint_actions()};
    return view;
}

struct JointQConfig {
    std::uint64_t seed = 0;
    long long steps = 100000;
    int episode_length = 100;
    StepSizeSchedule alpha{0.7, 1.0};
    double epsilon = 0.1;       // exploration rate, constant
    int joint_action_cap = 65536;

    void validate() const {
        alpha.validate();
        if (steps < 1 || episode_length < 1)
            throw std::invalid_argument("JointQConfig: steps and episode_length must be >= 1");
        if (!(epsilon >= 0.0 && epsilon <= 1.0))
            throw std::invalid_argument("JointQConfig: epsilon must lie in [0, 1]");
    }
};

/// Epsilon-greedy Q-learning over the enumerated joint action space, with
/// the same logging schema as train_tabular. Refuses joint spaces above
/// the configured cap, reporting the offending size.
inline TabularTrainLog joint_q_learning_baseline(const Mdp& mdp, const JointQConfig& config) {
    validate_mdp(mdp);
    config.validate();
    const int num_joint = mdp.num_joint_actions();
    if (num_joint > config.joint_action_cap)
        throw std::invalid_argument(
            "joint_q_learning_baseline: joint action space has " + std::to_string(num_joint) +
            " actions, above the cap of " + std::to_string(config.joint_action_cap));

    TabularTrainLog log;
    // one global agent; logits unused, visit counts drive the schedule
    log.agents.emplace_back(mdp.num_states, num_joint);
    TabularAgent& table = log.agents.front();

    Rng env_rng(mix_seed(config.seed, 0));
    Rng policy_rng(mix_seed(config.seed, 1));
    std::uniform_real_distribution<double> uniform(0.0, 1.0);

    int state = 0;
    double window_return = 0.0;
    for (long long t = 0; t < config.steps; ++t) {
        int action;
        if (uniform(policy_rng) < config.epsilon) {
            action = static_cast<int>(
                std::uniform_int_distribution<int>(0, num_joint - 1)(policy_rng));
        } else {
            int best = 0;
            for (int a = 1; a < num_joint; ++a)
                if (table.q(state, a) > table.q(state, best))
                    best = a;
            action = best;
        }
        const StepOutcome outcome = step(mdp, state, action, env_rng);
        window_return += outcome.reward;

        const double alpha = config.alpha(table.visit_counts(state, action));
        const double target =
            outcome.reward + mdp.gamma * table.q.row(outcome.next_state).maxCoeff();
        table.q(state, action) += alpha * (target - table.q(state, action));
        table.visit_counts(state, action) += 1;

        state = outcome.next_state;
        if ((t + 1) % config.episode_length == 0) {
            log.rows.push_back({t + 1, window_return, {}});
            window_return = 0.0;
        }
    }
    return log;
}

/// Greedy joint policy read off a trained joint table, expressed as the
/// single-agent policy of the centralized view (rows are point masses).
inline JointPolicy greedy_joint_policy(const Mdp& mdp, const TabularAgent& table) {
    const int num_joint = mdp.num_joint_actions();
    if (table.num_actions() != num_joint || table.num_states() != mdp.num_states)
        throw std::invalid_argument("greedy_joint_policy: table shape mismatch");
    JointPolicy policy;
    Eigen::MatrixXd rows = Eigen::MatrixXd::Zero(mdp.num_states, num_joint);
    for (int s = 0; s < mdp.num_states; ++s) {
        int best = 0;
        for (int a = 1; a < num_joint; ++a)
            if (table.q(s, a) > table.q(s, best))
                best = a;
        rows(s, best) = 1.0;
    }
    policy.per_agent.push_back(std::move(rows));
    return policy;
}

} // namespace dmarl
