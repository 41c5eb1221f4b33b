#pragma once

#include <dmarl/rng.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace dmarl {

/// Per-agent action width: one inert slot plus two opposed pairs that form
/// the planar force.
inline constexpr int kSpreadActionDim = 5;

/// Cooperative-navigation environment: N planar agents each steer toward
/// their own target while avoiding collisions with the others. Physics
/// constants are deliberately configuration, not code.
struct SpreadConfig {
    int num_agents = 3;
    double damping = 0.75;       // velocity carry-over per step
    double force_gain = 1.0;
    double dt = 0.1;
    double speed_cap = 1.0;
    double collision_radius = 0.15;
    double arena_half_width = 1.5;
    int episode_length = 25;

    void validate() const {
        if (num_agents < 1)
            throw std::invalid_argument("SpreadConfig: num_agents must be >= 1");
        if (!(dt > 0.0) || !(force_gain > 0.0) || !(speed_cap > 0.0))
            throw std::invalid_argument("SpreadConfig: dt, force_gain, speed_cap must be > 0");
        if (!(damping >= 0.0 && damping <= 1.0))
            throw std::invalid_argument("SpreadConfig: damping must lie in [0, 1]");
        if (!(collision_radius >= 0.0) || !(arena_half_width > 0.0))
            throw std::invalid_argument("SpreadConfig: radius/arena must be positive");
        if (episode_length < 1)
            throw std::invalid_argument("SpreadConfig: episode_length must be >= 1");
    }
};

/// Full observable state. Row k of each matrix belongs to agent k; the
/// target assignment is fixed (agent k chases target k).
struct SpreadState {
    Eigen::MatrixX2d positions;
    Eigen::MatrixX2d velocities;
    Eigen::MatrixX2d targets;
    int step_count = 0;

    int num_agents() const { return static_cast<int>(positions.rows()); }
};

/// Agents and targets uniform in [-1, 1]^2, velocities zero.
inline SpreadState spread_reset(const SpreadConfig& config, Rng& rng) {
    config.validate();
    std::uniform_real_distribution<double> uniform(-1.0, 1.0);
    SpreadState state;
    state.positions.resize(config.num_agents, 2);
    state.velocities = Eigen::MatrixX2d::Zero(config.num_agents, 2);
    state.targets.resize(config.num_agents, 2);
    for (int k = 0; k < config.num_agents; ++k)
        for (int c = 0; c < 2; ++c)
            state.positions(k, c) = uniform(rng);
    for (int k = 0; k < config.num_agents; ++k)
        for (int c = 0; c < 2; ++c)
            state.targets(k, c) = uniform(rng);
    return state;
}

inline int spread_observation_dim(int num_agents) { return 6 * num_agents; }

/// Flat observation [agent positions, agent velocities, target positions],
/// row-major over agents. Every agent sees the same vector.
inline Eigen::VectorXd spread_observation(const SpreadState& state) {
    const int n = state.num_agents();
    Eigen::VectorXd obs(spread_observation_dim(n));
    for (int k = 0; k < n; ++k) {
        obs(2 * k) = state.positions(k, 0);
        obs(2 * k + 1) = state.positions(k, 1);
        obs(2 * n + 2 * k) = state.velocities(k, 0);
        obs(2 * n + 2 * k + 1) = state.velocities(k, 1);
        obs(4 * n + 2 * k) = state.targets(k, 0);
        obs(4 * n + 2 * k + 1) = state.targets(k, 1);
    }
    return obs;
}

inline double mean_distance_to_targets(const SpreadState& state) {
    double total = 0.0;
    for (int k = 0; k < state.num_agents(); ++k)
        total += (state.positions.row(k) - state.targets.row(k)).norm();
    return total / state.num_agents();
}

struct SpreadStepResult {
    SpreadState state;
    Eigen::VectorXd agent_rewards;
    double global_reward = 0.0;
};

/// One physics tick. Action k is a 5-vector in [-1, 1]; its first entry is
/// inert and the rest form the planar force (a1 - a2, a3 - a4). Dynamics:
/// v <- damping * v + gain * dt * force, speed-capped; p <- p + dt * v,
/// clamped to the arena. Rewards are evaluated at the new positions:
/// r_k = -|p_k - target_k| - 1 if agent k stands within collision radius
/// of any other agent; the global reward is the mean over agents.
inline SpreadStepResult spread_step(const SpreadConfig& config, const SpreadState& state,
                                    const std::vector<Eigen::VectorXd>& actions) {
    config.validate();
    const int n = state.num_agents();
    if (static_cast<int>(actions.size()) != n)
        throw std::invalid_argument("spread_step: expected " + std::to_string(n) + " actions");
    for (const Eigen::VectorXd& a : actions) {
        if (a.size() != kSpreadActionDim)
            throw std::invalid_argument("spread_step: actions must be 5-dimensional");
        if (!a.allFinite() || a.array().abs().maxCoeff() > 1.0)
            throw std::invalid_argument("spread_step: action components must lie in [-1, 1]");
    }

    SpreadStepResult result;
    result.state = state;
    result.state.step_count = state.step_count + 1;
    for (int k = 0; k < n; ++k) {
        const Eigen::Vector2d force(actions[k](1) - actions[k](2),
                                    actions[k](3) - actions[k](4));
        Eigen::Vector2d v = config.damping * state.velocities.row(k).transpose() +
                            config.force_gain * config.dt * force;
        const double speed = v.norm();
        if (speed > config.speed_cap)
            v *= config.speed_cap / speed;
        Eigen::Vector2d p = state.positions.row(k).transpose() + config.dt * v;
        p = p.cwiseMax(-config.arena_half_width).cwiseMin(config.arena_half_width);
        result.state.velocities.row(k) = v.transpose();
        result.state.positions.row(k) = p.transpose();
    }

    result.agent_rewards.resize(n);
    for (int k = 0; k < n; ++k) {
        double r = -(result.state.positions.row(k) - result.state.targets.row(k)).norm();
        for (int j = 0; j < n; ++j) {
            if (j == k)
                continue;
            if ((result.state.positions.row(k) - result.state.positions.row(j)).norm() <
                config.collision_radius) {
                r -= 1.0; // one penalty per step regardless of how many contacts
                break;
            }
        }
        result.agent_rewards(k) = r;
    }
    result.global_reward = result.agent_rewards.mean();
    return result;
}

} // namespace dmarl
