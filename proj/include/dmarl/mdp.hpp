#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include <dmarl/rng.hpp>

namespace dmarl {

/// Finite multi-agent MDP. Joint actions are mixed-radix encoded over the
/// per-agent action sizes, agent 0 least significant.
///
/// `transition` has one row per (state, joint action) pair, indexed
/// `state * num_joint_actions + action`; each row is a distribution over
/// next states. `reward` is (num_states x num_joint_actions) and
/// deterministic given (s, a).
struct Mdp {
    int num_states = 0;
    std::vector<int> action_sizes;
    Eigen::MatrixXd transition;
    Eigen::MatrixXd reward;
    double gamma = 0.9;

    int num_agents() const { return static_cast<int>(action_sizes.size()); }

    int num_joint_actions() const {
        int n = 1;
        for (int a : action_sizes)
            n *= a;
        return n;
    }

    int transition_row(int state, int joint_action) const {
        return state * num_joint_actions() + joint_action;
    }
};

/// Mixed-radix encoding of per-agent local actions into one joint index.
inline int encode_joint_action(const Mdp& mdp, std::span<const int> locals) {
    if (static_cast<int>(locals.size()) != mdp.num_agents())
        throw std::invalid_argument("encode_joint_action: wrong number of local actions");
    int index = 0;
    int radix = 1;
    for (int i = 0; i < mdp.num_agents(); ++i) {
        if (locals[i] < 0 || locals[i] >= mdp.action_sizes[i])
            throw std::invalid_argument("encode_joint_action: local action out of range");
        index += locals[i] * radix;
        radix *= mdp.action_sizes[i];
    }
    return index;
}

inline std::vector<int> decode_joint_action(const Mdp& mdp, int joint_action) {
    if (joint_action < 0 || joint_action >= mdp.num_joint_actions())
        throw std::invalid_argument("decode_joint_action: joint action out of range");
    std::vector<int> locals(mdp.num_agents());
    for (int i = 0; i < mdp.num_agents(); ++i) {
        locals[i] = joint_action % mdp.action_sizes[i];
        joint_action /= mdp.action_sizes[i];
    }
    return locals;
}

/// Throws std::invalid_argument unless every transition row is a
/// distribution (tolerance 1e-12), rewards are finite, and gamma < 1.
inline void validate_mdp(const Mdp& mdp) {
    if (mdp.num_states < 1)
        throw std::invalid_argument("Mdp: num_states must be >= 1");
    if (mdp.action_sizes.empty())
        throw std::invalid_argument("Mdp: needs at least one agent");
    for (int a : mdp.action_sizes)
        if (a < 1)
            throw std::invalid_argument("Mdp: every action size must be >= 1");
    if (!(mdp.gamma >= 0.0 && mdp.gamma < 1.0))
        throw std::invalid_argument("Mdp: gamma must lie in [0, 1)");

    const int rows = mdp.num_states * mdp.num_joint_actions();
    if (mdp.transition.rows() != rows || mdp.transition.cols() != mdp.num_states)
        throw std::invalid_argument("Mdp: transition tensor has wrong shape");
    if (mdp.reward.rows() != mdp.num_states || mdp.reward.cols() != mdp.num_joint_actions())
        throw std::invalid_argument("Mdp: reward table has wrong shape");

    for (int r = 0; r < rows; ++r) {
        double sum = 0.0;
        for (int s = 0; s < mdp.num_states; ++s) {
            const double p = mdp.transition(r, s);
            if (!(p >= 0.0))
                throw std::invalid_argument("Mdp: negative transition probability in row " +
                                            std::to_string(r));
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-12)
            throw std::invalid_argument("Mdp: transition row " + std::to_string(r) +
                                        " sums to " + std::to_string(sum));
    }
    if (!mdp.reward.allFinite())
        throw std::invalid_argument("Mdp: reward table contains non-finite entries");
}

/// Draws transition rows uniform-then-normalized and rewards standard
/// normal. Identical seeds give identical instances.
inline Mdp generate_random_mdp(std::uint64_t seed, int num_states,
                               const std::vector<int>& action_sizes, double gamma = 0.9) {
    if (num_states < 1)
        throw std::invalid_argument("generate_random_mdp: num_states must be >= 1");
    if (action_sizes.empty())
        throw std::invalid_argument("generate_random_mdp: need at least one agent");
    for (int a : action_sizes)
        if (a < 1)
            throw std::invalid_argument("generate_random_mdp: action sizes must be >= 1");

    Mdp mdp;
    mdp.num_states = num_states;
    mdp.action_sizes = action_sizes;
    mdp.gamma = gamma;

    const int num_joint = mdp.num_joint_actions();
    mdp.transition.resize(num_states * num_joint, num_states);
    mdp.reward.resize(num_states, num_joint);

    Rng rng(seed);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    for (int r = 0; r < num_states * num_joint; ++r) {
        double sum = 0.0;
        do {
            sum = 0.0;
            for (int s = 0; s < num_states; ++s) {
                const double u = uniform(rng);
                mdp.transition(r, s) = u;
                sum += u;
            }
        } while (sum == 0.0); // an all-zero row cannot be normalized
        mdp.transition.row(r) /= sum;
    }
    for (int s = 0; s < num_states; ++s)
        for (int a = 0; a < num_joint; ++a)
            mdp.reward(s, a) = normal(rng);

    validate_mdp(mdp);
    return mdp;
}

/// Inverse-CDF draw from a probability row. `u` must be in [0, 1).
inline int sample_from_row(const Eigen::Ref<const Eigen::RowVectorXd>& probs, double u) {
    double cum = 0.0;
    int last_positive = 0;
    for (int i = 0; i < probs.size(); ++i) {
        if (probs(i) > 0.0)
            last_positive = i;
        cum += probs(i);
        if (u < cum)
            return i;
    }
    return last_positive; // rounding pushed the cumulative sum below 1
}

struct StepOutcome {
    int next_state = 0;
    double reward = 0.0;
};

/// One environment transition: next state sampled from the transition row,
/// reward read from the table.
inline StepOutcome step(const Mdp& mdp, int state, int joint_action, Rng& rng) {
    if (state < 0 || state >= mdp.num_states)
        throw std::invalid_argument("step: state out of range");
    if (joint_action < 0 || joint_action >= mdp.num_joint_actions())
        throw std::invalid_argument("step: joint action out of range");
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    StepOutcome out;
    out.next_state =
        sample_from_row(mdp.transition.row(mdp.transition_row(state, joint_action)), uniform(rng));
    out.reward = mdp.reward(state, joint_action);
    return out;
}

/// Product policy: one probability table per agent, each row a distribution
/// over that agent's local actions.
struct JointPolicy {
    std::vector<Eigen::MatrixXd> per_agent;

    int num_agents() const { return static_cast<int>(per_agent.size()); }
};

/// Rows must sum to 1 within 1e-12. When `require_strictly_positive` is set
/// every entry must be > 0 (the condition the convergence results need);
/// exact-improvement oracles construct point-mass rows and skip it.
inline void validate_policy(const JointPolicy& policy, const Mdp& mdp,
                            bool require_strictly_positive = true) {
    if (policy.num_agents() != mdp.num_agents())
        throw std::invalid_argument("validate_policy: agent count mismatch");
    for (int i = 0; i < policy.num_agents(); ++i) {
        const auto& table = policy.per_agent[i];
        if (table.rows() != mdp.num_states || table.cols() != mdp.action_sizes[i])
            throw std::invalid_argument("validate_policy: table shape mismatch for agent " +
                                        std::to_string(i));
        for (int s = 0; s < table.rows(); ++s) {
            double sum = 0.0;
            for (int a = 0; a < table.cols(); ++a) {
                const double p = table(s, a);
                if (!(p >= 0.0))
                    throw std::invalid_argument("validate_policy: negative probability");
                if (require_strictly_positive && !(p > 0.0))
                    throw std::invalid_argument("validate_policy: zero probability at agent " +
                                                std::to_string(i) + ", state " + std::to_string(s));
                sum += p;
            }
            if (std::abs(sum - 1.0) > 1e-12)
                throw std::invalid_argument("validate_policy: row does not sum to 1");
        }
    }
}

inline JointPolicy uniform_policy(const Mdp& mdp) {
    JointPolicy policy;
    policy.per_agent.reserve(mdp.num_agents());
    for (int i = 0; i < mdp.num_agents(); ++i)
        policy.per_agent.push_back(Eigen::MatrixXd::Constant(mdp.num_states, mdp.action_sizes[i],
                                                             1.0 / mdp.action_sizes[i]));
    return policy;
}

/// Random strictly-positive policy, softmax of N(0, temperature) logits.
inline JointPolicy random_policy(const Mdp& mdp, std::uint64_t seed, double temperature = 1.0) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, temperature);
    JointPolicy policy;
    policy.per_agent.reserve(mdp.num_agents());
    for (int i = 0; i < mdp.num_agents(); ++i) {
        Eigen::MatrixXd table(mdp.num_states, mdp.action_sizes[i]);
        for (int s = 0; s < mdp.num_states; ++s) {
            double maxv = -1e300;
            for (int a = 0; a < mdp.action_sizes[i]; ++a) {
                table(s, a) = normal(rng);
                maxv = std::max(maxv, table(s, a));
            }
            double sum = 0.0;
            for (int a = 0; a < mdp.action_sizes[i]; ++a) {
                table(s, a) = std::exp(table(s, a) - maxv);
                sum += table(s, a);
            }
            table.row(s) /= sum;
        }
        policy.per_agent.push_back(std::move(table));
    }
    return policy;
}

/// Probability of the joint action under the product policy.
inline double joint_action_prob(const Mdp& mdp, const JointPolicy& policy, int state,
                                int joint_action) {
    double p = 1.0;
    int rest = joint_action;
    for (int i = 0; i < mdp.num_agents(); ++i) {
        const int local = rest % mdp.action_sizes[i];
        rest /= mdp.action_sizes[i];
        p *= policy.per_agent[i](state, local);
    }
    return p;
}

/// State-to-state chain P_pi under the policy.
inline Eigen::MatrixXd policy_transition(const Mdp& mdp, const JointPolicy& policy) {
    const int S = mdp.num_states;
    const int A = mdp.num_joint_actions();
    Eigen::MatrixXd chain = Eigen::MatrixXd::Zero(S, S);
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < A; ++a) {
            const double p = joint_action_prob(mdp, policy, s, a);
            if (p > 0.0)
                chain.row(s) += p * mdp.transition.row(mdp.transition_row(s, a));
        }
    return chain;
}

/// Policy-averaged one-step reward R_pi.
inline Eigen::VectorXd policy_reward(const Mdp& mdp, const JointPolicy& policy) {
    const int S = mdp.num_states;
    const int A = mdp.num_joint_actions();
    Eigen::VectorXd r = Eigen::VectorXd::Zero(S);
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < A; ++a)
            r(s) += joint_action_prob(mdp, policy, s, a) * mdp.reward(s, a);
    return r;
}

/// Discounted state values V_pi by direct linear solve of
/// (I - gamma P_pi) V = R_pi with partial pivoting. Throws if the solve
/// residual exceeds 1e-10.
inline Eigen::VectorXd exact_state_values(const Mdp& mdp, const JointPolicy& policy) {
    validate_policy(policy, mdp, /*require_strictly_positive=*/false);
    const int S = mdp.num_states;
    const Eigen::MatrixXd chain = policy_transition(mdp, policy);
    const Eigen::VectorXd r = policy_reward(mdp, policy);
    const Eigen::MatrixXd system = Eigen::MatrixXd::Identity(S, S) - mdp.gamma * chain;
    const Eigen::VectorXd values = Eigen::PartialPivLU<Eigen::MatrixXd>(system).solve(r);
    const double residual = (system * values - r).lpNorm<Eigen::Infinity>();
    if (!(residual < 1e-10))
        throw std::runtime_error("exact_state_values: linear solve residual " +
                                 std::to_string(residual));
    return values;
}

/// Marginalizes the other agents out of a joint-action expectation:
/// for each (s, a_local of `agent`) accumulates
/// sum over joint actions consistent with a_local of
/// prod_{j != agent} pi_j * term(s, joint).
template <typename Term>
inline Eigen::MatrixXd marginalize_others(const Mdp& mdp, const JointPolicy& policy, int agent,
                                          Term&& term) {
    const int S = mdp.num_states;
    const int A = mdp.num_joint_actions();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(S, mdp.action_sizes[agent]);
    for (int s = 0; s < S; ++s)
        for (int a = 0; a < A; ++a) {
            double others = 1.0;
            int local = 0;
            int rest = a;
            for (int j = 0; j < mdp.num_agents(); ++j) {
                const int aj = rest % mdp.action_sizes[j];
                rest /= mdp.action_sizes[j];
                if (j == agent)
                    local = aj;
                else
                    others *= policy.per_agent[j](s, aj);
            }
            if (others > 0.0)
                out(s, local) += others * term(s, a);
        }
    return out;
}

/// Exact per-agent action values: Q_i(s, a_i) marginalizes the other
/// agents' actions and bootstraps through the exact state values.
inline Eigen::MatrixXd exact_local_q(const Mdp& mdp, const JointPolicy& policy, int agent) {
    if (agent < 0 || agent >= mdp.num_agents())
        throw std::invalid_argument("exact_local_q: agent index out of range");
    const Eigen::VectorXd values = exact_state_values(mdp, policy);
    return marginalize_others(mdp, policy, agent, [&](int s, int a) {
        return mdp.reward(s, a) +
               mdp.gamma * mdp.transition.row(mdp.transition_row(s, a)).dot(values);
    });
}

/// One application of the per-agent evaluation operator:
/// (H q)(s, a_i) = E_{a_-i}[ R(s,a) + gamma E_{s', a_i' ~ pi_i} q(s', a_i') ].
/// Contraction with modulus gamma; its fixed point is exact_local_q.
inline Eigen::MatrixXd local_bellman_apply(const Mdp& mdp, const JointPolicy& policy, int agent,
                                           const Eigen::MatrixXd& q) {
    if (q.rows() != mdp.num_states || q.cols() != mdp.action_sizes[agent])
        throw std::invalid_argument("local_bellman_apply: q table shape mismatch");
    // expected q under the agent's own policy at each state
    Eigen::VectorXd expected(mdp.num_states);
    for (int s = 0; s < mdp.num_states; ++s)
        expected(s) = policy.per_agent[agent].row(s).dot(q.row(s));
    return marginalize_others(mdp, policy, agent, [&](int s, int a) {
        return mdp.reward(s, a) +
               mdp.gamma * mdp.transition.row(mdp.transition_row(s, a)).dot(expected);
    });
}

/// Stationary distribution of the policy-induced chain, by replacing one
/// balance equation with the normalization constraint.
inline Eigen::VectorXd stationary_distribution(const Mdp& mdp, const JointPolicy& policy) {
    const int S = mdp.num_states;
    const Eigen::MatrixXd chain = policy_transition(mdp, policy);
    Eigen::MatrixXd system = chain.transpose() - Eigen::MatrixXd::Identity(S, S);
    system.row(S - 1).setOnes();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(S);
    rhs(S - 1) = 1.0;
    Eigen::VectorXd dist = Eigen::PartialPivLU<Eigen::MatrixXd>(system).solve(rhs);
    const double residual = (chain.transpose() * dist - dist).lpNorm<Eigen::Infinity>();
    if (!(residual < 1e-10) || !(std::abs(dist.sum() - 1.0) < 1e-10))
        throw std::runtime_error("stationary_distribution: solve failed, residual " +
                                 std::to_string(residual));
    return dist;
}

/// Long-run reward per step under the policy (stationary-weighted mean of
/// R_pi). Equals (1 - gamma) * d' V_pi, which tests cross-check.
inline double average_reward(const Mdp& mdp, const JointPolicy& policy) {
    return stationary_distribution(mdp, policy).dot(policy_reward(mdp, policy));
}

// --- serialization ---------------------------------------------------------
//
// JSON layout: { "format": "dmarl-mdp-v1", "num_states", "action_sizes",
// "gamma", "transition": row-major (state, joint, next), "reward":
// row-major (state, joint), optional "provenance": {"seed": ...} }.

inline nlohmann::json mdp_to_json(const Mdp& mdp) {
    nlohmann::json j;
    j["format"] = "dmarl-mdp-v1";
    j["num_states"] = mdp.num_states;
    j["action_sizes"] = mdp.action_sizes;
    j["gamma"] = mdp.gamma;
    std::vector<double> transition;
    transition.reserve(static_cast<std::size_t>(mdp.transition.size()));
    for (int r = 0; r < mdp.transition.rows(); ++r)
        for (int c = 0; c < mdp.transition.cols(); ++c)
            transition.push_back(mdp.transition(r, c));
    std::vector<double> reward;
    reward.reserve(static_cast<std::size_t>(mdp.reward.size()));
    for (int r = 0; r < mdp.reward.rows(); ++r)
        for (int c = 0; c < mdp.reward.cols(); ++c)
            reward.push_back(mdp.reward(r, c));
    j["transition"] = std::move(transition);
    j["reward"] = std::move(reward);
    return j;
}

inline Mdp mdp_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != std::string("dmarl-mdp-v1"))
        throw std::invalid_argument("mdp_from_json: unknown format tag");
    Mdp mdp;
    mdp.num_states = j.at("num_states").get<int>();
    mdp.action_sizes = j.at("action_sizes").get<std::vector<int>>();
    mdp.gamma = j.at("gamma").get<double>();
    const auto transition = j.at("transition").get<std::vector<double>>();
    const auto reward = j.at("reward").get<std::vector<double>>();
    const int rows = mdp.num_states * mdp.num_joint_actions();
    if (static_cast<int>(transition.size()) != rows * mdp.num_states ||
        static_cast<int>(reward.size()) != mdp.num_states * mdp.num_joint_actions())
        throw std::invalid_argument("mdp_from_json: tensor length mismatch");
    mdp.transition.resize(rows, mdp.num_states);
    mdp.reward.resize(mdp.num_states, mdp.num_joint_actions());
    std::size_t k = 0;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < mdp.num_states; ++c)
            mdp.transition(r, c) = transition[k++];
    k = 0;
    for (int r = 0; r < mdp.num_states; ++r)
        for (int c = 0; c < mdp.num_joint_actions(); ++c)
            mdp.reward(r, c) = reward[k++];
    validate_mdp(mdp);
    return mdp;
}

inline void save_mdp(const Mdp& mdp, const std::string& path, std::int64_t seed_provenance = -1) {
    nlohmann::json j = mdp_to_json(mdp);
    if (seed_provenance >= 0)
        j["provenance"] = {{"seed", seed_provenance}, {"generator", "uniform-normalized/normal"}};
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("save_mdp: cannot open " + path);
    out << j.dump(2) << '\n';
}

inline Mdp load_mdp(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("load_mdp: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return mdp_from_json(j);
}

} // namespace dmarl
