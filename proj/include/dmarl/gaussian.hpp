#pragma once

#include <dmarl/mlp.hpp>
#include <dmarl/rng.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace dmarl {

inline constexpr double kLogSigmaMin = -20.0;
inline constexpr double kLogSigmaMax = 2.0;
// squashed actions are pulled this far inside (-1, 1) so atanh stays finite
inline constexpr double kActionMargin = 1e-12;

/// Stochastic policy a = tanh(mu + sigma * xi), xi ~ N(0, I). The trunk
/// outputs [mu; log sigma] and log sigma is clamped to
/// [kLogSigmaMin, kLogSigmaMax] before exponentiation.
struct SquashedGaussianHead {
    MlpParams trunk;
    int action_dim = 0;
};

inline SquashedGaussianHead make_gaussian_head(const std::vector<int>& hidden, int state_dim,
                                               int action_dim, std::uint64_t seed) {
    if (state_dim < 1 || action_dim < 1)
        throw std::invalid_argument("make_gaussian_head: dimensions must be >= 1");
    std::vector<int> sizes;
    sizes.push_back(state_dim);
    for (int h : hidden)
        sizes.push_back(h);
    sizes.push_back(2 * action_dim);
    SquashedGaussianHead head;
    head.trunk = make_mlp(sizes, seed);
    head.action_dim = action_dim;
    return head;
}

inline void validate_gaussian_head(const SquashedGaussianHead& head) {
    validate_mlp(head.trunk);
    if (head.action_dim < 1 || head.trunk.output_dim() != 2 * head.action_dim)
        throw std::invalid_argument(
            "SquashedGaussianHead: trunk must emit 2 * action_dim outputs");
}

/// Distribution parameters at a state. `clamped(k)` marks coordinates whose
/// raw log sigma fell outside the clamp range (their sigma gradient is 0).
struct GaussianParams {
    Eigen::VectorXd mu;
    Eigen::VectorXd log_sigma; // after clamping
    Eigen::VectorXd sigma;
    Eigen::Array<bool, Eigen::Dynamic, 1> clamped;
};

inline GaussianParams head_params(const SquashedGaussianHead& head, const Eigen::VectorXd& state) {
    const Eigen::VectorXd raw = forward(head.trunk, state);
    const int d = head.action_dim;
    GaussianParams p;
    p.mu = raw.head(d);
    p.log_sigma.resize(d);
    p.sigma.resize(d);
    p.clamped.resize(d);
    for (int k = 0; k < d; ++k) {
        const double ls = raw(d + k);
        p.clamped(k) = ls < kLogSigmaMin || ls > kLogSigmaMax;
        p.log_sigma(k) = std::clamp(ls, kLogSigmaMin, kLogSigmaMax);
        p.sigma(k) = std::exp(p.log_sigma(k));
    }
    return p;
}

/// Deterministic squash of a fixed noise draw. Actions are pulled inside
/// the open cube by kActionMargin, so the density is defined at every
/// value this function can return.
inline Eigen::VectorXd action_of_noise(const SquashedGaussianHead& head,
                                       const Eigen::VectorXd& state, const Eigen::VectorXd& xi) {
    if (xi.size() != head.action_dim)
        throw std::invalid_argument("action_of_noise: noise has wrong dimension");
    const GaussianParams p = head_params(head, state);
    Eigen::VectorXd action(head.action_dim);
    for (int k = 0; k < head.action_dim; ++k) {
        const double a = std::tanh(p.mu(k) + p.sigma(k) * xi(k));
        action(k) = std::clamp(a, -1.0 + kActionMargin, 1.0 - kActionMargin);
    }
    return action;
}

struct SquashedSample {
    Eigen::VectorXd action;
    Eigen::VectorXd xi;
};

inline SquashedSample sample_squashed(const SquashedGaussianHead& head,
                                      const Eigen::VectorXd& state, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    SquashedSample sample;
    sample.xi.resize(head.action_dim);
    for (int k = 0; k < head.action_dim; ++k)
        sample.xi(k) = normal(rng);
    sample.action = action_of_noise(head, state, sample.xi);
    return sample;
}

namespace detail {
inline double softplus(double x) {
    return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0);
}
} // namespace detail

/// log density of the squashed policy at `action`, via change of variables
/// through tanh: log N(atanh(a); mu, sigma) - sum_k log(1 - a_k^2). The
/// Jacobian term is evaluated as 2(log 2 - u - softplus(-2u)) with
/// u = atanh(a), which does not cancel catastrophically near |a| = 1.
inline double log_prob(const SquashedGaussianHead& head, const Eigen::VectorXd& state,
                       const Eigen::VectorXd& action) {
    if (action.size() != head.action_dim)
        throw std::invalid_argument("log_prob: action has wrong dimension");
    for (int k = 0; k < head.action_dim; ++k)
        if (!(std::abs(action(k)) < 1.0))
            throw std::domain_error("log_prob: action on or outside the unit cube boundary");
    const GaussianParams p = head_params(head, state);
    constexpr double half_log_two_pi = 0.9189385332046727417803297364056;
    const double log2 = std::log(2.0);
    double total = 0.0;
    for (int k = 0; k < head.action_dim; ++k) {
        const double u = std::atanh(action(k));
        const double z = (u - p.mu(k)) / p.sigma(k);
        total += -0.5 * z * z - p.log_sigma(k) - half_log_two_pi;
        total -= 2.0 * (log2 - u - detail::softplus(-2.0 * u));
    }
    return total;
}

struct LogProbGrad {
    double value = 0.0;
    MlpGradients trunk;
};

/// log_prob together with its gradient in the trunk parameters. Per
/// coordinate: d/dmu = z/sigma and d/dlog sigma = z^2 - 1 (zero where the
/// clamp is active); the tanh Jacobian term is constant in the parameters.
inline LogProbGrad log_prob_with_grad(const SquashedGaussianHead& head,
                                      const Eigen::VectorXd& state,
                                      const Eigen::VectorXd& action) {
    LogProbGrad out;
    out.value = log_prob(head, state, action);
    const GaussianParams p = head_params(head, state);
    const int d = head.action_dim;
    Eigen::VectorXd upstream = Eigen::VectorXd::Zero(2 * d);
    for (int k = 0; k < d; ++k) {
        const double z = (std::atanh(action(k)) - p.mu(k)) / p.sigma(k);
        upstream(k) = z / p.sigma(k);
        upstream(d + k) = p.clamped(k) ? 0.0 : (z * z - 1.0);
    }
    out.trunk = backward(head.trunk, state, upstream);
    return out;
}

struct ActionGrad {
    Eigen::VectorXd action;
    MlpGradients trunk;
};

/// Reparameterized pathwise gradient: for fixed noise xi, chains an
/// upstream dL/da through a = tanh(mu + sigma * xi) into the trunk:
/// da/dmu = 1 - a^2, da/dlog sigma = (1 - a^2) * sigma * xi (zero at the
/// clamp). Coordinates pinned by the action margin also pass zero.
inline ActionGrad action_grad_of_noise(const SquashedGaussianHead& head,
                                       const Eigen::VectorXd& state, const Eigen::VectorXd& xi,
                                       const Eigen::VectorXd& upstream_da) {
    if (xi.size() != head.action_dim || upstream_da.size() != head.action_dim)
        throw std::invalid_argument("action_grad_of_noise: dimension mismatch");
    const GaussianParams p = head_params(head, state);
    const int d = head.action_dim;
    ActionGrad out;
    out.action.resize(d);
    Eigen::VectorXd upstream = Eigen::VectorXd::Zero(2 * d);
    for (int k = 0; k < d; ++k) {
        const double raw = std::tanh(p.mu(k) + p.sigma(k) * xi(k));
        const double a = std::clamp(raw, -1.0 + kActionMargin, 1.0 - kActionMargin);
        out.action(k) = a;
        const double pinned = raw == a ? 1.0 : 0.0;
        const double dmu = pinned * (1.0 - raw * raw);
        upstream(k) = upstream_da(k) * dmu;
        upstream(d + k) = p.clamped(k) ? 0.0 : upstream_da(k) * dmu * p.sigma(k) * xi(k);
    }
    out.trunk = backward(head.trunk, state, upstream);
    return out;
}

} // namespace dmarl
