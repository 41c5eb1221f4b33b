#pragma once

#include <dmarl/rng.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace dmarl {

/// Fully-connected net with tanh hidden layers and an identity output
/// layer. Forward evaluation uses fixed-order scalar loops so results are
/// bit-reproducible and can be matched exactly by an independent
/// re-implementation of the same arithmetic.
struct MlpParams {
    std::vector<int> layer_sizes;       // [in, hidden..., out]
    std::vector<Eigen::MatrixXd> weights; // weights[l] is (out_l x in_l)
    std::vector<Eigen::VectorXd> biases;

    int num_layers() const { return static_cast<int>(weights.size()); }
    int input_dim() const { return layer_sizes.front(); }
    int output_dim() const { return layer_sizes.back(); }

    long long param_count() const {
        long long n = 0;
        for (int l = 0; l < num_layers(); ++l)
            n += weights[l].size() + biases[l].size();
        return n;
    }
};

inline void validate_mlp(const MlpParams& mlp) {
    if (mlp.layer_sizes.size() < 2)
        throw std::invalid_argument("MlpParams: need at least input and output sizes");
    for (int size : mlp.layer_sizes)
        if (size < 1)
            throw std::invalid_argument("MlpParams: layer sizes must be >= 1");
    if (mlp.weights.size() + 1 != mlp.layer_sizes.size() ||
        mlp.biases.size() != mlp.weights.size())
        throw std::invalid_argument("MlpParams: layer count mismatch");
    for (std::size_t l = 0; l < mlp.weights.size(); ++l) {
        if (mlp.weights[l].rows() != mlp.layer_sizes[l + 1] ||
            mlp.weights[l].cols() != mlp.layer_sizes[l] ||
            mlp.biases[l].size() != mlp.layer_sizes[l + 1])
            throw std::invalid_argument("MlpParams: shape mismatch at layer " +
                                        std::to_string(l));
        if (!mlp.weights[l].allFinite() || !mlp.biases[l].allFinite())
            throw std::invalid_argument("MlpParams: non-finite parameter at layer " +
                                        std::to_string(l));
    }
}

/// Uniform fan-in initialization: every weight and bias of layer l is drawn
/// from U(-1/sqrt(in_l), 1/sqrt(in_l)). Seed-deterministic.
inline MlpParams make_mlp(const std::vector<int>& layer_sizes, std::uint64_t seed) {
    MlpParams mlp;
    mlp.layer_sizes = layer_sizes;
    if (layer_sizes.size() < 2)
        throw std::invalid_argument("make_mlp: need at least input and output sizes");
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
        const int in = layer_sizes[l];
        const int out = layer_sizes[l + 1];
        if (in < 1 || out < 1)
            throw std::invalid_argument("make_mlp: layer sizes must be >= 1");
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> uniform(-bound, bound);
        Eigen::MatrixXd w(out, in);
        Eigen::VectorXd b(out);
        for (int j = 0; j < out; ++j) {
            for (int k = 0; k < in; ++k)
                w(j, k) = uniform(rng);
            b(j) = uniform(rng);
        }
        mlp.weights.push_back(std::move(w));
        mlp.biases.push_back(std::move(b));
    }
    validate_mlp(mlp);
    return mlp;
}

/// Per-layer activations kept for the backward pass. post[0] is the input;
/// post[l+1] is layer l's output after its nonlinearity (identity on the
/// last layer).
struct ForwardTrace {
    std::vector<Eigen::VectorXd> post;
};

inline ForwardTrace forward_trace(const MlpParams& mlp, const Eigen::VectorXd& input) {
    if (input.size() != mlp.input_dim())
        throw std::invalid_argument("forward: input has length " + std::to_string(input.size()) +
                                    ", expected " + std::to_string(mlp.input_dim()));
    ForwardTrace trace;
    trace.post.reserve(mlp.num_layers() + 1);
    trace.post.push_back(input);
    for (int l = 0; l < mlp.num_layers(); ++l) {
        const Eigen::VectorXd& x = trace.post.back();
        const int out = mlp.layer_sizes[l + 1];
        const int in = mlp.layer_sizes[l];
        Eigen::VectorXd y(out);
        const bool last = l + 1 == mlp.num_layers();
        for (int j = 0; j < out; ++j) {
            double acc = mlp.biases[l](j);
            for (int k = 0; k < in; ++k)
                acc += mlp.weights[l](j, k) * x(k);
            y(j) = last ? acc : std::tanh(acc);
        }
        trace.post.push_back(std::move(y));
    }
    return trace;
}

inline Eigen::VectorXd forward(const MlpParams& mlp, const Eigen::VectorXd& input) {
    return forward_trace(mlp, input).post.back();
}

/// Gradients of a scalar function of the output, in parameter shapes plus
/// the gradient with respect to the input vector.
struct MlpGradients {
    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;
    Eigen::VectorXd input;

    void axpy(double coefficient, const MlpGradients& other) {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            weights[l] += coefficient * other.weights[l];
            biases[l] += coefficient * other.biases[l];
        }
        input += coefficient * other.input;
    }

    void scale(double factor) {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            weights[l] *= factor;
            biases[l] *= factor;
        }
        input *= factor;
    }
};

inline MlpGradients zero_gradients(const MlpParams& mlp) {
    MlpGradients g;
    for (int l = 0; l < mlp.num_layers(); ++l) {
        g.weights.push_back(Eigen::MatrixXd::Zero(mlp.weights[l].rows(), mlp.weights[l].cols()));
        g.biases.push_back(Eigen::VectorXd::Zero(mlp.biases[l].size()));
    }
    g.input = Eigen::VectorXd::Zero(mlp.input_dim());
    return g;
}

/// Reverse-mode gradients of <upstream, output> through a cached trace.
/// tanh backpropagation uses 1 - y^2 with the stored post-activation y.
inline MlpGradients backward(const MlpParams& mlp, const ForwardTrace& trace,
                             const Eigen::VectorXd& upstream) {
    if (upstream.size() != mlp.output_dim())
        throw std::invalid_argument("backward: upstream gradient has wrong length");
    if (static_cast<int>(trace.post.size()) != mlp.num_layers() + 1)
        throw std::invalid_argument("backward: trace does not match the net");
    MlpGradients g = zero_gradients(mlp);
    Eigen::VectorXd delta = upstream; // gradient at layer outputs, post-activation
    for (int l = mlp.num_layers() - 1; l >= 0; --l) {
        const bool last = l + 1 == mlp.num_layers();
        if (!last) {
            const Eigen::VectorXd& y = trace.post[l + 1];
            delta = (delta.array() * (1.0 - y.array().square())).matrix();
        }
        g.biases[l] = delta;
        g.weights[l] = delta * trace.post[l].transpose();
        delta = mlp.weights[l].transpose() * delta; // becomes next delta downstream
    }
    g.input = delta;
    return g;
}

inline MlpGradients backward(const MlpParams& mlp, const Eigen::VectorXd& input,
                             const Eigen::VectorXd& upstream) {
    return backward(mlp, forward_trace(mlp, input), upstream);
}

// --- flat parameter view -------------------------------------------------
// Order: for each layer, the weight matrix row-major, then the bias.

inline Eigen::VectorXd flatten(const MlpParams& mlp) {
    Eigen::VectorXd flat(mlp.param_count());
    long long k = 0;
    for (int l = 0; l < mlp.num_layers(); ++l) {
        for (int j = 0; j < mlp.weights[l].rows(); ++j)
            for (int c = 0; c < mlp.weights[l].cols(); ++c)
                flat(k++) = mlp.weights[l](j, c);
        for (int j = 0; j < mlp.biases[l].size(); ++j)
            flat(k++) = mlp.biases[l](j);
    }
    return flat;
}

inline Eigen::VectorXd flatten(const MlpGradients& g) {
    long long n = 0;
    for (std::size_t l = 0; l < g.weights.size(); ++l)
        n += g.weights[l].size() + g.biases[l].size();
    Eigen::VectorXd flat(n);
    long long k = 0;
    for (std::size_t l = 0; l < g.weights.size(); ++l) {
        for (int j = 0; j < g.weights[l].rows(); ++j)
            for (int c = 0; c < g.weights[l].cols(); ++c)
                flat(k++) = g.weights[l](j, c);
        for (int j = 0; j < g.biases[l].size(); ++j)
            flat(k++) = g.biases[l](j);
    }
    return flat;
}

inline void unflatten(MlpParams& mlp, const Eigen::VectorXd& flat) {
    if (flat.size() != mlp.param_count())
        throw std::invalid_argument("unflatten: length mismatch");
    long long k = 0;
    for (int l = 0; l < mlp.num_layers(); ++l) {
        for (int j = 0; j < mlp.weights[l].rows(); ++j)
            for (int c = 0; c < mlp.weights[l].cols(); ++c)
                mlp.weights[l](j, c) = flat(k++);
        for (int j = 0; j < mlp.biases[l].size(); ++j)
            mlp.biases[l](j) = flat(k++);
    }
}

// --- optimizer -------------------------------------------------------------

/// Plain SGD with an optional momentum buffer (velocity form:
/// v <- momentum * v + g; p <- p - lr * v).
struct SgdState {
    std::vector<Eigen::MatrixXd> weight_velocity;
    std::vector<Eigen::VectorXd> bias_velocity;
};

inline SgdState make_sgd_state(const MlpParams& mlp) {
    SgdState state;
    for (int l = 0; l < mlp.num_layers(); ++l) {
        state.weight_velocity.push_back(
            Eigen::MatrixXd::Zero(mlp.weights[l].rows(), mlp.weights[l].cols()));
        state.bias_velocity.push_back(Eigen::VectorXd::Zero(mlp.biases[l].size()));
    }
    return state;
}

inline void sgd_step(MlpParams& mlp, const MlpGradients& g, double lr, double momentum,
                     SgdState& state) {
    if (!(lr >= 0.0) || !(momentum >= 0.0 && momentum < 1.0))
        throw std::invalid_argument("sgd_step: lr must be >= 0 and momentum in [0, 1)");
    for (int l = 0; l < mlp.num_layers(); ++l) {
        state.weight_velocity[l] = momentum * state.weight_velocity[l] + g.weights[l];
        state.bias_velocity[l] = momentum * state.bias_velocity[l] + g.biases[l];
        mlp.weights[l] -= lr * state.weight_velocity[l];
        mlp.biases[l] -= lr * state.bias_velocity[l];
    }
}

/// Polyak blend toward `source`: target <- (1 - rate) * target + rate * source.
inline void polyak_update(MlpParams& target, const MlpParams& source, double rate) {
    if (target.layer_sizes != source.layer_sizes)
        throw std::invalid_argument("polyak_update: architecture mismatch");
    if (!(rate > 0.0 && rate <= 1.0))
        throw std::invalid_argument("polyak_update: rate must lie in (0, 1]");
    for (int l = 0; l < target.num_layers(); ++l) {
        target.weights[l] = (1.0 - rate) * target.weights[l] + rate * source.weights[l];
        target.biases[l] = (1.0 - rate) * target.biases[l] + rate * source.biases[l];
    }
}

// --- checkpoints -----------------------------------------------------------
//
// Layout: 8-byte magic "DMRLMLP1", little-endian u64 metadata length, JSON
// metadata {format, layer_sizes, activation, param_count}, then param_count
// IEEE-754 doubles, little-endian, in flatten() order.

inline constexpr char kMlpMagic[8] = {'D', 'M', 'R', 'L', 'M', 'L', 'P', '1'};

inline void save_mlp(const MlpParams& mlp, const std::string& path) {
    validate_mlp(mlp);
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("save_mlp: cannot open " + path);
    nlohmann::json meta;
    meta["format"] = "dmarl-mlp-v1";
    meta["layer_sizes"] = mlp.layer_sizes;
    meta["activation"] = "tanh";
    meta["param_count"] = mlp.param_count();
    const std::string text = meta.dump();
    const std::uint64_t length = text.size();
    out.write(kMlpMagic, sizeof(kMlpMagic));
    out.write(reinterpret_cast<const char*>(&length), sizeof(length));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const Eigen::VectorXd flat = flatten(mlp);
    out.write(reinterpret_cast<const char*>(flat.data()),
              static_cast<std::streamsize>(flat.size() * sizeof(double)));
    if (!out)
        throw std::runtime_error("save_mlp: write failed for " + path);
}

inline MlpParams load_mlp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("load_mlp: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMlpMagic, sizeof(magic)) != 0)
        throw std::runtime_error("load_mlp: bad magic in " + path);
    std::uint64_t length = 0;
    in.read(reinterpret_cast<char*>(&length), sizeof(length));
    if (!in || length > (1ull << 20))
        throw std::runtime_error("load_mlp: implausible metadata length");
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    const nlohmann::json meta = nlohmann::json::parse(text);
    if (meta.value("format", "") != std::string("dmarl-mlp-v1"))
        throw std::runtime_error("load_mlp: unknown format tag");

    MlpParams mlp;
    mlp.layer_sizes = meta.at("layer_sizes").get<std::vector<int>>();
    for (std::size_t l = 0; l + 1 < mlp.layer_sizes.size(); ++l) {
        mlp.weights.emplace_back(mlp.layer_sizes[l + 1], mlp.layer_sizes[l]);
        mlp.biases.emplace_back(mlp.layer_sizes[l + 1]);
    }
    const long long expected = meta.at("param_count").get<long long>();
    if (expected != mlp.param_count())
        throw std::runtime_error("load_mlp: parameter count does not match layer sizes");
    Eigen::VectorXd flat(expected);
    in.read(reinterpret_cast<char*>(flat.data()),
            static_cast<std::streamsize>(expected * sizeof(double)));
    if (!in)
        throw std::runtime_error("load_mlp: truncated parameter array");
    unflatten(mlp, flat);
    validate_mlp(mlp);
    return mlp;
}

} // namespace dmarl
