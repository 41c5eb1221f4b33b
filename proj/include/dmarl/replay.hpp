#pragma once

#include <dmarl/consensus.hpp>
#include <dmarl/rng.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace dmarl {

// importance weights live in [1/10, 10]
inline constexpr double kWeightMin = 0.1;
inline constexpr double kWeightMax = 10.0;

/// One stored experience of a single agent, together with the off-policy
/// bookkeeping: `behavior_logprob` is the agent's own policy density at
/// insertion time, `beta` the current log-ratio against it, `beta_prev`
/// the previous beta, and `x` the consensus state whose settled value is
/// the across-agent average of the betas.
struct ReplayEntry {
    Eigen::VectorXd s;
    Eigen::VectorXd a_local;
    double r = 0.0;
    Eigen::VectorXd s_next;
    double behavior_logprob = 0.0;
    double beta = 0.0;
    double beta_prev = 0.0;
    double x = 0.0;
    long long timestep = 0; // alignment key across agents
    bool stale = false;     // excluded from sampling, kept for alignment
};

/// Bounded FIFO of experiences. All entries must share the state/action
/// dimensions of the first insertion.
class ReplayBuffer {
  public:
    explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
        if (capacity < 1)
            throw std::invalid_argument("ReplayBuffer: capacity must be >= 1");
    }

    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    bool empty() const { return entries_.empty(); }

    const ReplayEntry& entry(std::size_t index) const { return entries_.at(index); }
    ReplayEntry& entry(std::size_t index) { return entries_.at(index); }

    /// Appends with zeroed off-policy state; evicts the oldest entry once
    /// full. Rejects non-finite behavior densities outright.
    void insert(ReplayEntry entry) {
        if (!std::isfinite(entry.behavior_logprob))
            throw std::invalid_argument("ReplayBuffer::insert: non-finite behavior log-density");
        if (entries_.empty()) {
            state_dim_ = entry.s.size();
            action_dim_ = entry.a_local.size();
        } else if (entry.s.size() != state_dim_ || entry.s_next.size() != state_dim_ ||
                   entry.a_local.size() != action_dim_) {
            throw std::invalid_argument("ReplayBuffer::insert: dimension mismatch");
        }
        entry.beta = 0.0;
        entry.beta_prev = 0.0;
        entry.x = 0.0;
        entry.stale = false;
        if (entries_.size() == capacity_)
            entries_.pop_front();
        entries_.push_back(std::move(entry));
    }

    /// Recomputes every entry's log-ratio against the current policy:
    /// beta_prev <- beta, beta <- logprob_now - behavior, x += beta -
    /// beta_prev. A non-finite current density flags the entry stale
    /// without touching its bookkeeping; a later finite refresh heals it.
    template <typename LogProbFn>
    void local_beta_refresh(LogProbFn&& current_logprob) {
        for (ReplayEntry& e : entries_)
            refresh_one(e, current_logprob);
    }

    /// Refresh restricted to the given indices (the lazy variant: only
    /// entries about to be consumed pay the density evaluation).
    template <typename LogProbFn>
    void local_beta_refresh_at(const std::vector<std::size_t>& indices,
                               LogProbFn&& current_logprob) {
        for (std::size_t index : indices)
            refresh_one(entries_.at(index), current_logprob);
    }

    /// Uniform-with-replacement indices over non-stale entries.
    std::vector<std::size_t> sample_indices(std::size_t count, Rng& rng) const {
        std::vector<std::size_t> eligible;
        eligible.reserve(entries_.size());
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (!entries_[i].stale)
                eligible.push_back(i);
        if (eligible.empty())
            throw std::runtime_error("ReplayBuffer::sample: no sampleable entries");
        std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
        std::vector<std::size_t> out;
        out.reserve(count);
        for (std::size_t k = 0; k < count; ++k)
            out.push_back(eligible[pick(rng)]);
        return out;
    }

    std::vector<ReplayEntry> sample_batch(std::size_t count, Rng& rng) const {
        std::vector<ReplayEntry> batch;
        batch.reserve(count);
        for (std::size_t index : sample_indices(count, rng))
            batch.push_back(entries_[index]);
        return batch;
    }

    Eigen::Index state_dim() const { return state_dim_; }
    Eigen::Index action_dim() const { return action_dim_; }

  private:
    template <typename LogProbFn>
    static void refresh_one(ReplayEntry& e, LogProbFn& current_logprob) {
        const double now = current_logprob(static_cast<const ReplayEntry&>(e));
        if (!std::isfinite(now)) {
            e.stale = true;
            return;
        }
        e.stale = false;
        e.beta_prev = e.beta;
        e.beta = now - e.behavior_logprob;
        e.x += e.beta - e.beta_prev;
    }

    std::deque<ReplayEntry> entries_;
    std::size_t capacity_;
    Eigen::Index state_dim_ = 0;
    Eigen::Index action_dim_ = 0;
};

/// Importance weight from the settled (or partially mixed) consensus
/// state: c = N * x - beta recovers the sum of the other agents'
/// log-ratios; e^c is clamped into [kWeightMin, kWeightMax]. A lone agent
/// always gets weight 1.
inline double is_weight(const ReplayEntry& entry, int num_agents) {
    if (num_agents < 1)
        throw std::invalid_argument("is_weight: need at least one agent");
    if (num_agents == 1)
        return 1.0;
    const double c = num_agents * entry.x - entry.beta;
    return std::clamp(std::exp(c), kWeightMin, kWeightMax);
}

/// One synchronized mixing round over every aligned entry's x value.
/// Buffers must hold the same timesteps in the same order. `observe`
/// is called as observe(reader_agent, source_agent, timestep) for every
/// cross-edge read, letting callers audit that transfers stay on edges.
template <typename Observer>
void consensus_exchange(const std::vector<ReplayBuffer*>& buffers, const Graph& graph,
                        Observer&& observe) {
    const int num_agents = static_cast<int>(buffers.size());
    if (num_agents != graph.num_nodes)
        throw std::invalid_argument("consensus_exchange: buffer count differs from graph size");
    if (num_agents == 0)
        return;
    const std::size_t count = buffers.front()->size();
    for (const ReplayBuffer* b : buffers)
        if (b->size() != count)
            throw std::runtime_error("consensus_exchange: buffers hold different entry counts");

    std::vector<double> snapshot(num_agents);
    for (std::size_t k = 0; k < count; ++k) {
        const long long timestep = buffers.front()->entry(k).timestep;
        for (int i = 0; i < num_agents; ++i) {
            const ReplayEntry& e = buffers[i]->entry(k);
            if (e.timestep != timestep)
                throw std::runtime_error(
                    "consensus_exchange: misaligned buffers at timestep " +
                    std::to_string(timestep) + " (agent " + std::to_string(i) + " holds " +
                    std::to_string(e.timestep) + ")");
            snapshot[i] = e.x;
        }
        for (int i = 0; i < num_agents; ++i)
            buffers[i]->entry(k).x = consensus_gather_one(graph, i, [&](int j) {
                if (j != i)
                    observe(i, j, timestep);
                return snapshot[j];
            });
    }
}

template <typename Observer>
void consensus_exchange(std::vector<ReplayBuffer>& buffers, const Graph& graph,
                        Observer&& observe) {
    std::vector<ReplayBuffer*> pointers;
    pointers.reserve(buffers.size());
    for (ReplayBuffer& b : buffers)
        pointers.push_back(&b);
    consensus_exchange(pointers, graph, std::forward<Observer>(observe));
}

inline void consensus_exchange(std::vector<ReplayBuffer>& buffers, const Graph& graph) {
    consensus_exchange(buffers, graph, [](int, int, long long) {});
}

// --- checkpoints -------------------------------------------------------
//
// Layout: 8-byte magic "DMRLBUF1", little-endian u64 metadata length, JSON
// metadata {format, capacity, count, state_dim, action_dim}, then `count`
// fixed-width records: i64 timestep, u8 stale, doubles r,
// behavior_logprob, beta, beta_prev, x, then s, a_local, s_next as doubles.

inline constexpr char kBufferMagic[8] = {'D', 'M', 'R', 'L', 'B', 'U', 'F', '1'};

inline void save_buffer(const ReplayBuffer& buffer, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("save_buffer: cannot open " + path);
    nlohmann::json meta;
    meta["format"] = "dmarl-buffer-v1";
    meta["capacity"] = buffer.capacity();
    meta["count"] = buffer.size();
    meta["state_dim"] = static_cast<long long>(buffer.state_dim());
    meta["action_dim"] = static_cast<long long>(buffer.action_dim());
    const std::string text = meta.dump();
    const std::uint64_t length = text.size();
    out.write(kBufferMagic, sizeof(kBufferMagic));
    out.write(reinterpret_cast<const char*>(&length), sizeof(length));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));

    auto put_doubles = [&](const Eigen::VectorXd& v) {
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(double)));
    };
    for (std::size_t k = 0; k < buffer.size(); ++k) {
        const ReplayEntry& e = buffer.entry(k);
        out.write(reinterpret_cast<const char*>(&e.timestep), sizeof(e.timestep));
        const std::uint8_t stale = e.stale ? 1 : 0;
        out.write(reinterpret_cast<const char*>(&stale), sizeof(stale));
        const double scalars[5] = {e.r, e.behavior_logprob, e.beta, e.beta_prev, e.x};
        out.write(reinterpret_cast<const char*>(scalars), sizeof(scalars));
        put_doubles(e.s);
        put_doubles(e.a_local);
        put_doubles(e.s_next);
    }
    if (!out)
        throw std::runtime_error("save_buffer: write failed for " + path);
}

inline ReplayBuffer load_buffer(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("load_buffer: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kBufferMagic, sizeof(magic)) != 0)
        throw std::runtime_error("load_buffer: bad magic in " + path);
    std::uint64_t length = 0;
    in.read(reinterpret_cast<char*>(&length), sizeof(length));
    if (!in || length > (1ull << 20))
        throw std::runtime_error("load_buffer: implausible metadata length");
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    const nlohmann::json meta = nlohmann::json::parse(text);
    if (meta.value("format", "") != std::string("dmarl-buffer-v1"))
        throw std::runtime_error("load_buffer: unknown format tag");

    ReplayBuffer buffer(meta.at("capacity").get<std::size_t>());
    const auto count = meta.at("count").get<std::size_t>();
    const auto state_dim = meta.at("state_dim").get<Eigen::Index>();
    const auto action_dim = meta.at("action_dim").get<Eigen::Index>();
    auto get_doubles = [&](Eigen::VectorXd& v, Eigen::Index n) {
        v.resize(n);
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
    };
    for (std::size_t k = 0; k < count; ++k) {
        ReplayEntry e;
        in.read(reinterpret_cast<char*>(&e.timestep), sizeof(e.timestep));
        std::uint8_t stale = 0;
        in.read(reinterpret_cast<char*>(&stale), sizeof(stale));
        double scalars[5];
        in.read(reinterpret_cast<char*>(scalars), sizeof(scalars));
        get_doubles(e.s, state_dim);
        get_doubles(e.a_local, action_dim);
        get_doubles(e.s_next, state_dim);
        if (!in)
            throw std::runtime_error("load_buffer: truncated record " + std::to_string(k));
        // insert() zeroes the bookkeeping, so restore the stored values after
        const double beta = scalars[2], beta_prev = scalars[3], x = scalars[4];
        e.r = scalars[0];
        e.behavior_logprob = scalars[1];
        buffer.insert(std::move(e));
        ReplayEntry& stored = buffer.entry(k);
        stored.beta = beta;
        stored.beta_prev = beta_prev;
        stored.x = x;
        stored.stale = stale != 0;
    }
    return buffer;
}

} // namespace dmarl
