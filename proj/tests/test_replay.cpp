#include <catch2/catch_amalgamated.hpp>

#include <dmarl/replay.hpp>

#include <filesystem>
#include <fstream>
#include <set>

using namespace dmarl;

namespace {

ReplayEntry make_entry(long long timestep, double behavior_logprob = -1.0) {
    ReplayEntry e;
    e.s = Eigen::VectorXd::Constant(2, 0.5 * static_cast<double>(timestep));
    e.a_local = Eigen::VectorXd::Constant(1, 0.1);
    e.r = static_cast<double>(timestep);
    e.s_next = Eigen::VectorXd::Constant(2, 0.5 * static_cast<double>(timestep) + 1.0);
    e.behavior_logprob = behavior_logprob;
    e.timestep = timestep;
    return e;
}

} // namespace

TEST_CASE("insertion: FIFO eviction, zeroed bookkeeping, rejection") {
    ReplayBuffer buffer(3);
    for (long long t = 0; t < 4; ++t) {
        ReplayEntry e = make_entry(t);
        e.beta = 99.0; // must be ignored
        e.x = 99.0;
        e.stale = true;
        buffer.insert(std::move(e));
    }
    REQUIRE(buffer.size() == 3);
    REQUIRE(buffer.entry(0).timestep == 1); // the oldest was evicted
    REQUIRE(buffer.entry(2).timestep == 3);
    for (std::size_t k = 0; k < 3; ++k) {
        REQUIRE(buffer.entry(k).beta == 0.0);
        REQUIRE(buffer.entry(k).beta_prev == 0.0);
        REQUIRE(buffer.entry(k).x == 0.0);
        REQUIRE_FALSE(buffer.entry(k).stale);
        REQUIRE(is_weight(buffer.entry(k), 4) == 1.0);
    }

    REQUIRE_THROWS_AS(buffer.insert(make_entry(9, -std::numeric_limits<double>::infinity())),
                      std::invalid_argument);
    ReplayEntry wrong = make_entry(9);
    wrong.a_local = Eigen::VectorXd::Zero(3);
    REQUIRE_THROWS_AS(buffer.insert(std::move(wrong)), std::invalid_argument);
    REQUIRE_THROWS_AS(ReplayBuffer(0), std::invalid_argument);
}

TEST_CASE("beta refresh arithmetic and staleness") {
    ReplayBuffer buffer(8);
    for (long long t = 0; t < 4; ++t)
        buffer.insert(make_entry(t, -2.0));

    // unchanged policy: the log-ratio is zero and x stays put
    buffer.local_beta_refresh([](const ReplayEntry&) { return -2.0; });
    for (std::size_t k = 0; k < buffer.size(); ++k) {
        REQUIRE(buffer.entry(k).beta == 0.0);
        REQUIRE(buffer.entry(k).x == 0.0);
    }

    // density doubled at the stored action
    buffer.local_beta_refresh([](const ReplayEntry&) { return -2.0 + std::log(2.0); });
    for (std::size_t k = 0; k < buffer.size(); ++k) {
        REQUIRE(buffer.entry(k).beta == Catch::Approx(std::log(2.0)).margin(1e-15));
        REQUIRE(buffer.entry(k).x == Catch::Approx(std::log(2.0)).margin(1e-15));
    }

    // a second refresh with no further change is a no-op on x
    buffer.local_beta_refresh([](const ReplayEntry&) { return -2.0 + std::log(2.0); });
    for (std::size_t k = 0; k < buffer.size(); ++k)
        REQUIRE(buffer.entry(k).x == Catch::Approx(std::log(2.0)).margin(1e-15));

    // non-finite density flags stale without disturbing the bookkeeping
    buffer.local_beta_refresh([](const ReplayEntry& e) {
        return e.timestep == 2 ? std::numeric_limits<double>::quiet_NaN() : -2.0;
    });
    REQUIRE(buffer.entry(2).stale);
    REQUIRE(buffer.entry(2).beta == Catch::Approx(std::log(2.0)).margin(1e-15));
    Rng rng(3);
    for (std::size_t index : buffer.sample_indices(1000, rng))
        REQUIRE(buffer.entry(index).timestep != 2);

    // a later finite refresh heals the entry
    buffer.local_beta_refresh([](const ReplayEntry&) { return -2.0; });
    REQUIRE_FALSE(buffer.entry(2).stale);
    REQUIRE(buffer.entry(2).beta == 0.0);
}

TEST_CASE("sampling: uniformity, determinism, error cases") {
    ReplayBuffer buffer(5);
    for (long long t = 0; t < 5; ++t)
        buffer.insert(make_entry(t));

    Rng rng(17);
    const int n = 30000;
    std::vector<int> counts(5, 0);
    for (std::size_t index : buffer.sample_indices(n, rng))
        counts[index] += 1;
    const double sigma = std::sqrt(0.2 * 0.8 / n);
    for (int c : counts)
        REQUIRE(std::abs(c / static_cast<double>(n) - 0.2) < 3.0 * sigma);

    Rng a(5), b(5);
    REQUIRE(buffer.sample_indices(100, a) == buffer.sample_indices(100, b));

    ReplayBuffer single(4);
    single.insert(make_entry(42));
    Rng rng2(1);
    const auto batch = single.sample_batch(1, rng2);
    REQUIRE(batch.size() == 1);
    REQUIRE(batch.front().timestep == 42);

    ReplayBuffer empty(4);
    Rng rng3(1);
    REQUIRE_THROWS_AS(empty.sample_indices(1, rng3), std::runtime_error);

    ReplayBuffer all_stale(4);
    all_stale.insert(make_entry(0));
    all_stale.local_beta_refresh(
        [](const ReplayEntry&) { return std::numeric_limits<double>::infinity(); });
    REQUIRE_THROWS_AS(all_stale.sample_indices(1, rng3), std::runtime_error);
}

TEST_CASE("importance weights: recovery arithmetic, lone agent, clamping") {
    ReplayEntry e = make_entry(0);
    // settled consensus over betas (0.1, 0.2, 0.3): x = 0.2 everywhere;
    // the agent holding beta = 0.1 gets c = 0.6 - 0.1
    e.beta = 0.1;
    e.x = 0.2;
    REQUIRE(is_weight(e, 3) == Catch::Approx(std::exp(0.5)).margin(1e-15));

    ReplayEntry zero = make_entry(1);
    REQUIRE(is_weight(zero, 7) == 1.0);
    // a lone agent never reweighs, whatever the bookkeeping says
    ReplayEntry junk = make_entry(2);
    junk.beta = 3.0;
    junk.x = -2.0;
    REQUIRE(is_weight(junk, 1) == 1.0);

    ReplayEntry high = make_entry(3);
    high.x = 5.0; // c = 10 - 0 far above ln 10
    REQUIRE(is_weight(high, 2) == 10.0);
    ReplayEntry low = make_entry(4);
    low.x = -5.0;
    REQUIRE(is_weight(low, 2) == Catch::Approx(0.1).margin(1e-15));

    REQUIRE_THROWS_AS(is_weight(e, 0), std::invalid_argument);
}

TEST_CASE("consensus exchange: averaging, conservation, locality, alignment") {
    const Graph k3 = make_complete(3);
    std::vector<ReplayBuffer> buffers(3, ReplayBuffer(4));
    for (int i = 0; i < 3; ++i)
        for (long long t = 0; t < 2; ++t)
            buffers[i].insert(make_entry(t));
    buffers[0].entry(0).x = 0.1;
    buffers[1].entry(0).x = 0.2;
    buffers[2].entry(0).x = 0.3;

    consensus_exchange(buffers, k3);
    // complete graph of 3 averages in one step; the second entry is all
    // zeros and must stay there
    for (int i = 0; i < 3; ++i) {
        REQUIRE(buffers[i].entry(0).x == Catch::Approx(0.2).margin(1e-15));
        REQUIRE(buffers[i].entry(1).x == 0.0);
    }

    // ring of 4: transfers only along edges, sums conserved
    const Graph ring = make_ring(4);
    std::vector<ReplayBuffer> ring_buffers(4, ReplayBuffer(4));
    for (int i = 0; i < 4; ++i) {
        ring_buffers[i].insert(make_entry(7));
        ring_buffers[i].entry(0).x = 1.0 + i;
    }
    double sum_before = 0.0;
    for (int i = 0; i < 4; ++i)
        sum_before += ring_buffers[i].entry(0).x;
    std::set<std::pair<int, int>> seen;
    consensus_exchange(ring_buffers, ring, [&](int reader, int source, long long timestep) {
        REQUIRE(timestep == 7);
        seen.insert({reader, source});
    });
    REQUIRE(seen.size() == 8); // both directions of all four edges
    for (const auto& [reader, source] : seen)
        REQUIRE(ring.has_edge(reader, source));
    double sum_after = 0.0;
    for (int i = 0; i < 4; ++i)
        sum_after += ring_buffers[i].entry(0).x;
    REQUIRE(sum_after == Catch::Approx(sum_before).margin(1e-12));

    // misalignment is a protocol error naming the timestep
    std::vector<ReplayBuffer> bad(2, ReplayBuffer(4));
    bad[0].insert(make_entry(10));
    bad[1].insert(make_entry(11));
    REQUIRE_THROWS_WITH(consensus_exchange(bad, make_line(2)),
                        Catch::Matchers::ContainsSubstring("10"));
    std::vector<ReplayBuffer> uneven(2, ReplayBuffer(4));
    uneven[0].insert(make_entry(0));
    REQUIRE_THROWS_AS(consensus_exchange(uneven, make_line(2)), std::runtime_error);
    REQUIRE_THROWS_AS(consensus_exchange(uneven, make_ring(3)), std::invalid_argument);
}

TEST_CASE("full protocol: frozen policies give weight 1, perturbation is recovered") {
    // four agents on a ring, behavior densities fixed at insertion
    const Graph ring = make_ring(4);
    const int N = 4;
    std::vector<ReplayBuffer> buffers(N, ReplayBuffer(16));
    std::vector<double> current_logprob(N, -1.5);
    for (int i = 0; i < N; ++i)
        for (long long t = 0; t < 5; ++t)
            buffers[i].insert(make_entry(t, -1.5));

    auto round = [&]() {
        for (int i = 0; i < N; ++i)
            buffers[i].local_beta_refresh(
                [&](const ReplayEntry&) { return current_logprob[i]; });
        consensus_exchange(buffers, ring);
    };

    // frozen: every beta is 0, so c = 0 and the weight is exactly 1
    for (int r = 0; r < 10; ++r)
        round();
    for (int i = 0; i < N; ++i)
        for (std::size_t k = 0; k < 5; ++k) {
            REQUIRE(std::abs(buffers[i].entry(k).x) < 1e-9);
            REQUIRE(std::abs(is_weight(buffers[i].entry(k), N) - 1.0) < 1e-9);
        }

    // one agent's policy shifts: its density at the stored actions doubles
    current_logprob[2] = -1.5 + std::log(2.0);
    for (int r = 0; r < 200; ++r)
        round();
    const double global_beta_sum = std::log(2.0); // only agent 2 moved
    for (int i = 0; i < N; ++i)
        for (std::size_t k = 0; k < 5; ++k) {
            const ReplayEntry& e = buffers[i].entry(k);
            REQUIRE(std::abs(N * e.x - global_beta_sum) < 1e-6);
            const double expected_c = global_beta_sum - e.beta;
            REQUIRE(is_weight(e, N) == Catch::Approx(std::exp(expected_c)).margin(1e-6));
        }

    // conservation held throughout: sum of x equals sum of beta per entry
    for (std::size_t k = 0; k < 5; ++k) {
        double x_sum = 0.0, beta_sum = 0.0;
        for (int i = 0; i < N; ++i) {
            x_sum += buffers[i].entry(k).x;
            beta_sum += buffers[i].entry(k).beta;
        }
        REQUIRE(x_sum == Catch::Approx(beta_sum).margin(1e-12));
    }
}

TEST_CASE("reweighing recovers an off-distribution expectation") {
    // sample from q, reweigh by p/q: the weighted mean estimates E_p[f]
    const double q[3] = {0.5, 0.3, 0.2};
    const double p[3] = {0.2, 0.3, 0.5};
    auto f = [](int v) { return static_cast<double>(v * v + 1); };
    const double truth = p[0] * f(0) + p[1] * f(1) + p[2] * f(2);

    Rng rng(23);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const int n = 100000;
    double mean = 0.0, second = 0.0;
    for (int k = 0; k < n; ++k) {
        const double u = uniform(rng);
        const int v = u < q[0] ? 0 : (u < q[0] + q[1] ? 1 : 2);
        const double sample = (p[v] / q[v]) * f(v);
        mean += sample;
        second += sample * sample;
    }
    mean /= n;
    second /= n;
    const double standard_error = std::sqrt((second - mean * mean) / n);
    REQUIRE(std::abs(mean - truth) < 3.0 * standard_error);
}

TEST_CASE("buffer checkpoints round trip bit-exactly") {
    const auto path =
        (std::filesystem::temp_directory_path() / "dmarl_buffer_roundtrip.bin").string();
    ReplayBuffer buffer(10);
    for (long long t = 0; t < 6; ++t)
        buffer.insert(make_entry(t, -0.25 * static_cast<double>(t + 1)));
    buffer.local_beta_refresh([](const ReplayEntry& e) {
        return e.timestep == 3 ? std::numeric_limits<double>::quiet_NaN()
                               : -0.1 * static_cast<double>(e.timestep);
    });
    buffer.entry(1).x = 0.625; // nontrivial consensus state

    save_buffer(buffer, path);
    ReplayBuffer loaded = load_buffer(path);
    REQUIRE(loaded.capacity() == 10);
    REQUIRE(loaded.size() == buffer.size());
    for (std::size_t k = 0; k < buffer.size(); ++k) {
        const ReplayEntry& a = buffer.entry(k);
        const ReplayEntry& b = loaded.entry(k);
        REQUIRE(a.timestep == b.timestep);
        REQUIRE(a.stale == b.stale);
        REQUIRE(a.r == b.r);
        REQUIRE(a.behavior_logprob == b.behavior_logprob);
        REQUIRE(a.beta == b.beta);
        REQUIRE(a.beta_prev == b.beta_prev);
        REQUIRE(a.x == b.x);
        REQUIRE((a.s.array() == b.s.array()).all());
        REQUIRE((a.a_local.array() == b.a_local.array()).all());
        REQUIRE((a.s_next.array() == b.s_next.array()).all());
    }

    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "WRONGMAGIC";
    }
    REQUIRE_THROWS_AS(load_buffer(path), std::runtime_error);
    std::filesystem::remove(path);
    REQUIRE_THROWS_AS(load_buffer(path), std::runtime_error);
}
