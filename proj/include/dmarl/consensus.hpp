#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dmarl {

/// Undirected simple graph over nodes 0..num_nodes-1. Edges are stored
/// canonically as (low, high) and adjacency lists are kept sorted.
struct Graph {
    int num_nodes = 0;
    std::vector<std::vector<int>> neighbors;
    std::vector<std::pair<int, int>> edges;

    int degree(int node) const { return static_cast<int>(neighbors[node].size()); }

    int max_degree() const {
        int d = 0;
        for (const auto& adj : neighbors)
            d = std::max(d, static_cast<int>(adj.size()));
        return d;
    }

    bool has_edge(int a, int b) const {
        if (a < 0 || b < 0 || a >= num_nodes || b >= num_nodes || a == b)
            return false;
        const auto& adj = neighbors[a];
        return std::binary_search(adj.begin(), adj.end(), b);
    }
};

/// Builds a graph from an edge list. Rejects self-loops, duplicate edges,
/// and endpoints outside [0, num_nodes).
inline Graph graph_from_edges(int num_nodes, std::vector<std::pair<int, int>> edges) {
    if (num_nodes < 1)
        throw std::invalid_argument("graph_from_edges: num_nodes must be >= 1");
    Graph g;
    g.num_nodes = num_nodes;
    g.neighbors.resize(num_nodes);
    for (auto& [a, b] : edges) {
        if (a < 0 || b < 0 || a >= num_nodes || b >= num_nodes)
            throw std::invalid_argument("graph_from_edges: endpoint out of range");
        if (a == b)
            throw std::invalid_argument("graph_from_edges: self-loop on node " +
                                        std::to_string(a));
        if (a > b)
            std::swap(a, b);
    }
    std::sort(edges.begin(), edges.end());
    if (std::adjacent_find(edges.begin(), edges.end()) != edges.end())
        throw std::invalid_argument("graph_from_edges: duplicate edge");
    for (const auto& [a, b] : edges) {
        g.neighbors[a].push_back(b);
        g.neighbors[b].push_back(a);
    }
    for (auto& adj : g.neighbors)
        std::sort(adj.begin(), adj.end());
    g.edges = std::move(edges);
    return g;
}

inline Graph make_ring(int n) {
    if (n < 3)
        throw std::invalid_argument("make_ring: a ring needs at least 3 nodes");
    std::vector<std::pair<int, int>> edges;
    edges.reserve(n);
    for (int i = 0; i < n; ++i)
        edges.emplace_back(i, (i + 1) % n);
    return graph_from_edges(n, std::move(edges));
}

inline Graph make_complete(int n) {
    if (n < 2)
        throw std::invalid_argument("make_complete: need at least 2 nodes");
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            edges.emplace_back(i, j);
    return graph_from_edges(n, std::move(edges));
}

inline Graph make_line(int n) {
    if (n < 2)
        throw std::invalid_argument("make_line: need at least 2 nodes");
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i + 1 < n; ++i)
        edges.emplace_back(i, i + 1);
    return graph_from_edges(n, std::move(edges));
}

inline bool is_connected(const Graph& g) {
    if (g.num_nodes == 0)
        return false;
    std::vector<char> seen(g.num_nodes, 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    int count = 1;
    while (!stack.empty()) {
        const int node = stack.back();
        stack.pop_back();
        for (int next : g.neighbors[node])
            if (!seen[next]) {
                seen[next] = 1;
                ++count;
                stack.push_back(next);
            }
    }
    return count == g.num_nodes;
}

// --- file format -------------------------------------------------------
// First non-comment line: node count. Each following line: "i j" for an
// undirected edge. '#' starts a comment.

inline Graph load_graph(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("load_graph: cannot open " + path);
    std::string line;
    int num_nodes = -1;
    std::vector<std::pair<int, int>> edges;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos)
            line.erase(hash);
        std::istringstream ss(line);
        if (num_nodes < 0) {
            if (ss >> num_nodes)
                continue;
            continue; // blank or comment-only line before the header
        }
        int a, b;
        if (!(ss >> a))
            continue;
        if (!(ss >> b))
            throw std::invalid_argument("load_graph: line " + std::to_string(lineno) +
                                        " has a lone endpoint");
        edges.emplace_back(a, b);
    }
    if (num_nodes < 0)
        throw std::invalid_argument("load_graph: missing node-count header in " + path);
    return graph_from_edges(num_nodes, std::move(edges));
}

inline void save_graph(const Graph& g, const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("save_graph: cannot open " + path);
    out << g.num_nodes << '\n';
    for (const auto& [a, b] : g.edges)
        out << a << ' ' << b << '\n';
}

/// Accepts "ring:N", "complete:N", "line:N", or a path to an edge-list file.
inline Graph parse_graph_spec(const std::string& spec) {
    const auto colon = spec.find(':');
    if (colon != std::string::npos) {
        const std::string kind = spec.substr(0, colon);
        if (kind == "ring" || kind == "complete" || kind == "line") {
            int n = 0;
            try {
                std::size_t used = 0;
                n = std::stoi(spec.substr(colon + 1), &used);
                if (used != spec.size() - colon - 1)
                    throw std::invalid_argument("trailing characters");
            } catch (const std::exception&) {
                throw std::invalid_argument("parse_graph_spec: bad node count in '" + spec + "'");
            }
            if (kind == "ring")
                return make_ring(n);
            if (kind == "complete")
                return make_complete(n);
            return make_line(n);
        }
    }
    return load_graph(spec);
}

// --- mixing -------------------------------------------------------------

/// Symmetric doubly-stochastic mixing matrix: off-diagonal weight 1/(d+1)
/// on every edge with d the maximum degree, diagonal 1 - deg(i)/(d+1),
/// zero elsewhere. x <- Wx preserves the mean and contracts disagreement
/// on connected graphs.
inline Eigen::MatrixXd consensus_kernel(const Graph& g) {
    if (g.num_nodes < 1)
        throw std::invalid_argument("consensus_kernel: empty graph");
    const double share = 1.0 / (g.max_degree() + 1);
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(g.num_nodes, g.num_nodes);
    for (int i = 0; i < g.num_nodes; ++i) {
        for (int j : g.neighbors[i])
            w(i, j) = share;
        w(i, i) = 1.0 - g.degree(i) * share;
    }
    return w;
}

/// Node `node`'s next value after one mixing step. Reads only the node's
/// own value and its neighbors' through `value_of(j)`; instrumented callers
/// use this to check that nothing else crosses an edge.
template <typename ValueOf>
double consensus_gather_one(const Graph& g, int node, ValueOf&& value_of) {
    const double share = 1.0 / (g.max_degree() + 1);
    double acc = (1.0 - g.degree(node) * share) * value_of(node);
    for (int j : g.neighbors[node])
        acc += share * value_of(j);
    return acc;
}

/// One full mixing step as per-node gathers.
template <typename ValueOf>
std::vector<double> consensus_step_gather(const Graph& g, ValueOf&& value_of) {
    std::vector<double> next(g.num_nodes);
    for (int i = 0; i < g.num_nodes; ++i)
        next[i] = consensus_gather_one(g, i, value_of);
    return next;
}

inline Eigen::VectorXd consensus_step(const Graph& g, const Eigen::VectorXd& x) {
    if (x.size() != g.num_nodes)
        throw std::invalid_argument("consensus_step: vector length mismatch");
    const std::vector<double> next = consensus_step_gather(g, [&](int j) { return x(j); });
    return Eigen::Map<const Eigen::VectorXd>(next.data(), g.num_nodes);
}

/// Largest absolute deviation from the mean.
inline double consensus_deviation(const Eigen::VectorXd& x) {
    const double mean = x.mean();
    return (x.array() - mean).abs().maxCoeff();
}

struct ConsensusRun {
    Eigen::VectorXd x;
    int iterations = 0;
    bool converged = false;
};

/// Repeats mixing steps until the deviation from the mean drops below
/// `tol` or `max_iterations` is hit. Never throws on non-convergence; the
/// caller inspects `converged` (disconnected graphs legitimately stall).
inline ConsensusRun run_to_consensus(const Graph& g, Eigen::VectorXd x, double tol,
                                     int max_iterations) {
    ConsensusRun run;
    run.x = std::move(x);
    if (run.x.size() != g.num_nodes)
        throw std::invalid_argument("run_to_consensus: vector length mismatch");
    while (run.iterations < max_iterations) {
        if (consensus_deviation(run.x) < tol) {
            run.converged = true;
            return run;
        }
        run.x = consensus_step(g, run.x);
        ++run.iterations;
    }
    run.converged = consensus_deviation(run.x) < tol;
    return run;
}

} // namespace dmarl
