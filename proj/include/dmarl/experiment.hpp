#pragma once

#include <dmarl/continuous.hpp>
#include <dmarl/spread.hpp>
#include <dmarl/tabular.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dmarl {

/// 17 significant digits: enough for the decimal text to reproduce the
/// exact double on read-back, so re-runs of a seeded experiment are
/// byte-identical artifacts.
inline std::string format_double(double value) {
    char buffer[40];
    std::snprintf(buffer, sizeof(buffer), "%.17g", value);
    return buffer;
}

inline std::ofstream open_output(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot open " + path + " for writing");
    return out;
}

/// Episode log of one tabular run. Residual columns appear only when the
/// run tracked them.
inline void write_tabular_csv(const std::string& path, const TabularTrainLog& log) {
    std::ofstream out = open_output(path);
    out << "step,episode_return";
    const std::size_t residuals = log.rows.empty() ? 0 : log.rows.front().q_residuals.size();
    for (std::size_t i = 0; i < residuals; ++i)
        out << ",q_residual_" << i;
    out << "\n";
    for (const EpisodeRow& row : log.rows) {
        out << row.step << "," << format_double(row.episode_return);
        if (row.q_residuals.size() != residuals)
            throw std::runtime_error("write_tabular_csv: ragged residual columns");
        for (double r : row.q_residuals)
            out << "," << format_double(r);
        out << "\n";
    }
}

inline void write_continuous_csv(const std::string& path,
                                 const std::vector<ContinuousEpisodeRow>& rows) {
    std::ofstream out = open_output(path);
    out << "episode,episode_return,critic_loss,mean_abs_c\n";
    for (const ContinuousEpisodeRow& row : rows)
        out << row.episode << "," << format_double(row.episode_return) << ","
            << format_double(row.critic_loss) << "," << format_double(row.mean_abs_c) << "\n";
}

/// Append-only per-step position/reward dump for the planar task.
class TrajectoryWriter {
  public:
    explicit TrajectoryWriter(const std::string& path) : out_(open_output(path)) {
        out_ << "episode,step,agent,x,y,reward\n";
    }

    void record(int episode, int step, const SpreadState& state,
                const Eigen::VectorXd& agent_rewards) {
        for (int k = 0; k < state.num_agents(); ++k)
            out_ << episode << "," << step << "," << k << ","
                 << format_double(state.positions(k, 0)) << ","
                 << format_double(state.positions(k, 1)) << ","
                 << format_double(agent_rewards(k)) << "\n";
    }

  private:
    std::ofstream out_;
};

/// Minimal CSV reader for the files this project writes: a header row of
/// column names, then numeric rows.
struct CsvTable {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name)
                return static_cast<int>(i);
        throw std::runtime_error("csv: no column named '" + name + "'");
    }
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("csv: cannot open " + path);
    CsvTable table;
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("csv: " + path + " is empty");
    std::istringstream header(line);
    std::string cell;
    while (std::getline(header, cell, ','))
        table.columns.push_back(cell);
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::istringstream fields(line);
        std::vector<double> row;
        while (std::getline(fields, cell, ','))
            row.push_back(std::stod(cell));
        if (row.size() != table.columns.size())
            throw std::runtime_error("csv: ragged row in " + path);
        table.rows.push_back(std::move(row));
    }
    return table;
}

/// Summary statistics of one learning curve, all recomputable from its CSV:
/// the sum of episode returns, the mean over the final fraction of
/// episodes, and the first step at which the return reached the threshold
/// (-1 when it never did or no threshold was set).
struct SeriesSummary {
    double auc = 0.0;
    double final_mean = 0.0;
    long long steps_to_threshold = -1;
};

inline SeriesSummary summarize_series(const std::vector<std::pair<long long, double>>& series,
                                      double final_fraction,
                                      std::optional<double> threshold) {
    if (series.empty())
        throw std::invalid_argument("summarize_series: empty series");
    if (!(final_fraction > 0.0 && final_fraction <= 1.0))
        throw std::invalid_argument("summarize_series: final_fraction must lie in (0, 1]");
    SeriesSummary summary;
    for (const auto& [step, value] : series) {
        summary.auc += value;
        if (threshold && summary.steps_to_threshold < 0 && value >= *threshold)
            summary.steps_to_threshold = step;
    }
    const std::size_t count = std::max<std::size_t>(
        1, static_cast<std::size_t>(final_fraction * static_cast<double>(series.size())));
    double total = 0.0;
    for (std::size_t i = series.size() - count; i < series.size(); ++i)
        total += series[i].second;
    summary.final_mean = total / static_cast<double>(count);
    return summary;
}

/// Mean and sample standard deviation (zero for a single value).
struct Aggregate {
    double mean = 0.0;
    double stddev = 0.0;
};

inline Aggregate aggregate(const std::vector<double>& values) {
    if (values.empty())
        throw std::invalid_argument("aggregate: no values");
    Aggregate a;
    for (double v : values)
        a.mean += v;
    a.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values)
            ss += (v - a.mean) * (v - a.mean);
        a.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return a;
}

} // namespace dmarl
