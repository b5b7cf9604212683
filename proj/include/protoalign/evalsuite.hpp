#pragma once

// Classification metrics, ROC analysis, prediction distributions, threshold
// sweeps and report writers.

#include "common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace protoalign {

struct MetricsReport {
    double accuracy = 0;
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    std::optional<double> roc_auc;  // binary tasks with both classes present
    double top1 = 0;
    double top5 = 0;
    std::size_t n_samples = 0;
    int num_classes = 0;
    int positive_class = 1;
    std::uint64_t seed = 0;

    bool operator==(const MetricsReport&) const = default;
};

// Rows that are already probability vectors pass through; anything else is
// treated as logits and softmax-normalized.
template <typename Scalar>
RowMatrix<Scalar> normalize_scores(const RowMatrix<Scalar>& scores) {
    RowMatrix<Scalar> out = scores;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        const bool is_prob = (scores.row(i).array() >= 0).all() &&
                             std::abs(static_cast<double>(scores.row(i).sum()) - 1.0) <= 1e-6;
        if (is_prob) continue;
        const Scalar m = scores.row(i).maxCoeff();
        out.row(i) = (scores.row(i).array() - m).exp().matrix();
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

// Probability that a random positive outranks a random negative; ties count 1/2.
// Computed from mid-ranks in O(n log n).
inline std::optional<double> rank_auc(std::span<const double> scores, const std::vector<bool>& positive) {
    if (scores.size() != positive.size()) throw ConfigError("rank_auc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (bool p : positive) n_pos += p;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double mid_rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            if (positive[order[k]]) rank_sum += mid_rank;
        i = j + 1;
    }
    const double np = static_cast<double>(n_pos);
    return (rank_sum - np * (np + 1) / 2) / (np * static_cast<double>(n_neg));
}

template <typename Scalar>
MetricsReport compute_metrics(const RowMatrix<Scalar>& raw_scores, std::span<const int> labels, int positive_class = 1,
                              std::uint64_t seed = 0) {
    if (static_cast<std::size_t>(raw_scores.rows()) != labels.size())
        throw ConfigError("compute_metrics: scores and labels differ in length");
    if (labels.empty()) throw DataError("compute_metrics: no samples");
    const int K = static_cast<int>(raw_scores.cols());
    if (K < 2) throw ConfigError("compute_metrics: need at least 2 score columns");
    if (positive_class < 0 || positive_class >= K) throw ConfigError("compute_metrics: positive class out of range");

    const RowMatrix<Scalar> p = normalize_scores(raw_scores);
    MetricsReport r;
    r.n_samples = labels.size();
    r.num_classes = K;
    r.positive_class = positive_class;
    r.seed = seed;

    std::size_t correct = 0, top5 = 0, tp = 0, fp = 0, fn = 0;
    std::vector<double> pos_scores;
    std::vector<bool> is_pos;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto row = p.row(static_cast<Eigen::Index>(i));
        const int y = labels[i];
        if (y < 0 || y >= K) throw DataError("compute_metrics: label " + std::to_string(y) + " out of range");
        Eigen::Index arg = 0;
        row.maxCoeff(&arg);
        correct += arg == y;
        int better = 0;
        for (int k = 0; k < K; ++k) better += row(k) > row(y);
        top5 += better < 5;

        const bool pred_pos = K == 2 ? static_cast<double>(row(positive_class)) >= 0.5 : arg == positive_class;
        const bool actual_pos = y == positive_class;
        tp += pred_pos && actual_pos;
        fp += pred_pos && !actual_pos;
        fn += !pred_pos && actual_pos;
        pos_scores.push_back(static_cast<double>(row(positive_class)));
        is_pos.push_back(actual_pos);
    }
    const double n = static_cast<double>(labels.size());
    r.accuracy = r.top1 = static_cast<double>(correct) / n;
    r.top5 = static_cast<double>(top5) / n;
    r.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    r.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    if (K == 2) r.roc_auc = rank_auc(pos_scores, is_pos);
    return r;
}

struct RocPoint {
    double fpr = 0;
    double tpr = 0;
    bool operator==(const RocPoint&) const = default;
};

// Staircase from (0,0) to (1,1), one vertex per distinct score threshold.
// Tied scores move diagonally, which gives them half credit in the area.
inline std::optional<std::vector<RocPoint>> roc_curve(std::span<const double> scores, const std::vector<bool>& positive) {
    if (scores.size() != positive.size()) throw ConfigError("roc_curve: scores and labels differ in length");
    std::size_t n_pos = 0;
    for (bool p : positive) n_pos += p;
    const std::size_t n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<RocPoint> pts{{0.0, 0.0}};
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            positive[order[j]] ? ++tp : ++fp;
            ++j;
        }
        pts.push_back({static_cast<double>(fp) / static_cast<double>(n_neg), static_cast<double>(tp) / static_cast<double>(n_pos)});
        i = j;
    }
    return pts;
}

inline double trapezoid_area(std::span<const RocPoint> pts) {
    double a = 0;
    for (std::size_t i = 1; i < pts.size(); ++i) a += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) / 2;
    return a;
}

struct FiveNumberSummary {
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
    std::size_t n = 0;
};

// Linear interpolation between closest ranks (the common "type 7" definition).
inline double percentile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw DataError("percentile of an empty set");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct PredictionDistribution {
    std::map<int, FiveNumberSummary> groups;
    std::vector<std::string> notes;  // e.g. requested groups with no samples
};

inline PredictionDistribution prediction_distribution(std::span<const double> scores, std::span<const int> groups,
                                                      std::span<const int> expected_groups = {}) {
    if (scores.size() != groups.size()) throw ConfigError("prediction_distribution: length mismatch");
    std::map<int, std::vector<double>> by_group;
    for (std::size_t i = 0; i < scores.size(); ++i) by_group[groups[i]].push_back(scores[i]);
    PredictionDistribution out;
    for (int g : expected_groups)
        if (!by_group.count(g)) out.notes.push_back("group " + std::to_string(g) + " has no samples; omitted");
    for (auto& [g, v] : by_group) {
        std::sort(v.begin(), v.end());
        out.groups[g] = {v.front(), percentile_sorted(v, 0.25), percentile_sorted(v, 0.5), percentile_sorted(v, 0.75),
                         v.back(), v.size()};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepRow {
    double value = 0;
    std::uint64_t seed = 0;
    double accuracy = 0;
};

struct SweepSummaryRow {
    double value = 0;
    double mean = 0;
    double sd = 0;  // sample standard deviation; 0 for a single seed
    std::size_t n = 0;
};

struct SweepTable {
    std::string axis;
    std::vector<SweepRow> rows;  // |grid| x |seeds|, grid-major
    std::vector<SweepSummaryRow> summary;
    std::size_t argmax = 0;      // index into summary
};

using SweepRunner = std::function<double(double value, std::uint64_t seed)>;

namespace detail {

[[noreturn]] inline void rethrow_annotated(std::exception_ptr e, const std::string& where) {
    try {
        std::rethrow_exception(e);
    } catch (const ConfigError& ex) {
        throw ConfigError(where + ": " + ex.what());
    } catch (const DataError& ex) {
        throw DataError(where + ": " + ex.what());
    } catch (const NumericError& ex) {
        throw NumericError(where + " / " + ex.where(), ex.what());
    } catch (const std::exception& ex) {
        throw Error(where + ": " + ex.what());
    }
}

}  // namespace detail

// Runs one job per (grid value, seed). Jobs may run on up to `jobs` threads;
// results are stored by position so the table does not depend on scheduling.
inline SweepTable threshold_sweep(const std::string& axis, std::span<const double> grid,
                                  std::span<const std::uint64_t> seeds, const SweepRunner& run, int jobs = 1) {
    if (grid.empty()) throw ConfigError("sweep grid is empty");
    if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
    SweepTable t;
    t.axis = axis;
    const std::size_t total = grid.size() * seeds.size();
    t.rows.resize(total);
    std::vector<std::exception_ptr> errors(total);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < total; i = next++) {
            const double v = grid[i / seeds.size()];
            const std::uint64_t s = seeds[i % seeds.size()];
            try {
                t.rows[i] = {v, s, run(v, s)};
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(total)));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (std::size_t i = 0; i < total; ++i)
        if (errors[i])
            detail::rethrow_annotated(errors[i], axis + "=" + std::to_string(grid[i / seeds.size()]) + " seed=" +
                                                     std::to_string(seeds[i % seeds.size()]));

    for (std::size_t g = 0; g < grid.size(); ++g) {
        SweepSummaryRow s;
        s.value = grid[g];
        s.n = seeds.size();
        for (std::size_t k = 0; k < seeds.size(); ++k) s.mean += t.rows[g * seeds.size() + k].accuracy;
        s.mean /= static_cast<double>(s.n);
        if (s.n > 1) {
            double ss = 0;
            for (std::size_t k = 0; k < seeds.size(); ++k) ss += std::pow(t.rows[g * seeds.size() + k].accuracy - s.mean, 2);
            s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
        }
        t.summary.push_back(s);
        if (s.mean > t.summary[t.argmax].mean) t.argmax = g;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Report writers
// ---------------------------------------------------------------------------

inline std::ofstream open_report(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(17);
    return out;
}

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["accuracy"] = r.accuracy;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f1"] = r.f1;
    j["roc_auc"] = r.roc_auc ? nlohmann::json(*r.roc_auc) : nlohmann::json("undefined");
    j["top1"] = r.top1;
    j["top5"] = r.top5;
    j["n_samples"] = r.n_samples;
    j["num_classes"] = r.num_classes;
    j["positive_class"] = r.positive_class;
    j["seed"] = r.seed;
    return j;
}

inline void write_roc_csv(const std::filesystem::path& path, std::span<const RocPoint> pts) {
    auto out = open_report(path);
    out << "fpr,tpr\n";
    for (const auto& p : pts) out << p.fpr << "," << p.tpr << "\n";
}

inline void write_distribution_csv(const std::filesystem::path& path, const PredictionDistribution& d) {
    auto out = open_report(path);
    out << "group,n,min,q1,median,q3,max\n";
    for (const auto& [g, s] : d.groups)
        out << g << "," << s.n << "," << s.min << "," << s.q1 << "," << s.median << "," << s.q3 << "," << s.max << "\n";
}

inline void write_sweep_csv(const std::filesystem::path& path, const SweepTable& t) {
    auto out = open_report(path);
    out << t.axis << ",seed,accuracy\n";
    for (const auto& r : t.rows) out << r.value << "," << r.seed << "," << r.accuracy << "\n";
}

inline void write_sweep_summary_csv(const std::filesystem::path& path, const SweepTable& t) {
    auto out = open_report(path);
    out << t.axis << ",n,mean_accuracy,sd_accuracy,is_best\n";
    for (std::size_t i = 0; i < t.summary.size(); ++i) {
        const auto& s = t.summary[i];
        out << s.value << "," << s.n << "," << s.mean << "," << s.sd << "," << (i == t.argmax ? 1 : 0) << "\n";
    }
}

}  // namespace protoalign
