#pragma once

// Accuracy-matrix metrics: average accuracy, forgetting, the AF upper bound,
// and order-performance disparity across learning orders.

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace cglbench {

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Lower-triangular a_{k,j}, 1-based: k = tasks trained, j = task evaluated.
class AccuracyMatrix {
public:
    AccuracyMatrix() = default;
    explicit AccuracyMatrix(std::size_t tasks) : rows_(tasks) {
        for (std::size_t k = 0; k < tasks; ++k) rows_[k].assign(k + 1, 0.0);
    }

    static AccuracyMatrix from_rows(std::vector<std::vector<double>> rows) {
        AccuracyMatrix m;
        for (std::size_t k = 0; k < rows.size(); ++k) {
            if (rows[k].size() != k + 1) {
                throw MetricError("row " + std::to_string(k + 1) + " has " + std::to_string(rows[k].size()) +
                                  " entries, expected " + std::to_string(k + 1));
            }
            for (double v : rows[k]) {
                if (!(v >= 0.0 && v <= 1.0)) throw MetricError("accuracy outside [0, 1]");
            }
        }
        m.rows_ = std::move(rows);
        return m;
    }

    [[nodiscard]] std::size_t tasks() const noexcept { return rows_.size(); }
    [[nodiscard]] double at(std::size_t k, std::size_t j) const {
        check(k, j);
        return rows_[k - 1][j - 1];
    }
    void set(std::size_t k, std::size_t j, double value) {
        check(k, j);
        if (!(value >= 0.0 && value <= 1.0)) throw MetricError("accuracy outside [0, 1]");
        rows_[k - 1][j - 1] = value;
    }
    [[nodiscard]] const std::vector<std::vector<double>>& rows() const noexcept { return rows_; }

private:
    void check(std::size_t k, std::size_t j) const {
        if (k < 1 || k > rows_.size() || j < 1 || j > k) {
            throw MetricError("entry (" + std::to_string(k) + ", " + std::to_string(j) + ") outside the " +
                              std::to_string(rows_.size()) + "-task lower triangle");
        }
    }
    std::vector<std::vector<double>> rows_;
};

[[nodiscard]] inline double average_accuracy(const AccuracyMatrix& m, std::size_t k) {
    if (k < 1 || k > m.tasks()) throw MetricError("AA: k out of range");
    double total = 0.0;
    for (std::size_t j = 1; j <= k; ++j) total += m.at(k, j);
    return total / static_cast<double>(k);
}

/// f_j^k = max_{l<k} a_{l,j} - a_{k,j}.
[[nodiscard]] inline double forgetting(const AccuracyMatrix& m, std::size_t j, std::size_t k) {
    if (k > m.tasks() || j < 1 || j >= k) throw MetricError("forgetting needs 1 <= j < k <= B");
    double best = m.at(j, j);
    for (std::size_t l = j + 1; l < k; ++l) best = std::max(best, m.at(l, j));
    return best - m.at(k, j);
}

[[nodiscard]] inline double average_forgetting(const AccuracyMatrix& m, std::size_t k) {
    if (k < 2) throw MetricError("AF is undefined for k < 2");
    if (k > m.tasks()) throw MetricError("AF: k out of range");
    double total = 0.0;
    for (std::size_t j = 1; j < k; ++j) total += forgetting(m, j, k);
    return total / static_cast<double>(k - 1);
}

/// 1 - k/(k-1) AA_k + a_kk/(k-1).
[[nodiscard]] inline double af_upper_bound(double aa_k, double a_kk, std::size_t k) {
    if (k < 2) throw MetricError("AF bound needs k >= 2");
    const double kd = static_cast<double>(k);
    return 1.0 - kd / (kd - 1.0) * aa_k + a_kk / (kd - 1.0);
}

// ---------------------------------------------------------------------------
// Order-performance disparity

enum class UnitKind { task, klass };

inline std::string to_string(UnitKind u) { return u == UnitKind::task ? "task" : "class"; }

/// Final accuracies per unit for each learning order.
struct OrderCampaignRecord {
    UnitKind unit = UnitKind::task;
    std::vector<std::string> order_ids;
    /// One map per order: unit id -> final accuracy.
    std::vector<std::map<int, double>> finals;

    [[nodiscard]] std::size_t orders() const noexcept { return finals.size(); }

    void add(std::string order_id, std::map<int, double> accuracies) {
        if (!finals.empty()) {
            if (accuracies.size() != finals.front().size() ||
                !std::equal(accuracies.begin(), accuracies.end(), finals.front().begin(),
                            [](const auto& a, const auto& b) { return a.first == b.first; })) {
                throw MetricError("order '" + order_id + "' reports a different set of " + to_string(unit) + "s");
            }
        }
        order_ids.push_back(std::move(order_id));
        finals.push_back(std::move(accuracies));
    }

    [[nodiscard]] std::vector<int> units() const {
        std::vector<int> out;
        if (!finals.empty()) {
            for (const auto& [u, _] : finals.front()) out.push_back(u);
        }
        return out;
    }
};

[[nodiscard]] inline double opd(const OrderCampaignRecord& rec, int unit) {
    if (rec.orders() < 2) throw MetricError("OPD needs at least two orders");
    double lo = 1.0;
    double hi = 0.0;
    for (const auto& f : rec.finals) {
        const auto it = f.find(unit);
        if (it == f.end()) throw MetricError("unit " + std::to_string(unit) + " missing from an order");
        lo = std::min(lo, it->second);
        hi = std::max(hi, it->second);
    }
    return hi - lo;
}

[[nodiscard]] inline double mopd(const OrderCampaignRecord& rec) {
    double best = 0.0;
    for (int u : rec.units()) best = std::max(best, opd(rec, u));
    if (rec.units().empty()) throw MetricError("campaign has no units");
    return best;
}

[[nodiscard]] inline double aopd(const OrderCampaignRecord& rec) {
    const auto us = rec.units();
    if (us.empty()) throw MetricError("campaign has no units");
    double total = 0.0;
    for (int u : us) total += opd(rec, u);
    return total / static_cast<double>(us.size());
}

/// Class-level union of a task-order and a class-order campaign.
[[nodiscard]] inline OrderCampaignRecord aggregate_task_and_class_campaigns(const OrderCampaignRecord& task_campaign,
                                                                            const OrderCampaignRecord& class_campaign) {
    if (task_campaign.unit != UnitKind::klass || class_campaign.unit != UnitKind::klass) {
        throw MetricError("aggregation needs class-level records from both campaigns");
    }
    if (task_campaign.units() != class_campaign.units()) throw MetricError("campaigns cover different class sets");
    OrderCampaignRecord out;
    out.unit = UnitKind::klass;
    for (std::size_t r = 0; r < task_campaign.orders(); ++r) {
        out.add(task_campaign.order_ids[r], task_campaign.finals[r]);
    }
    for (std::size_t r = 0; r < class_campaign.orders(); ++r) {
        out.add(class_campaign.order_ids[r], class_campaign.finals[r]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports and plot data

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// Mean and sample standard deviation (0 for a single value).
[[nodiscard]] inline MeanStd mean_std(const std::vector<double>& values) {
    if (values.empty()) throw MetricError("mean of an empty list");
    MeanStd out;
    for (double v : values) out.mean += v;
    out.mean /= static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - out.mean) * (v - out.mean);
        out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return out;
}

struct ScatterPoint {
    std::string method;
    double aa = 0.0;
    double af = 0.0;
};

/// Bound line with a_kk = 1 at AA in [1/k, 1].
[[nodiscard]] inline std::vector<std::pair<double, double>> bound_line(std::size_t k, std::size_t samples = 21) {
    if (samples < 2) throw MetricError("bound line needs at least two samples");
    std::vector<std::pair<double, double>> out;
    const double lo = 1.0 / static_cast<double>(k);
    for (std::size_t i = 0; i < samples; ++i) {
        const double aa = lo + (1.0 - lo) * static_cast<double>(i) / static_cast<double>(samples - 1);
        out.emplace_back(aa, af_upper_bound(aa, 1.0, k));
    }
    return out;
}

/// CSV `series,x,y`. Bound samples are only written when there are points.
inline void emit_scatter(std::ostream& out, const std::vector<ScatterPoint>& points, std::size_t k) {
    out << "series,x,y\n";
    if (points.empty()) return;
    out.precision(17);
    for (const auto& p : points) out << p.method << ',' << p.aa << ',' << p.af << '\n';
    for (const auto& [x, y] : bound_line(k)) out << "af_bound," << x << ',' << y << '\n';
}

}  // namespace cglbench
