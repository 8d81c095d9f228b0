#include <gtest/gtest.h>

#include <sstream>

#include "cglbench/metrics.hpp"
#include "cglbench/random.hpp"
#include "oracles.hpp"

using namespace cglbench;

namespace {

AccuracyMatrix random_matrix(Rng& rng, std::size_t b) {
    std::vector<std::vector<double>> rows(b);
    for (std::size_t k = 0; k < b; ++k) {
        for (std::size_t j = 0; j <= k; ++j) rows[k].push_back(rng.uniform());
    }
    return AccuracyMatrix::from_rows(rows);
}

OrderCampaignRecord campaign(const std::vector<std::vector<double>>& finals, UnitKind unit = UnitKind::task) {
    OrderCampaignRecord rec;
    rec.unit = unit;
    for (std::size_t r = 0; r < finals.size(); ++r) {
        std::map<int, double> m;
        for (std::size_t u = 0; u < finals[r].size(); ++u) m[static_cast<int>(u)] = finals[r][u];
        rec.add("order" + std::to_string(r), m);
    }
    return rec;
}

}  // namespace

TEST(Matrix, LowerTriangleOnly) {
    AccuracyMatrix m(3);
    EXPECT_THROW(m.set(1, 2, 0.5), MetricError);
    EXPECT_THROW(m.set(2, 1, 1.5), MetricError);
    EXPECT_THROW((void)AccuracyMatrix::from_rows({{0.5, 0.5}}), MetricError);
}

TEST(AverageAccuracy, Examples) {
    auto m = AccuracyMatrix::from_rows({{0.9}, {0.4, 0.8}});
    EXPECT_DOUBLE_EQ(average_accuracy(m, 2), 0.6);
    auto ones = AccuracyMatrix::from_rows({{1}, {1, 1}, {1, 1, 1}});
    for (std::size_t k = 1; k <= 3; ++k) EXPECT_EQ(average_accuracy(ones, k), 1.0);
    EXPECT_THROW((void)average_accuracy(m, 3), MetricError);
    EXPECT_THROW((void)average_accuracy(m, 0), MetricError);
}

TEST(Forgetting, Examples) {
    auto m = AccuracyMatrix::from_rows({{0.9}, {0.3, 0.8}});
    EXPECT_NEAR(forgetting(m, 1, 2), 0.6, 1e-15);
    auto improving = AccuracyMatrix::from_rows({{0.2}, {0.5, 0.7}, {0.9, 0.7, 0.8}});
    EXPECT_LT(forgetting(improving, 1, 3), 0.0);
    EXPECT_THROW((void)average_forgetting(m, 1), MetricError);
    EXPECT_THROW((void)forgetting(m, 2, 2), MetricError);
}

TEST(Metrics, MatchBruteForceOracles) {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t b = 1 + rng.below(6);
        const auto m = random_matrix(rng, b);
        for (std::size_t k = 1; k <= b; ++k) {
            EXPECT_NEAR(average_accuracy(m, k), oracle::aa(m.rows(), k), 1e-12);
            if (k >= 2) {
                EXPECT_NEAR(average_forgetting(m, k), oracle::af(m.rows(), k), 1e-12);
                for (std::size_t j = 1; j < k; ++j) EXPECT_NEAR(forgetting(m, j, k), oracle::forgetting(m.rows(), j, k), 1e-12);
            }
        }
    }
}

TEST(Bound, Examples) {
    EXPECT_DOUBLE_EQ(af_upper_bound(0.5, 1.0, 2), 1.0);
    EXPECT_NEAR(af_upper_bound(1.0, 1.0, 4), 0.0, 1e-15);
    EXPECT_NEAR(af_upper_bound(0.8, 1.0, 5), 0.25, 1e-15);
    EXPECT_THROW((void)af_upper_bound(0.5, 1.0, 1), MetricError);
}

TEST(Bound, HoldsOnRandomMatrices) {
    Rng rng(99);
    for (int trial = 0; trial < 20000; ++trial) {
        const std::size_t b = 2 + rng.below(5);
        const auto m = random_matrix(rng, b);
        for (std::size_t k = 2; k <= b; ++k) {
            EXPECT_LE(average_forgetting(m, k), af_upper_bound(average_accuracy(m, k), m.at(k, k), k) + 1e-9);
        }
    }
}

TEST(Opd, Examples) {
    EXPECT_DOUBLE_EQ(opd(campaign({{1.0}, {0.0}}), 0), 1.0);
    EXPECT_DOUBLE_EQ(opd(campaign({{0.4}, {0.4}, {0.4}}), 0), 0.0);
    auto rec = campaign({{0.2, 0.5}, {0.5, 0.6}, {0.9, 0.55}});
    EXPECT_NEAR(opd(rec, 0), 0.7, 1e-15);
    EXPECT_NEAR(opd(rec, 1), 0.1, 1e-15);
    EXPECT_NEAR(aopd(rec), 0.4, 1e-15);
    EXPECT_NEAR(mopd(rec), 0.7, 1e-15);
    EXPECT_THROW((void)opd(campaign({{0.3}}), 0), MetricError);
}

TEST(Opd, MatchOracleAndOrdering) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t r = 2 + rng.below(10), u = 1 + rng.below(10);
        std::vector<std::vector<double>> finals(r, std::vector<double>(u));
        for (auto& row : finals) {
            for (auto& v : row) v = rng.uniform();
        }
        const auto rec = campaign(finals);
        double total = 0.0;
        for (std::size_t t = 0; t < u; ++t) {
            const double v = opd(rec, static_cast<int>(t));
            EXPECT_NEAR(v, oracle::opd(finals, t), 1e-12);
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
            total += v;
        }
        EXPECT_NEAR(aopd(rec), total / static_cast<double>(u), 1e-12);
        EXPECT_GE(mopd(rec), aopd(rec));
    }
}

TEST(Opd, InconsistentUnitsRejected) {
    OrderCampaignRecord rec;
    rec.add("a", {{0, 0.1}, {1, 0.2}});
    EXPECT_THROW(rec.add("b", {{0, 0.1}}), MetricError);
    EXPECT_THROW(rec.add("c", {{0, 0.1}, {2, 0.2}}), MetricError);
}

TEST(Aggregate, CountsAndMonotonicity) {
    Rng rng(8);
    std::vector<std::vector<double>> a(120, std::vector<double>(10)), b(100, std::vector<double>(10));
    for (auto* set : {&a, &b}) {
        for (auto& row : *set) {
            for (auto& v : row) v = rng.uniform();
        }
    }
    const auto ta = campaign(a, UnitKind::klass);
    const auto cb = campaign(b, UnitKind::klass);
    const auto all = aggregate_task_and_class_campaigns(ta, cb);
    EXPECT_EQ(all.orders(), 220u);
    for (int c = 0; c < 10; ++c) {
        EXPECT_GE(opd(all, c), opd(ta, c));
        EXPECT_GE(opd(all, c), opd(cb, c));
    }
    const auto self = aggregate_task_and_class_campaigns(ta, ta);
    for (int c = 0; c < 10; ++c) EXPECT_EQ(opd(self, c), opd(ta, c));
    EXPECT_THROW((void)aggregate_task_and_class_campaigns(campaign(a), cb), MetricError);
    EXPECT_THROW((void)aggregate_task_and_class_campaigns(ta, campaign({{0.1}, {0.2}}, UnitKind::klass)), MetricError);
}

TEST(Scatter, HeaderOnlyWhenEmpty) {
    std::ostringstream out;
    emit_scatter(out, {}, 5);
    EXPECT_EQ(out.str(), "series,x,y\n");
}

TEST(Scatter, BoundLineAndPoints) {
    std::ostringstream out;
    emit_scatter(out, {{"bare", 0.2, 0.9}, {"replay", 0.9, 0.05}}, 5);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "series,x,y");
    std::size_t points = 0, bound = 0;
    while (std::getline(in, line)) {
        const auto c1 = line.find(','), c2 = line.rfind(',');
        const std::string series = line.substr(0, c1);
        const double x = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
        const double y = std::stod(line.substr(c2 + 1));
        if (series == "af_bound") {
            ++bound;
            EXPECT_EQ(y, af_upper_bound(x, 1.0, 5));
        } else {
            ++points;
            EXPECT_LE(y, af_upper_bound(x, 1.0, 5) + 1e-9);
        }
    }
    EXPECT_EQ(points, 2u);
    EXPECT_GE(bound, 2u);
    const auto line5 = bound_line(5);
    EXPECT_DOUBLE_EQ(line5.front().first, 0.2);
    EXPECT_DOUBLE_EQ(line5.back().first, 1.0);
}

TEST(Stats, SampleStd) {
    const auto ms = mean_std({1, 2, 3, 4});
    EXPECT_DOUBLE_EQ(ms.mean, 2.5);
    EXPECT_NEAR(ms.std, std::sqrt(5.0 / 3.0), 1e-15);
    EXPECT_EQ(mean_std({0.7}).std, 0.0);
}

TEST(Purity, SameInputsBitIdentical) {
    Rng rng(3);
    const auto m = random_matrix(rng, 6);
    EXPECT_EQ(average_forgetting(m, 6), average_forgetting(m, 6));
    EXPECT_EQ(average_accuracy(m, 6), average_accuracy(m, 6));
}
