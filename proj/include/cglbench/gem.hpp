#pragma once

// Gradient projection against episodic-memory gradients.
//
// The dual problem
//     min_v  1/2 v^T (M M^T + eps I) v + (M g)^T v   s.t.  v >= margin
// is rewritten with u = v - margin as a nonnegative least-squares problem
//     min_{u >= 0} 1/2 || M^T u + g + margin M^T 1 ||^2 + eps/2 || u + margin ||^2
// and solved with the Lawson-Hanson active-set method. The projected
// gradient is M^T v + g.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cglbench {

class GemError : public std::runtime_error {
public:
    GemError(const std::string& message, double residual)
        : std::runtime_error(message + " (residual " + std::to_string(residual) + ")"), residual_(residual) {}
    [[nodiscard]] double residual() const noexcept { return residual_; }

private:
    double residual_;
};

struct NnlsResult {
    Eigen::VectorXd x;
    std::size_t iterations = 0;
};

/// Lawson-Hanson NNLS: argmin ||A x - b|| subject to x >= 0.
inline NnlsResult nnls(const Eigen::MatrixXd& a, const Eigen::VectorXd& b, std::size_t max_iterations = 0) {
    const auto n = a.cols();
    if (max_iterations == 0) max_iterations = 3 * static_cast<std::size_t>(n) + 30;
    const double scale = std::max(1.0, a.norm() * std::max(1.0, b.norm()));
    const double tol = 1e-13 * scale;

    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    std::vector<bool> passive(static_cast<std::size_t>(n), false);
    Eigen::VectorXd w = a.transpose() * (b - a * x);

    auto solve_passive = [&]() {
        std::vector<Eigen::Index> cols;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (passive[static_cast<std::size_t>(j)]) cols.push_back(j);
        }
        Eigen::MatrixXd sub(a.rows(), static_cast<Eigen::Index>(cols.size()));
        for (std::size_t k = 0; k < cols.size(); ++k) sub.col(static_cast<Eigen::Index>(k)) = a.col(cols[k]);
        Eigen::VectorXd zs = sub.completeOrthogonalDecomposition().solve(b);
        Eigen::VectorXd z = Eigen::VectorXd::Zero(n);
        for (std::size_t k = 0; k < cols.size(); ++k) z[cols[k]] = zs[static_cast<Eigen::Index>(k)];
        return z;
    };

    std::size_t iterations = 0;
    while (true) {
        Eigen::Index best = -1;
        double best_w = tol;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (!passive[static_cast<std::size_t>(j)] && w[j] > best_w) {
                best_w = w[j];
                best = j;
            }
        }
        if (best < 0) break;
        if (++iterations > max_iterations) {
            throw GemError("gradient projection QP did not converge within " + std::to_string(max_iterations) +
                               " iterations",
                           best_w);
        }
        passive[static_cast<std::size_t>(best)] = true;
        Eigen::VectorXd z = solve_passive();
        while (true) {
            bool feasible = true;
            for (Eigen::Index j = 0; j < n; ++j) {
                if (passive[static_cast<std::size_t>(j)] && z[j] <= 0.0) feasible = false;
            }
            if (feasible) break;
            double alpha = std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < n; ++j) {
                if (passive[static_cast<std::size_t>(j)] && z[j] <= 0.0) {
                    alpha = std::min(alpha, x[j] / (x[j] - z[j]));
                }
            }
            x += alpha * (z - x);
            for (Eigen::Index j = 0; j < n; ++j) {
                if (passive[static_cast<std::size_t>(j)] && x[j] <= tol) {
                    passive[static_cast<std::size_t>(j)] = false;
                    x[j] = 0.0;
                }
            }
            z = solve_passive();
        }
        x = z;
        w = a.transpose() * (b - a * x);
    }
    return {x, iterations};
}

/// Returns g unchanged (bit-exact) when no memory gradient has a negative
/// dot product with it; otherwise the dual-QP projection.
/// `memories` holds one gradient per row, each of g.size() entries.
inline std::vector<double> gem_project(std::span<const double> g, const std::vector<std::vector<double>>& memories,
                                       double margin = 0.0, double epsilon = 0.0) {
    const auto dim = static_cast<Eigen::Index>(g.size());
    const auto t = static_cast<Eigen::Index>(memories.size());
    std::vector<double> out(g.begin(), g.end());
    if (t == 0) return out;
    if (margin < 0.0 || epsilon < 0.0) throw GemError("margin and epsilon must be nonnegative", 0.0);

    Eigen::MatrixXd m(t, dim);
    for (Eigen::Index r = 0; r < t; ++r) {
        if (memories[static_cast<std::size_t>(r)].size() != g.size()) {
            throw GemError("memory gradient " + std::to_string(r) + " has wrong length", 0.0);
        }
        for (Eigen::Index c = 0; c < dim; ++c) m(r, c) = memories[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    }
    const Eigen::Map<const Eigen::VectorXd> gv(g.data(), dim);
    const Eigen::VectorXd dots = m * gv;
    if ((dots.array() >= 0.0).all()) return out;

    const Eigen::VectorXd offset = gv + margin * m.transpose() * Eigen::VectorXd::Ones(t);
    Eigen::MatrixXd a = m.transpose();
    Eigen::VectorXd b = -offset;
    if (epsilon > 0.0) {
        const double root = std::sqrt(epsilon);
        Eigen::MatrixXd aug(dim + t, t);
        aug << a, root * Eigen::MatrixXd::Identity(t, t);
        Eigen::VectorXd baug(dim + t);
        baug << b, Eigen::VectorXd::Constant(t, -root * margin);
        a = std::move(aug);
        b = std::move(baug);
    }
    const NnlsResult solved = nnls(a, b);
    const Eigen::VectorXd v = solved.x.array() + margin;
    const Eigen::VectorXd projected = m.transpose() * v + gv;
    for (Eigen::Index c = 0; c < dim; ++c) out[static_cast<std::size_t>(c)] = projected[c];
    return out;
}

}  // namespace cglbench
