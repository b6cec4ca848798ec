#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "culm/errors.hpp"
#include "culm/tensor.hpp"

namespace culm {

/// Minimum-cost assignment (Hungarian, shortest augmenting path, O(n^2 m)).
/// Returns the assigned column per row, -1 where a row stays unassigned
/// (only possible when rows outnumber columns). min(n, m) pairs are always
/// formed.
inline std::vector<std::int64_t> solve_assignment(const Tensor<double>& cost) {
    if (cost.ndim() != 2) throw ArgumentError("cost matrix must be 2-dimensional");
    const std::int64_t n = cost.dim(0), m = cost.dim(1);
    if (n > m) {
        Tensor<double> t({m, n});
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < m; ++j) t(j, i) = cost(i, j);
        const auto col_to_row = solve_assignment(t);
        std::vector<std::int64_t> out(static_cast<std::size_t>(n), -1);
        for (std::int64_t j = 0; j < m; ++j)
            out[static_cast<std::size_t>(col_to_row[static_cast<std::size_t>(j)])] = j;
        return out;
    }

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
    std::vector<std::int64_t> p(static_cast<std::size_t>(m) + 1, 0);
    std::vector<std::int64_t> way(static_cast<std::size_t>(m) + 1, 0);
    for (std::int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::int64_t j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const std::int64_t i0 = p[static_cast<std::size_t>(j0)];
            double delta = inf;
            std::int64_t j1 = 0;
            for (std::int64_t j = 1; j <= m; ++j)
                if (!used[static_cast<std::size_t>(j)]) {
                    const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                                       v[static_cast<std::size_t>(j)];
                    if (cur < minv[static_cast<std::size_t>(j)]) {
                        minv[static_cast<std::size_t>(j)] = cur;
                        way[static_cast<std::size_t>(j)] = j0;
                    }
                    if (minv[static_cast<std::size_t>(j)] < delta) {
                        delta = minv[static_cast<std::size_t>(j)];
                        j1 = j;
                    }
                }
            for (std::int64_t j = 0; j <= m; ++j)
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const std::int64_t j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<std::int64_t> out(static_cast<std::size_t>(n), -1);
    for (std::int64_t j = 1; j <= m; ++j)
        if (p[static_cast<std::size_t>(j)] != 0)
            out[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    return out;
}

struct GatedMatch {
    std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
    double total_cost = 0.0;
};

/// One-to-one matching over a distance matrix under a hard gate. The target
/// is lexicographic: first as many pairs as possible, then the smallest
/// total distance. Achieved by shifting allowed pair costs down by a bonus
/// larger than any attainable distance sum and letting rows fall back to
/// zero-cost dummy columns.
inline GatedMatch gated_matching(const Tensor<double>& dist, double gate) {
    if (dist.ndim() != 2) throw ArgumentError("distance matrix must be 2-dimensional");
    if (!(gate > 0.0)) throw ArgumentError("matching gate must be positive");
    const std::int64_t n = dist.dim(0), m = dist.dim(1);
    const double bonus = (static_cast<double>(std::min(n, m)) + 1.0) * (gate + 1.0);

    Tensor<double> cost({n, m + n});
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < m; ++j) {
            const double d = dist(i, j);
            cost(i, j) = (std::isfinite(d) && d <= gate) ? d - bonus : bonus + 1.0;
        }
        for (std::int64_t j = m; j < m + n; ++j) cost(i, j) = 0.0;
    }

    const auto assign = solve_assignment(cost);
    GatedMatch out;
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t j = assign[static_cast<std::size_t>(i)];
        if (j >= 0 && j < m && std::isfinite(dist(i, j)) && dist(i, j) <= gate) {
            out.pairs.emplace_back(i, j);
            out.total_cost += dist(i, j);
        }
    }
    return out;
}

} // namespace culm
