#pragma once

#include <cstddef>
#include <numeric>
#include <utility>
#include <vector>

namespace tpsido {

// Multi-indices (also used as derivation indices gamma).
using MultiIndex = std::vector<int>;

inline int order(const MultiIndex& a) { return std::accumulate(a.begin(), a.end(), 0); }

inline MultiIndex unit_index(int n, int j) {
    MultiIndex e(static_cast<std::size_t>(n), 0);
    e[static_cast<std::size_t>(j)] = 1;
    return e;
}

// All alpha with |alpha| = k, in lexicographic order.
inline std::vector<MultiIndex> multi_indices_of_order(int n, int k) {
    std::vector<MultiIndex> out;
    MultiIndex cur(static_cast<std::size_t>(n), 0);
    auto rec = [&](auto&& self, int pos, int left) -> void {
        if (pos == n - 1) {
            cur[static_cast<std::size_t>(pos)] = left;
            out.push_back(cur);
            return;
        }
        for (int v = 0; v <= left; ++v) {
            cur[static_cast<std::size_t>(pos)] = v;
            self(self, pos + 1, left - v);
        }
    };
    if (n > 0 && k >= 0) rec(rec, 0, k);
    return out;
}

// |alpha| ascending, lexicographic within each order.
inline std::vector<MultiIndex> multi_indices_up_to(int n, int k) {
    std::vector<MultiIndex> out;
    for (int q = 0; q <= k; ++q) {
        auto level = multi_indices_of_order(n, q);
        out.insert(out.end(), level.begin(), level.end());
    }
    return out;
}

inline double factorial(int k) {
    double r = 1.0;
    for (int i = 2; i <= k; ++i) r *= i;
    return r;
}

inline double factorial(const MultiIndex& a) {
    double r = 1.0;
    for (int v : a) r *= factorial(v);
    return r;
}

inline double binomial(int n, int k) {
    if (k < 0 || k > n) return 0.0;
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

inline double binomial(const MultiIndex& a, const MultiIndex& b) {
    double r = 1.0;
    for (std::size_t i = 0; i < a.size(); ++i) r *= binomial(a[i], b[i]);
    return r;
}

// All (beta, gamma) with beta + gamma = alpha, beta in lexicographic order.
inline std::vector<std::pair<MultiIndex, MultiIndex>> splits(const MultiIndex& alpha) {
    std::vector<std::pair<MultiIndex, MultiIndex>> out;
    MultiIndex beta(alpha.size(), 0);
    auto rec = [&](auto&& self, std::size_t pos) -> void {
        if (pos == alpha.size()) {
            MultiIndex gamma(alpha.size());
            for (std::size_t i = 0; i < alpha.size(); ++i) gamma[i] = alpha[i] - beta[i];
            out.emplace_back(beta, gamma);
            return;
        }
        for (int v = 0; v <= alpha[pos]; ++v) {
            beta[pos] = v;
            self(self, pos + 1);
        }
    };
    rec(rec, 0);
    return out;
}

}  // namespace tpsido
