#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <boost/rational.hpp>

#include "stein_delta/errors.hpp"

namespace stein_delta {

using ExactInt = boost::multiprecision::cpp_int;
using Rational = boost::rational<long long>;

// ---------------------------------------------------------------------------
// Stirling numbers of the second kind

inline constexpr int kStirlingMax = 30;

namespace detail {
inline const std::vector<std::vector<ExactInt>>& stirling_table() {
    static const auto table = [] {
        std::vector<std::vector<ExactInt>> s(kStirlingMax + 1,
                                             std::vector<ExactInt>(kStirlingMax + 1, 0));
        s[0][0] = 1;
        for (int n = 1; n <= kStirlingMax; ++n)
            for (int k = 1; k <= n; ++k) s[n][k] = k * s[n - 1][k] + s[n - 1][k - 1];
        return s;
    }();
    return table;
}
}  // namespace detail

// {n brace k} by the triangular recurrence.
inline ExactInt stirling2(int n, int k) {
    if (n < 0 || k < 0) throw DomainError("stirling2: negative argument");
    if (n > kStirlingMax || k > kStirlingMax)
        throw RangeError("stirling2: arguments above " + std::to_string(kStirlingMax));
    return detail::stirling_table()[n][k];
}

// {n brace k} = (1/k!) sum_j (-1)^j C(k,j) (k-j)^n, evaluated in big integers.
inline ExactInt stirling2_alternating(int n, int k) {
    if (n < 0 || k < 0) throw DomainError("stirling2_alternating: negative argument");
    if (n > kStirlingMax || k > kStirlingMax)
        throw RangeError("stirling2_alternating: arguments above " + std::to_string(kStirlingMax));
    ExactInt sum = 0;
    ExactInt binom = 1;
    for (int j = 0; j <= k; ++j) {
        ExactInt power = boost::multiprecision::pow(ExactInt(k - j), static_cast<unsigned>(n));
        if (j % 2 == 0)
            sum += binom * power;
        else
            sum -= binom * power;
        binom = binom * (k - j) / (j + 1);
    }
    ExactInt fact = 1;
    for (int i = 2; i <= k; ++i) fact *= i;
    return sum / fact;
}

inline double stirling2_value(int n, int k) { return stirling2(n, k).convert_to<double>(); }

// ---------------------------------------------------------------------------
// Normal absolute moments

// E|Z|^r for Z ~ N(0, sigma^2).
inline double abs_normal_moment(double r, double sigma) {
    if (!(r >= 0.0) || !(sigma >= 0.0)) throw DomainError("abs_normal_moment: negative input");
    if (r == 0.0) return 1.0;
    if (sigma == 0.0) return 0.0;
    return std::pow(2.0, r / 2.0) * std::pow(sigma, r) * std::tgamma((r + 1.0) / 2.0) /
           std::sqrt(M_PI);
}

// ---------------------------------------------------------------------------
// Derivative budgets

class TestBudget {
public:
    TestBudget() = default;
    explicit TestBudget(std::vector<double> sup_norms) : norms_(std::move(sup_norms)) {
        if (norms_.empty() || norms_.size() > 6)
            throw ArgumentError("TestBudget: order must lie in [1, 6]");
        for (double v : norms_)
            if (!(v >= 0.0)) throw ArgumentError("TestBudget: sup-norms must be non-negative");
    }
    static TestBudget unit(int order) { return TestBudget(std::vector<double>(order, 1.0)); }

    int order() const { return static_cast<int>(norms_.size()); }
    // |h|_k, 1-based.
    double norm(int k) const {
        if (k < 1 || k > order()) throw ArgumentError("TestBudget: order out of range");
        return norms_[k - 1];
    }
    const std::vector<double>& sup_norms() const { return norms_; }

private:
    std::vector<double> norms_;
};

// h_{p,m} = sum_{k=1}^p m^k {p brace k} |h|_k, with p defaulting to the budget order.
inline double h_budget(const TestBudget& budget, int m, int p = -1) {
    if (m < 1) throw ArgumentError("h_budget: m must be >= 1");
    if (p < 0) p = budget.order();
    if (p < 1 || p > budget.order()) throw ArgumentError("h_budget: order exceeds budget");
    double total = 0.0;
    for (int k = 1; k <= p; ++k)
        total += std::pow(static_cast<double>(m), k) * stirling2_value(p, k) * budget.norm(k);
    return total;
}

// Composite bound: every order-n mixed partial of h o g is at most h_{n,m} P(w).
inline double composite_derivative_bound(const TestBudget& budget, int m, double p_value) {
    if (!(p_value >= 0.0)) throw DomainError("composite_derivative_bound: P value must be >= 0");
    if (p_value == 0.0) return 0.0;
    return h_budget(budget, m) * p_value;
}

// max(d / n^{r/2}, 1)
inline double a_factor(long long n, int d, double r) {
    if (n < 1 || d < 1) throw ArgumentError("a_factor: n and d must be >= 1");
    return std::max(static_cast<double>(d) / std::pow(static_cast<double>(n), r / 2.0), 1.0);
}

// ---------------------------------------------------------------------------
// Multi-indices and the generalised Faa di Bruno expansion

struct MultiIndex {
    std::vector<int> entries;

    MultiIndex() = default;
    explicit MultiIndex(std::vector<int> e) : entries(std::move(e)) {
        for (int v : entries)
            if (v < 0) throw DomainError("MultiIndex: negative entry");
    }
    static MultiIndex zeros(int dim) { return MultiIndex(std::vector<int>(dim, 0)); }

    int size() const { return static_cast<int>(entries.size()); }
    int abs() const { return std::accumulate(entries.begin(), entries.end(), 0); }
    bool is_zero() const { return abs() == 0; }
    int operator[](int i) const { return entries[i]; }

    // Product of component factorials.
    long long factorial() const {
        long long f = 1;
        for (int v : entries)
            for (int i = 2; i <= v; ++i) f *= i;
        return f;
    }
    bool leq(const MultiIndex& o) const {
        for (int i = 0; i < size(); ++i)
            if (entries[i] > o.entries[i]) return false;
        return true;
    }
    bool operator==(const MultiIndex& o) const { return entries == o.entries; }
};

// Strict total order: total degree first, then lexicographic on components.
inline bool precedes(const MultiIndex& a, const MultiIndex& b) {
    if (a.size() != b.size()) throw ArgumentError("precedes: dimension mismatch");
    const int sa = a.abs(), sb = b.abs();
    if (sa != sb) return sa < sb;
    return std::lexicographical_compare(a.entries.begin(), a.entries.end(), b.entries.begin(),
                                        b.entries.end());
}

struct PartitionTerm {
    std::vector<MultiIndex> k_vectors;  // m-dimensional, each of positive degree
    std::vector<MultiIndex> l_vectors;  // d-dimensional, strictly increasing under precedes
    int s() const { return static_cast<int>(k_vectors.size()); }
};

// All multi-indices of the given dimension with total degree `total`.
inline std::vector<MultiIndex> multi_indices_of_degree(int dim, int total) {
    std::vector<MultiIndex> out;
    std::vector<int> cur(dim, 0);
    auto rec = [&](auto&& self, int pos, int left) -> void {
        if (pos == dim - 1) {
            cur[pos] = left;
            out.emplace_back(cur);
            return;
        }
        for (int v = left; v >= 0; --v) {
            cur[pos] = v;
            self(self, pos + 1, left - v);
        }
    };
    if (dim <= 0) return out;
    rec(rec, 0, total);
    return out;
}

// Every element of the union over s of p_s(nu, lambda).
inline std::vector<PartitionTerm> faa_di_bruno_enumerate(const MultiIndex& nu,
                                                         const MultiIndex& lambda) {
    const int d = nu.size(), m = lambda.size();
    if (nu.abs() > 5 || d > 4 || m > 4 || d < 1 || m < 1)
        throw RangeError("faa_di_bruno_enumerate: requires |nu| <= 5 and d, m in [1, 4]");

    // Candidate l vectors: nonzero, componentwise <= nu, sorted by precedes.
    std::vector<MultiIndex> candidates;
    for (int deg = 1; deg <= nu.abs(); ++deg)
        for (auto& l : multi_indices_of_degree(d, deg))
            if (l.leq(nu)) candidates.push_back(l);
    std::sort(candidates.begin(), candidates.end(), precedes);

    std::vector<PartitionTerm> out;
    PartitionTerm current;
    std::vector<int> nu_rem = nu.entries, lambda_rem = lambda.entries;

    auto rec = [&](auto&& self, std::size_t c) -> void {
        const bool nu_done = std::all_of(nu_rem.begin(), nu_rem.end(), [](int v) { return v == 0; });
        if (nu_done) {
            if (current.s() > 0 &&
                std::all_of(lambda_rem.begin(), lambda_rem.end(), [](int v) { return v == 0; }))
                out.push_back(current);
            return;
        }
        if (c == candidates.size()) return;
        self(self, c + 1);  // candidate unused
        const MultiIndex& l = candidates[c];
        for (int q = 1;; ++q) {
            bool fits = true;
            for (int i = 0; i < d; ++i)
                if (q * l[i] > nu_rem[i]) fits = false;
            if (!fits) break;
            for (auto& k : multi_indices_of_degree(m, q)) {
                bool k_fits = true;
                for (int a = 0; a < m; ++a)
                    if (k[a] > lambda_rem[a]) k_fits = false;
                if (!k_fits) continue;
                for (int i = 0; i < d; ++i) nu_rem[i] -= q * l[i];
                for (int a = 0; a < m; ++a) lambda_rem[a] -= k[a];
                current.k_vectors.push_back(k);
                current.l_vectors.push_back(l);
                self(self, c + 1);
                current.k_vectors.pop_back();
                current.l_vectors.pop_back();
                for (int i = 0; i < d; ++i) nu_rem[i] += q * l[i];
                for (int a = 0; a < m; ++a) lambda_rem[a] += k[a];
            }
        }
    };
    rec(rec, 0);
    return out;
}

// Combinatorial weight nu! prod_j 1 / (k_j! (l_j!)^{|k_j|}) of one term.
inline Rational faa_di_bruno_weight(const MultiIndex& nu, const PartitionTerm& term) {
    Rational w(nu.factorial());
    for (int j = 0; j < term.s(); ++j) {
        long long denom = term.k_vectors[j].factorial();
        const long long lf = term.l_vectors[j].factorial();
        for (int q = 0; q < term.k_vectors[j].abs(); ++q) denom *= lf;
        w /= denom;
    }
    return w;
}

}  // namespace stein_delta
