#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "stein_delta/core_math.hpp"
#include "stein_delta/errors.hpp"
#include "stein_delta/moments.hpp"

namespace stein_delta {

// ---------------------------------------------------------------------------
// Envelopes

// Polynomial growth |d^k f| <= A_k (1 + sum |w_i|^{r_k}) for k = t, t+1, ...
// Orders beyond the stored pairs are treated as vanishing (A = 0, r = 0).
struct GrowthEnvelope {
    int t = 1;
    std::vector<double> A;  // A[0] is A_t
    std::vector<double> r;  // r[0] is r_t
    bool even = false;             // f(-x) = f(x)
    bool vanishing_third = false;  // all mixed third moments of the rows vanish

    double A_at(int k) const {
        const int i = k - t;
        return (i >= 0 && i < static_cast<int>(A.size())) ? A[i] : 0.0;
    }
    double r_at(int k) const {
        const int i = k - t;
        return (i >= 0 && i < static_cast<int>(r.size())) ? r[i] : 0.0;
    }
    void validate() const {
        if (t < 1) throw ArgumentError("GrowthEnvelope: t must be >= 1");
        if (A.empty() || A.size() != r.size())
            throw ArgumentError("GrowthEnvelope: A and r must be non-empty and of equal length");
        for (std::size_t i = 0; i < A.size(); ++i)
            if (!(A[i] >= 0.0) || !(r[i] >= 0.0)) throw ArgumentError("GrowthEnvelope: entries must be >= 0");
        if (!(A[0] > 0.0)) throw ArgumentError("GrowthEnvelope: A_t must be positive");
    }
};

// P(w) = A + B sum |w_i|^r for a map g of W.
struct FnEnvelope {
    double A = 0.0;
    double B = 0.0;
    double r = 0.0;
    bool even = false;  // g(-w) = g(w)

    void validate() const {
        if (!(A >= 0.0) || !(B >= 0.0) || !(r >= 0.0)) throw ArgumentError("FnEnvelope: entries must be >= 0");
    }
};

enum class BoundMode { General, Even, ZeroThird };

inline std::string mode_name(BoundMode m) {
    switch (m) {
        case BoundMode::General: return "general";
        case BoundMode::Even: return "even";
        case BoundMode::ZeroThird: return "zero-third";
    }
    return "?";
}

inline BoundMode parse_mode(const std::string& s) {
    if (s == "general") return BoundMode::General;
    if (s == "even") return BoundMode::Even;
    if (s == "zero-third") return BoundMode::ZeroThird;
    throw ArgumentError("unknown bound mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// Reports

struct BoundTerm {
    std::string name;
    double value = 0.0;
    double coefficient = 0.0;
};

struct Condition {
    std::string name;
    bool pass = true;
    std::string detail;
};

struct BoundReport {
    std::string theorem;
    bool valid = false;
    std::optional<double> value;
    double rate_exponent = -0.5;
    std::vector<BoundTerm> terms;
    std::vector<Condition> applicability;
    std::vector<std::string> missing;
    std::string rigor = "rigorous";
    std::int64_t n = 0;
    int d = 1, m = 1, t = 1;

    double reconstruct() const {
        double total = 0.0;
        for (const auto& term : terms) total += term.coefficient * term.value;
        return total;
    }
    double checked_value() const {
        if (!valid || !value) throw ArgumentError("BoundReport: report for " + theorem + " is invalid");
        return *value;
    }
    std::vector<std::string> failures() const {
        std::vector<std::string> out;
        for (const auto& c : applicability)
            if (!c.pass) out.push_back(c.name + (c.detail.empty() ? "" : " (" + c.detail + ")"));
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["theorem"] = theorem;
        j["valid"] = valid;
        j["value"] = value ? nlohmann::json(*value) : nlohmann::json(nullptr);
        j["rate"] = rate_exponent;
        j["rigor"] = rigor;
        j["n"] = n;
        j["d"] = d;
        j["m"] = m;
        j["t"] = t;
        nlohmann::json terms_json = nlohmann::json::object();
        for (const auto& term : terms) terms_json[term.name] = {{"value", term.value}, {"coefficient", term.coefficient}};
        j["terms"] = terms_json;
        nlohmann::json app = nlohmann::json::array();
        for (const auto& c : applicability) app.push_back({{"condition", c.name}, {"pass", c.pass}, {"detail", c.detail}});
        j["applicability"] = app;
        j["missing"] = missing;
        return j;
    }
    static std::string csv_header() { return "theorem,n,d,m,t,value,rate,rigor"; }
    std::string csv_row() const {
        std::ostringstream os;
        os.precision(17);
        os << theorem << ',' << n << ',' << d << ',' << m << ',' << t << ',';
        if (valid && value)
            os << *value;
        else
            os << "NA";
        os << ',' << rate_exponent << ',' << rigor;
        return os.str();
    }
};

// ---------------------------------------------------------------------------
// Constants

namespace detail {
inline double factorial(int k) {
    if (k < 0) throw ArgumentError("factorial of a negative integer");
    double f = 1.0;
    for (int i = 2; i <= k; ++i) f *= i;
    return f;
}
}  // namespace detail

struct TheoremConstants {
    double C = 0.0;
    double u = 0.0;
};

// Families: 1 general multivariate, 2 even multivariate, 3 zero-third multivariate,
// 4 even/zero-third univariate.
inline TheoremConstants theorem_constants(int family, int t, std::int64_t n, const GrowthEnvelope& env) {
    using detail::factorial;
    const double nd = static_cast<double>(n);
    auto A = [&](int k) { return env.A_at(k); };
    auto r = [&](int k) { return env.r_at(k); };
    if (t < 1) throw ArgumentError("theorem_constants: t must be >= 1");
    switch (family) {
        case 1: {
            if (t == 1)
                return {std::max({4.0 * std::pow(A(1), 3), M_SQRT2 * std::pow(A(2), 1.5) / std::sqrt(nd),
                                  A(3) / std::pow(nd, 5.0 / 6.0)}),
                        std::max({3.0 * r(1), 1.5 * r(2), r(3)})};
            if (t == 2)
                return {std::max({4.0 * std::pow(A(2), 3), M_SQRT2 * std::pow(A(2), 1.5), A(3) / std::sqrt(nd)}),
                        std::max(3.0 * (r(2) + 1.0), r(3))};
            const double At = A(t);
            return {std::max({4.0 * std::pow(At, 3) / std::pow(factorial(t - 1), 3),
                              M_SQRT2 * std::pow(At, 1.5) / std::pow(factorial(t - 2), 1.5), At / factorial(t - 3)}),
                    3.0 * (r(t) + t - 1.0)};
        }
        case 2: {
            if (t % 2 != 0) throw ArgumentError("theorem_constants: family 2 needs even t");
            if (t == 2)
                return {std::max({32.0 * std::pow(A(2), 6), 4.0 * std::pow(A(2), 3), 4.0 * A(3) * A(3) / nd,
                                  M_SQRT2 * std::pow(A(4), 1.5) / std::pow(nd, 1.5),
                                  std::pow(2.0, 0.2) * std::pow(A(5), 1.2) / std::pow(nd, 1.8), A(6) / (nd * nd)}),
                        std::max({6.0 * (r(2) + 1.0), 2.0 * r(3), 1.5 * r(4), 1.2 * r(5), r(6)})};
            if (t == 4)
                return {std::max({std::pow(A(4), 6) / 1458.0, std::pow(A(4), 3) / 2.0, 2.0 * A(4) * A(4),
                                  M_SQRT2 * std::pow(A(4), 1.5),
                                  std::pow(2.0, 0.2) * std::pow(A(5), 1.2) / std::pow(nd, 0.6), A(6) / nd}),
                        std::max({6.0 * (r(4) + 3.0), 1.2 * r(5), r(6)})};
            const double At = A(t);
            return {std::max({32.0 * std::pow(At, 6) / std::pow(factorial(t - 1), 6),
                              4.0 * std::pow(At, 3) / std::pow(factorial(t - 2), 3),
                              2.0 * At * At / std::pow(factorial(t - 3), 2),
                              M_SQRT2 * std::pow(At, 1.5) / std::pow(factorial(t - 4), 1.5),
                              std::pow(2.0, 0.2) * std::pow(At, 1.2) / std::pow(factorial(t - 5), 1.2),
                              At / factorial(t - 6)}),
                    6.0 * (r(t) + t - 1.0)};
        }
        case 3: {
            if (t % 2 != 0) throw ArgumentError("theorem_constants: family 3 needs even t");
            if (t == 2)
                return {std::max({8.0 * std::pow(A(2), 4), 2.0 * A(2) * A(2),
                                  std::cbrt(2.0) * std::pow(A(3), 4.0 / 3.0) / std::pow(nd, 2.0 / 3.0), A(4) / nd}),
                        std::max({4.0 * (r(2) + 1.0), 4.0 * r(3) / 3.0, r(4)})};
            const double At = A(t);
            return {std::max({8.0 * std::pow(At, 4) / std::pow(factorial(t - 1), 4),
                              2.0 * At * At / std::pow(factorial(t - 2), 2),
                              std::cbrt(2.0) * std::pow(At, 4.0 / 3.0) / std::pow(factorial(t - 3), 4.0 / 3.0),
                              At / factorial(t - 4)}),
                    4.0 * (r(t) + t - 1.0)};
        }
        case 4: {
            if (t < 2) throw ArgumentError("theorem_constants: family 4 needs t >= 2");
            const double At = A(t);
            return {std::max(At / factorial(t - 2), 2.0 * At * At / std::pow(factorial(t - 1), 2)),
                    2.0 * (r(t) + t - 1.0)};
        }
        default: throw ArgumentError("theorem_constants: family must be 1, 2, 3 or 4");
    }
}

struct SmallConstants {
    double alpha = 0.0, beta = 0.0, gamma = 0.0;
};

inline SmallConstants small_constants(double r, double sigma, bool tilde) {
    if (!(r >= 0.0)) throw DomainError("small_constants: r must be >= 0");
    if (!tilde) {
        if (r <= 1.0) return {4.0, 4.0, 2.0 * abs_normal_moment(r, sigma)};
        return {r + 3.0, r + 5.0, (r + 1.0) * abs_normal_moment(r + 1.0, sigma) / sigma};
    }
    if (r <= 1.0) return {10.0, 10.0, 10.0 * abs_normal_moment(r + 1.0, sigma)};
    return {r * r + r + 8.0, r * r + 2.0 * r + 18.0, (2.0 * r * r + r + 5.0) * abs_normal_moment(r + 1.0, sigma) / sigma};
}

// ---------------------------------------------------------------------------
// Moment requirements

struct MomentRequirement {
    std::vector<double> x_orders;  // E|X_ij|^s
    std::vector<double> w_orders;  // E|W_k|^r
    bool needs_third = false;
};

enum class BoundOp { DeltaMultivariate, DeltaUnivariate, FnMultivariate, FnUnivariate };

inline std::string op_name(BoundOp op) {
    switch (op) {
        case BoundOp::DeltaMultivariate: return "delta-multivariate";
        case BoundOp::DeltaUnivariate: return "delta-univariate";
        case BoundOp::FnMultivariate: return "fn-multivariate";
        case BoundOp::FnUnivariate: return "fn-univariate";
    }
    return "?";
}

inline BoundOp parse_op(const std::string& s) {
    if (s == "delta-multivariate") return BoundOp::DeltaMultivariate;
    if (s == "delta-univariate") return BoundOp::DeltaUnivariate;
    if (s == "fn-multivariate") return BoundOp::FnMultivariate;
    if (s == "fn-univariate") return BoundOp::FnUnivariate;
    throw ArgumentError("unknown bound operation '" + s + "'");
}

// Exponent of the W-moment entering each bound.
inline double bound_exponent(BoundOp op, BoundMode mode, const GrowthEnvelope& env) {
    switch (op) {
        case BoundOp::DeltaMultivariate: {
            const int family = mode == BoundMode::General ? 1 : mode == BoundMode::Even ? 2 : 3;
            return theorem_constants(family, env.t, 1, env).u;
        }
        case BoundOp::DeltaUnivariate:
            if (mode == BoundMode::General) return env.r_at(env.t) + env.t - 1.0;
            return 2.0 * (env.r_at(env.t) + env.t - 1.0);
        default: throw ArgumentError("bound_exponent: use the FnEnvelope exponent for fn bounds");
    }
}

inline MomentRequirement required_moments(BoundMode mode, double u) {
    MomentRequirement req;
    switch (mode) {
        case BoundMode::General: req.x_orders = {3.0, u + 3.0}; break;
        case BoundMode::Even:
            req.x_orders = {3.0, 4.0, u + 3.0, u + 4.0};
            req.needs_third = true;
            break;
        case BoundMode::ZeroThird:
            req.x_orders = {4.0, u + 4.0};
            req.needs_third = true;
            break;
    }
    req.w_orders = {u};
    return req;
}

inline MomentRequirement required_moments(BoundOp op, BoundMode mode, const GrowthEnvelope* env,
                                          const FnEnvelope* fn) {
    const double u = (op == BoundOp::FnMultivariate || op == BoundOp::FnUnivariate) ? fn->r
                                                                                   : bound_exponent(op, mode, *env);
    return required_moments(mode, u);
}

// ---------------------------------------------------------------------------
// Evaluation helpers

namespace detail {

struct Evaluation {
    const MomentTable& table;
    BoundReport& report;
    bool used_mc = false;

    void require(const std::string& name, bool pass, const std::string& detail = {}) {
        report.applicability.push_back({name, pass, detail});
    }
    // sum_i E|X_ij|^s, recording missing keys.
    double sum_abs(int j, double s) {
        if (s == 0.0) return static_cast<double>(table.n());
        auto v = table.row_sum_abs(j, s);
        if (v) return *v;
        for (std::size_t i = 0; i < table.stored_rows(); ++i)
            if (!table.abs_moment(i, j, s))
                report.missing.push_back("X(" + (table.iid() ? std::string("*") : std::to_string(i)) + "," +
                                         std::to_string(j) + "," + format_order(s) + ")");
        return 0.0;
    }
    double w_abs(int k, double r) {
        if (r == 0.0) return 1.0;
        auto v = table.w_moment(k, r);
        if (!v) {
            report.missing.push_back("W(" + std::to_string(k) + "," + format_order(r) + ")");
            return 0.0;
        }
        if (!provenance_rigorous(v->provenance)) used_mc = true;
        return v->value;
    }
    void finish(double total) {
        std::sort(report.missing.begin(), report.missing.end());
        report.missing.erase(std::unique(report.missing.begin(), report.missing.end()), report.missing.end());
        require("moment availability", report.missing.empty(),
                report.missing.empty() ? "" : std::to_string(report.missing.size()) + " missing entries");
        report.rigor = used_mc ? "mc-estimated-moments" : "rigorous";
        report.valid = std::all_of(report.applicability.begin(), report.applicability.end(),
                                   [](const Condition& c) { return c.pass; });
        if (report.valid) {
            report.value = total;
        } else {
            report.value.reset();
        }
    }
};

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

// Taylor terms shared by the delta-method bounds (their leading and second-order shifts).
inline double taylor_first(const GrowthEnvelope& env, const MomentTable& tab, int order_shift) {
    const int t = env.t, d = tab.d();
    const int k = t + order_shift;
    const double nd = static_cast<double>(tab.n());
    const double Ak = env.A_at(k), rk = env.r_at(k);
    double sum = 0.0;
    for (int j = 0; j < d; ++j)
        sum += abs_normal_moment(k, tab.sigma_k(j)) +
               d / std::pow(nd, rk / 2.0) * abs_normal_moment(rk + k, tab.sigma_k(j));
    return Ak * std::pow(d, k - 1) / factorial(k) * sum;
}

inline double taylor_second(const GrowthEnvelope& env, const MomentTable& tab) {
    const int t = env.t, d = tab.d();
    const double nd = static_cast<double>(tab.n());
    const double A1 = env.A_at(t + 1), A2 = env.A_at(t + 2), r2 = env.r_at(t + 2);
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
        const double s = tab.sigma_k(j);
        sum += A1 * A1 * abs_normal_moment(2.0 * (t + 1), s) +
               2.0 * A2 * A2 * d * d / ((t + 2.0) * (t + 2.0) * nd) *
                   (abs_normal_moment(2.0 * (t + 2), s) + d * d * abs_normal_moment(2.0 * (r2 + t + 2), s));
    }
    return std::pow(d, 2 * t + 1) / std::pow(factorial(t + 1), 2) * sum;
}

inline double max_abs_third(const MomentTable& tab) { return tab.has_mixed_third() ? tab.max_abs_mixed_third() : 0.0; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Delta-method bounds, multivariate

inline BoundReport bound_delta_multivariate(BoundMode mode, const GrowthEnvelope& env, const MomentTable& tab,
                                            const TestBudget& budget, int m) {
    using detail::fmt;
    env.validate();
    if (m < 1) throw ArgumentError("bound_delta_multivariate: m must be >= 1");
    BoundReport rep;
    rep.theorem = "delta-multivariate-" + mode_name(mode);
    rep.n = tab.n();
    rep.d = tab.d();
    rep.m = m;
    rep.t = env.t;
    rep.rate_exponent = mode == BoundMode::General ? -0.5 : -1.0;
    detail::Evaluation ev{tab, rep};
    const std::int64_t n = tab.n();
    const int d = tab.d(), t = env.t;
    const double nd = static_cast<double>(n);

    if (mode == BoundMode::General) {
        const double need = std::max(std::pow(static_cast<double>(d), 6), 8.0);
        ev.require("n >= max(d^6, 8)", nd >= need, "n=" + std::to_string(n) + ", need " + fmt(need));
        ev.require("budget order >= 3", budget.order() >= 3);
    } else {
        ev.require("t even", t % 2 == 0, "t=" + std::to_string(t));
        if (mode == BoundMode::Even) {
            ev.require("f even", env.even);
            ev.require("n >= 12", n >= 12, "n=" + std::to_string(n));
            ev.require("budget order >= 6", budget.order() >= 6);
        } else {
            const double third = detail::max_abs_third(tab);
            ev.require("vanishing third moments", env.vanishing_third && tab.has_mixed_third() && third <= 1e-12,
                       "max |E[X_ij X_ik X_il]| = " + fmt(third));
            ev.require("n >= 8", n >= 8, "n=" + std::to_string(n));
            ev.require("budget order >= 4", budget.order() >= 4);
        }
        if (mode == BoundMode::Even) ev.require("mixed third moments present", tab.has_mixed_third());
    }
    if (!rep.failures().empty() && (t % 2 != 0) && mode != BoundMode::General) {
        ev.finish(0.0);
        return rep;
    }

    const int family = mode == BoundMode::General ? 1 : mode == BoundMode::Even ? 2 : 3;
    const auto [C, u] = theorem_constants(family, t, n, env);
    const double a = a_factor(n, d, env.r_at(t));
    auto safe_h = [&](int p) { return budget.order() >= p ? h_budget(budget, m, p) : 0.0; };
    const double h1 = budget.norm(1);
    const double h2 = budget.order() >= 2 ? budget.norm(2) : 0.0;

    if (mode == BoundMode::General) {
        const double M1 = detail::taylor_first(env, tab, 1);
        double inner = 0.0;
        for (int j = 0; j < d; ++j) {
            const double s3 = ev.sum_abs(j, 3.0), su3 = ev.sum_abs(j, u + 3.0);
            for (int k = 0; k < d; ++k) {
                const double wk = ev.w_abs(k, u);
                inner += (1.0 + std::pow(2.0, u / 2.0) * abs_normal_moment(u, tab.sigma_k(k))) * s3 + su3 +
                         std::pow(2.0, 1.5 * u) * s3 * wk;
            }
        }
        const double M2 = C * std::pow(a, 3) * std::pow(d, 3 * t - 2) / nd * inner;
        rep.terms = {{"taylor", M1, m * h1 / std::sqrt(nd)}, {"stein", M2, safe_h(3) / std::sqrt(nd)}};
        ev.finish(rep.reconstruct());
        return rep;
    }

    const double K1 = detail::taylor_first(env, tab, 2);
    const double K2 = detail::taylor_second(env, tab);
    if (mode == BoundMode::Even) {
        double inner4 = 0.0;
        for (int j = 0; j < d; ++j) {
            const double s4 = ev.sum_abs(j, 4.0), su4 = ev.sum_abs(j, u + 4.0);
            for (int k = 0; k < d; ++k)
                inner4 += (1.0 + std::pow(2.0, u / 2.0) * abs_normal_moment(u, tab.sigma_k(k))) * s4 + su4 +
                          std::pow(2.0, 1.5 * u) * s4 * ev.w_abs(k, u);
        }
        const double K3 = 13.0 * C * std::pow(a, 6) * std::pow(d, 6 * t - 4) / (12.0 * nd) * inner4;
        // The (i, alpha) double sum separates into a product of two single sums.
        double inner3 = 0.0;
        for (int aa = 0; aa < d; ++aa) {
            const double s3 = ev.sum_abs(aa, 3.0), su3 = ev.sum_abs(aa, u + 3.0);
            for (int q = 0; q < d; ++q)
                inner3 += (1.0 + 2.0 * std::pow(3.0, u / 2.0) * abs_normal_moment(u, tab.sigma_k(q))) * s3 + su3 +
                          std::pow(12.0, u / 2.0) * s3 * ev.w_abs(q, u);
        }
        const double third_sum = tab.has_mixed_third() ? tab.row_sum_abs_mixed_third() : 0.0;
        const double K4 = C * std::pow(a, 6) * std::pow(d, 6 * t - 5) / (12.0 * nd * nd) * third_sum * inner3;
        rep.terms = {{"taylor_first", K1, m * h1 / nd},
                     {"taylor_second", K2, static_cast<double>(m) * m * h2 / nd},
                     {"stein_fourth", K3, safe_h(4) / nd},
                     {"stein_third_pair", K4, safe_h(6) / nd}};
        ev.finish(rep.reconstruct());
        return rep;
    }

    double inner4 = 0.0;
    for (int j = 0; j < d; ++j) {
        const double s4 = ev.sum_abs(j, 4.0), su4 = ev.sum_abs(j, u + 4.0);
        for (int k = 0; k < d; ++k)
            inner4 += (1.0 + std::pow(2.0, u / 2.0) * abs_normal_moment(u, tab.sigma_k(k))) * s4 + su4 +
                      std::pow(2.0, 1.5 * u) * s4 * ev.w_abs(k, u);
    }
    const double K5 = 5.0 * C * std::pow(a, 4) * std::pow(d, 4 * t - 2) / (6.0 * nd) * inner4;
    // Second-order Taylor shift carries m^2 |h|_2, as in the even case.
    rep.terms = {{"taylor_first", K1, m * h1 / nd},
                 {"taylor_second", K2, static_cast<double>(m) * m * h2 / nd},
                 {"stein_fourth", K5, safe_h(4) / nd}};
    ev.finish(rep.reconstruct());
    return rep;
}

// ---------------------------------------------------------------------------
// Delta-method bounds, univariate

inline BoundReport bound_delta_univariate(BoundMode mode, const GrowthEnvelope& env, const MomentTable& tab,
                                          double hprime, double hdoubleprime) {
    using detail::fmt;
    env.validate();
    if (tab.d() != 1) throw ArgumentError("bound_delta_univariate: moment table must be one-dimensional");
    if (!(hprime >= 0.0) || !(hdoubleprime >= 0.0)) throw ArgumentError("bound_delta_univariate: negative norm");
    BoundReport rep;
    rep.theorem = "delta-univariate-" + mode_name(mode);
    rep.n = tab.n();
    rep.t = env.t;
    rep.rate_exponent = mode == BoundMode::General ? -0.5 : -1.0;
    detail::Evaluation ev{tab, rep};
    const std::int64_t n = tab.n();
    const int t = env.t;
    const double nd = static_cast<double>(n);
    const double sigma = tab.sigma_k(0), var = sigma * sigma;
    ev.require("Var(W) > 0", var > 0.0);

    if (mode == BoundMode::General) {
        ev.require("n >= 8", n >= 8, "n=" + std::to_string(n));
    } else {
        ev.require("t even", t % 2 == 0, "t=" + std::to_string(t));
        if (mode == BoundMode::Even) {
            ev.require("f even", env.even);
            ev.require("n >= 12", n >= 12, "n=" + std::to_string(n));
            ev.require("third moment present", tab.has_mixed_third());
        } else {
            const double third = detail::max_abs_third(tab);
            ev.require("E[X_i^3] = 0", tab.has_mixed_third() && third <= 1e-12, "max |E[X_i^3]| = " + fmt(third));
            ev.require("n >= 8", n >= 8, "n=" + std::to_string(n));
        }
    }
    if (var <= 0.0 || (mode != BoundMode::General && t % 2 != 0) || (mode != BoundMode::General && t < 2)) {
        ev.finish(0.0);
        return rep;
    }

    if (mode == BoundMode::General) {
        const double u = env.r_at(t) + t - 1.0;
        const auto sc = small_constants(u, sigma, false);
        const double s3 = ev.sum_abs(0, 3.0), su3 = ev.sum_abs(0, u + 3.0), w = ev.w_abs(0, u);
        const double M11 = detail::taylor_first(env, tab, 1);
        const double M3 = 3.0 * env.A_at(t) / (detail::factorial(t - 1) * var * nd) *
                          ((sc.alpha + std::pow(2.0, u / 2.0) * sc.gamma) * s3 +
                           std::pow(2.0, 1.5 * u) * sc.beta * s3 * w + sc.beta * su3);
        rep.terms = {{"taylor", M11, hprime / std::sqrt(nd)}, {"stein", M3, hprime / std::sqrt(nd)}};
        ev.finish(rep.reconstruct());
        return rep;
    }

    const auto [C4, u] = theorem_constants(4, t, n, env);
    const auto sc = small_constants(u, sigma, false);
    const double K11 = detail::taylor_first(env, tab, 2);
    const double K21 = detail::taylor_second(env, tab);
    const double s4 = ev.sum_abs(0, 4.0), su4 = ev.sum_abs(0, u + 4.0), w = ev.w_abs(0, u);
    const double K6 = 10.0 * C4 / (3.0 * var * nd) *
                      ((sc.alpha + std::pow(2.0, u / 2.0) * sc.gamma) * s4 +
                       std::pow(2.0, 1.5 * u) * sc.beta * s4 * w + sc.beta * su4);
    const double both = hprime + hdoubleprime;
    if (mode == BoundMode::ZeroThird) {
        rep.terms = {{"taylor_first", K11, hprime / nd},
                     {"taylor_second", K21, hdoubleprime / nd},
                     {"stein_fourth", K6, both / nd}};
        ev.finish(rep.reconstruct());
        return rep;
    }
    const auto tc = small_constants(u, sigma, true);
    const double s3 = ev.sum_abs(0, 3.0), su3 = ev.sum_abs(0, u + 3.0);
    const double third_sum = tab.has_mixed_third() ? tab.row_sum_abs_mixed_third() : 0.0;
    const double K7 = 3.0 * C4 / (2.0 * var * var * nd * nd) * third_sum *
                      ((tc.alpha + std::pow(3.0, u / 2.0) * tc.gamma) * s3 +
                       std::pow(12.0, u / 2.0) * tc.beta * s3 * w + tc.beta * su3);
    rep.terms = {{"taylor_first", K11, hprime / nd},
                 {"taylor_second", K21, hdoubleprime / nd},
                 {"stein_fourth", K6, 1.3 * both / nd},
                 {"stein_third_pair", K7, both / nd}};
    ev.finish(rep.reconstruct());
    return rep;
}

// ---------------------------------------------------------------------------
// Bounds for g(W) against g(Z)

inline BoundReport bound_fn_multivariate(BoundMode mode, const FnEnvelope& env, const MomentTable& tab,
                                         const TestBudget& budget, int m) {
    using detail::fmt;
    env.validate();
    if (m < 1) throw ArgumentError("bound_fn_multivariate: m must be >= 1");
    BoundReport rep;
    rep.theorem = "fn-multivariate-" + mode_name(mode);
    rep.n = tab.n();
    rep.d = tab.d();
    rep.m = m;
    rep.t = 0;
    rep.rate_exponent = mode == BoundMode::General ? -0.5 : -1.0;
    detail::Evaluation ev{tab, rep};
    const std::int64_t n = tab.n();
    const int d = tab.d();
    const double nd = static_cast<double>(n), r = env.r, A = env.A, B = env.B;

    switch (mode) {
        case BoundMode::General:
            ev.require("n >= 8", n >= 8, "n=" + std::to_string(n));
            ev.require("budget order >= 3", budget.order() >= 3);
            break;
        case BoundMode::Even:
            ev.require("g even", env.even);
            ev.require("n >= 12", n >= 12, "n=" + std::to_string(n));
            ev.require("budget order >= 6", budget.order() >= 6);
            ev.require("mixed third moments present", tab.has_mixed_third());
            break;
        case BoundMode::ZeroThird: {
            const double third = detail::max_abs_third(tab);
            ev.require("vanishing third moments", tab.has_mixed_third() && third <= 1e-12,
                       "max |E[X_ij X_ik X_il]| = " + fmt(third));
            ev.require("n >= 8", n >= 8, "n=" + std::to_string(n));
            ev.require("budget order >= 4", budget.order() >= 4);
            break;
        }
    }
    auto safe_h = [&](int p) { return budget.order() >= p ? h_budget(budget, m, p) : 0.0; };

    if (mode == BoundMode::General) {
        double inner = 0.0;
        for (int j = 0; j < d; ++j) {
            const double s3 = ev.sum_abs(j, 3.0), sr3 = ev.sum_abs(j, r + 3.0);
            for (int k = 0; k < d; ++k)
                inner += (A / d + std::pow(2.0, r / 2.0) * abs_normal_moment(r, tab.sigma_k(k)) * B) * s3 + B * sr3 +
                         std::pow(2.0, 1.5 * r) * B * s3 * ev.w_abs(k, r);
        }
        rep.terms = {{"stein", inner, static_cast<double>(d) * d * safe_h(3) / (2.0 * std::pow(nd, 1.5))}};
        ev.finish(rep.reconstruct());
        return rep;
    }

    double inner4 = 0.0;
    for (int j = 0; j < d; ++j) {
        const double s4 = ev.sum_abs(j, 4.0), sr4 = ev.sum_abs(j, r + 4.0);
        for (int k = 0; k < d; ++k)
            inner4 += (A / d + std::pow(2.0, r / 2.0) * abs_normal_moment(r, tab.sigma_k(k)) * B) * s4 + B * sr4 +
                      std::pow(2.0, 1.5 * r) * B * s4 * ev.w_abs(k, r);
    }
    const double K1 = 5.0 * std::pow(d, 3) / (12.0 * nd) * inner4;
    if (mode == BoundMode::ZeroThird) {
        rep.terms = {{"stein_fourth", K1, safe_h(4) / nd}};
        ev.finish(rep.reconstruct());
        return rep;
    }
    double inner3 = 0.0;
    for (int aa = 0; aa < d; ++aa) {
        const double s3 = ev.sum_abs(aa, 3.0), sr3 = ev.sum_abs(aa, r + 3.0);
        for (int q = 0; q < d; ++q)
            inner3 += (A / d + 2.0 * std::pow(3.0, r / 2.0) * abs_normal_moment(r, tab.sigma_k(q)) * B) * s3 +
                      B * sr3 + std::pow(12.0, r / 2.0) * B * s3 * ev.w_abs(q, r);
    }
    const double third_sum = tab.has_mixed_third() ? tab.row_sum_abs_mixed_third() : 0.0;
    const double K2 = static_cast<double>(d) * d / (24.0 * nd * nd) * third_sum * inner3;
    rep.terms = {{"stein_fourth", K1, 1.3 * safe_h(4) / nd}, {"stein_third_pair", K2, safe_h(6) / nd}};
    ev.finish(rep.reconstruct());
    return rep;
}

inline BoundReport bound_fn_univariate(BoundMode mode, const FnEnvelope& env, const MomentTable& tab, double hprime,
                                       double hdoubleprime) {
    using detail::fmt;
    env.validate();
    if (tab.d() != 1) throw ArgumentError("bound_fn_univariate: moment table must be one-dimensional");
    if (!(hprime >= 0.0) || !(hdoubleprime >= 0.0)) throw ArgumentError("bound_fn_univariate: negative norm");
    BoundReport rep;
    rep.theorem = "fn-univariate-" + mode_name(mode);
    rep.n = tab.n();
    rep.t = 0;
    rep.rate_exponent = mode == BoundMode::General ? -0.5 : -1.0;
    detail::Evaluation ev{tab, rep};
    const std::int64_t n = tab.n();
    const double nd = static_cast<double>(n), r = env.r, A = env.A, B = env.B;
    const double sigma = tab.sigma_k(0), var = sigma * sigma;
    ev.require("Var(W) > 0", var > 0.0);
    switch (mode) {
        case BoundMode::General: ev.require("n >= 8", n >= 8, "n=" + std::to_string(n)); break;
        case BoundMode::Even:
            ev.require("g even", env.even);
            ev.require("n >= 12", n >= 12, "n=" + std::to_string(n));
            ev.require("third moment present", tab.has_mixed_third());
            break;
        case BoundMode::ZeroThird: {
            const double third = detail::max_abs_third(tab);
            ev.require("E[X_i^3] = 0", tab.has_mixed_third() && third <= 1e-12, "max |E[X_i^3]| = " + fmt(third));
            ev.require("n >= 8", n >= 8, "n=" + std::to_string(n));
            break;
        }
    }
    if (var <= 0.0) {
        ev.finish(0.0);
        return rep;
    }
    const auto sc = small_constants(r, sigma, false);
    if (mode == BoundMode::General) {
        const double s3 = ev.sum_abs(0, 3.0), sr3 = ev.sum_abs(0, r + 3.0), w = ev.w_abs(0, r);
        const double inner = (A * sc.alpha + std::pow(2.0, r / 2.0) * B * sc.gamma) * s3 +
                             std::pow(2.0, 1.5 * r) * B * sc.beta * s3 * w + B * sc.beta * sr3;
        rep.terms = {{"stein", inner, 3.0 * hprime / (2.0 * var * std::pow(nd, 1.5))}};
        ev.finish(rep.reconstruct());
        return rep;
    }
    const double s4 = ev.sum_abs(0, 4.0), sr4 = ev.sum_abs(0, r + 4.0), w = ev.w_abs(0, r);
    const double K3 = 5.0 / (3.0 * var * nd) *
                      ((A * sc.alpha + std::pow(2.0, r / 2.0) * B * sc.gamma) * s4 +
                       std::pow(2.0, 1.5 * r) * B * sc.beta * s4 * w + B * sc.beta * sr4);
    const double both = hprime + hdoubleprime;
    if (mode == BoundMode::ZeroThird) {
        rep.terms = {{"stein_fourth", K3, both / nd}};
        ev.finish(rep.reconstruct());
        return rep;
    }
    const auto tc = small_constants(r, sigma, true);
    const double s3 = ev.sum_abs(0, 3.0), sr3 = ev.sum_abs(0, r + 3.0);
    const double third_sum = tab.has_mixed_third() ? tab.row_sum_abs_mixed_third() : 0.0;
    const double K4 = 3.0 / (4.0 * var * var * nd * nd) * third_sum *
                      ((A * tc.alpha + std::pow(3.0, r / 2.0) * B * tc.gamma) * s3 +
                       std::pow(12.0, r / 2.0) * B * tc.beta * s3 * w + B * tc.beta * sr3);
    rep.terms = {{"stein_fourth", K3, 1.3 * both / nd}, {"stein_third_pair", K4, both / nd}};
    ev.finish(rep.reconstruct());
    return rep;
}

// ---------------------------------------------------------------------------
// Dominating envelopes for g_{t,n}(w) = n^{t/2} (f(w / sqrt n) - f(0))

enum class EnvelopeFamily { General, Even, ZeroThird, UniGeneral, UniSecond };

inline FnEnvelope dominating_envelope(EnvelopeFamily family, const GrowthEnvelope& env, std::int64_t n, int d) {
    env.validate();
    const int t = env.t;
    const double dd = static_cast<double>(d);
    FnEnvelope out;
    switch (family) {
        case EnvelopeFamily::General:
        case EnvelopeFamily::Even:
        case EnvelopeFamily::ZeroThird: {
            const int fam = family == EnvelopeFamily::General ? 1 : family == EnvelopeFamily::Even ? 2 : 3;
            const auto [C, u] = theorem_constants(fam, t, n, env);
            const double a = a_factor(n, d, env.r_at(t));
            double base = 0.0;
            if (fam == 1) base = 2.0 * C * std::pow(a, 3) * std::pow(dd, 3 * t - 4);
            if (fam == 2) base = 2.0 * C * std::pow(a, 6) * std::pow(dd, 6 * t - 7);
            if (fam == 3) base = 2.0 * C * std::pow(a, 4) * std::pow(dd, 4 * t - 5);
            out = {base * dd, base, u, env.even};
            return out;
        }
        case EnvelopeFamily::UniGeneral: {
            const double c = 2.0 * env.A_at(t) / detail::factorial(t - 1);
            out = {c, c, env.r_at(t) + t - 1.0, env.even};
            return out;
        }
        case EnvelopeFamily::UniSecond: {
            const auto [C4, u] = theorem_constants(4, t, n, env);
            out = {2.0 * C4, 2.0 * C4, u, env.even};
            return out;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Kolmogorov extraction for t = 1 from a d_3 bound. nullopt when the smallness
// condition d_3 <= (2 + sqrt(2 log d)) / (2 sigma^2) fails.
inline std::optional<double> kolmogorov_from_d3(double d3, int d, double sigma_min_sq) {
    if (!(sigma_min_sq > 0.0)) throw DomainError("kolmogorov_from_d3: sigma^2 must be positive");
    if (!(d3 >= 0.0) || d < 1) throw DomainError("kolmogorov_from_d3: need d3 >= 0 and d >= 1");
    const double logd = std::log(static_cast<double>(d));
    if (d3 > (2.0 + std::sqrt(2.0 * logd)) / (2.0 * sigma_min_sq)) return std::nullopt;
    return 6.17 * std::pow((std::sqrt(logd) + M_SQRT2) / sigma_min_sq, 0.75) * std::pow(d3, 0.25);
}

// ---------------------------------------------------------------------------
// Derivative bounds for the Stein solution and for the auxiliary psi functions.

enum class SteinKind { Solution, Psi };

inline double stein_derivative_bound(SteinKind kind, int order, const FnEnvelope& env, const TestBudget& budget, int m,
                                     const std::vector<double>& w, const std::vector<double>& sigmas) {
    env.validate();
    if (w.size() != sigmas.size()) throw ArgumentError("stein_derivative_bound: w and sigmas differ in length");
    if (kind == SteinKind::Psi) {
        if (budget.order() < 6) throw ArgumentError("stein_derivative_bound: psi needs a budget of order 6");
        double bracket = env.A;
        for (std::size_t i = 0; i < w.size(); ++i)
            bracket += std::pow(3.0, env.r / 2.0) * env.B *
                       (std::pow(std::abs(w[i]), env.r) + 2.0 * abs_normal_moment(env.r, sigmas[i]));
        return h_budget(budget, m, 6) / 18.0 * bracket;
    }
    if (order < 1 || order > budget.order())
        throw ArgumentError("stein_derivative_bound: order must lie in [1, budget order]");
    double bracket = env.A;
    for (std::size_t i = 0; i < w.size(); ++i)
        bracket += std::pow(2.0, env.r / 2.0) * env.B *
                   (std::pow(std::abs(w[i]), env.r) + abs_normal_moment(env.r, sigmas[i]));
    return h_budget(budget, m, order) / order * bracket;
}

}  // namespace stein_delta
