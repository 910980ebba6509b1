#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "stein_delta/bounds.hpp"
#include "stein_delta/statistics.hpp"

using namespace stein_delta;

namespace {

double term(const BoundReport& r, const std::string& name) {
    for (const auto& t : r.terms)
        if (t.name == name) return t.value;
    ADD_FAILURE() << "missing term " << name << " in " << r.theorem;
    return NAN;
}

// Non-iid table with independent random per-row moments, plus the matching oracle rows.
struct RandomInstance {
    MomentTable table;
    oracle::Rows rows;
    std::vector<std::vector<std::vector<double>>> third;  // per row, flattened d^3
    std::vector<std::vector<std::map<double, double>>> abs;
};

RandomInstance random_instance(int n, int d, const std::vector<double>& orders, double u, std::mt19937_64& gen) {
    std::uniform_real_distribution<double> pos(0.05, 3.0), sgn(-1.0, 1.0);
    RandomInstance ri{MomentTable(n, d, false), {}, {}, {}};
    ri.abs.assign(n, std::vector<std::map<double, double>>(d));
    ri.third.assign(n, {});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j)
            for (double s : orders) {
                const double v = pos(gen);
                ri.abs[i][j][s] = v;
                ri.table.set_abs(i, j, s, v);
            }
        std::vector<double> t(static_cast<std::size_t>(d) * d * d);
        for (double& v : t) v = sgn(gen);
        ri.third[i] = {t};
        ri.table.set_mixed_third(i, t);
    }
    Eigen::MatrixXd B = Eigen::MatrixXd::Random(d, d);
    ri.table.set_sigma(B * B.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d));
    std::vector<double> w(d);
    for (int k = 0; k < d; ++k) {
        w[k] = pos(gen);
        ri.table.set_w(k, u, {w[k], 0.0, "user"});
    }
    std::vector<double> sig(d);
    for (int k = 0; k < d; ++k) sig[k] = ri.table.sigma_k(k);
    ri.rows.n = n;
    ri.rows.d = d;
    ri.rows.sigma = sig;
    ri.rows.w = w;
    ri.rows.abs = [abs = ri.abs](int i, int j, double s) { return abs[i][j].at(s); };
    ri.rows.third = [third = ri.third, d](int i, int j, int k, int l) {
        return third[i][0][(static_cast<std::size_t>(j) * d + k) * d + l];
    };
    return ri;
}

oracle::Rows iid_rows(const MomentTable& tab) {
    oracle::Rows x;
    x.n = static_cast<int>(tab.n());
    x.d = tab.d();
    for (int k = 0; k < x.d; ++k) x.sigma.push_back(tab.sigma_k(k));
    x.abs = [&tab](int, int j, double s) { return *tab.abs_moment(0, j, s); };
    const int d = x.d;
    x.third = [&tab, d](int, int j, int k, int l) {
        return tab.mixed_third(0)[(static_cast<std::size_t>(j) * d + k) * d + l];
    };
    return x;
}

}  // namespace

TEST(TheoremConstants, WorkedValues) {
    GrowthEnvelope t3{3, {1.0}, {0.0}, false, false};
    auto c = theorem_constants(1, 3, 100, t3);
    EXPECT_NEAR(c.C, M_SQRT2, 1e-15);
    EXPECT_DOUBLE_EQ(c.u, 6.0);

    GrowthEnvelope t1{1, {2.0, 1.0}, {1.0, 0.0}, false, false};
    c = theorem_constants(1, 1, 100, t1);
    EXPECT_DOUBLE_EQ(c.C, 32.0);
    EXPECT_DOUBLE_EQ(c.u, 3.0);

    GrowthEnvelope t2{2, {1.0}, {0.0}, true, true};
    c = theorem_constants(4, 2, 100, t2);
    EXPECT_DOUBLE_EQ(c.C, 2.0);
    EXPECT_DOUBLE_EQ(c.u, 2.0);

    GrowthEnvelope vg{2, {1.0 / 3.0, 0, 0, 0, 0}, {0, 0, 0, 0, 0}, true, false};
    c = theorem_constants(2, 2, 16, vg);
    EXPECT_NEAR(c.C, 4.0 / 27.0, 1e-15);
    EXPECT_DOUBLE_EQ(c.u, 6.0);

    c = theorem_constants(3, 2, 16, t2);
    EXPECT_DOUBLE_EQ(c.C, 8.0);
    EXPECT_DOUBLE_EQ(c.u, 4.0);

    EXPECT_THROW(theorem_constants(2, 3, 10, t3), ArgumentError);
    EXPECT_THROW(theorem_constants(5, 2, 10, t2), ArgumentError);
}

TEST(TheoremConstants, SmallConstants) {
    const double s = 0.7;
    auto k = small_constants(0.5, s, false);
    EXPECT_DOUBLE_EQ(k.alpha, 4.0);
    EXPECT_DOUBLE_EQ(k.beta, 4.0);
    EXPECT_NEAR(k.gamma, 2.0 * oracle::mu(0.5, s), 1e-14);
    k = small_constants(2.0, s, false);
    EXPECT_DOUBLE_EQ(k.alpha, 5.0);
    EXPECT_DOUBLE_EQ(k.beta, 7.0);
    EXPECT_NEAR(k.gamma, 3.0 * oracle::mu(3.0, s) / s, 1e-14);
    k = small_constants(2.0, s, true);
    EXPECT_DOUBLE_EQ(k.alpha, 14.0);
    EXPECT_DOUBLE_EQ(k.beta, 26.0);
    EXPECT_NEAR(k.gamma, 15.0 * oracle::mu(3.0, s) / s, 1e-14);
    k = small_constants(1.0, s, true);
    EXPECT_DOUBLE_EQ(k.alpha, 10.0);
    EXPECT_NEAR(k.gamma, 10.0 * oracle::mu(2.0, s), 1e-14);
}

TEST(BernoulliVariance, GeneralBoundAtWorstCaseMoments) {
    const auto plan = builtin("bernoulli-variance", {{"p", 0.3}});
    const auto worst = DataModel::centered_bernoulli({0.5});
    for (std::int64_t n : {8, 100, 10000}) {
        auto tab = analytic_moments(worst, {3.0, 4.0}, n);
        tab.set_w(0, 1.0, w_moment(worst, n, 0, 1.0, {WMomentMode::Holder, 0, 0, 1}));
        const auto rep = bound_delta_univariate(BoundMode::General, plan.map.envelope, tab, 1.0, 1.0);
        ASSERT_TRUE(rep.valid);
        EXPECT_NEAR(rep.checked_value() * std::sqrt(static_cast<double>(n)), oracle::kBernoulliGeneralScaled, 1e-9);
        EXPECT_NEAR(term(rep, "taylor"), 0.25, 1e-15);
    }
}

TEST(BernoulliVariance, ZeroThirdBoundAtHalf) {
    const auto plan = builtin("bernoulli-variance", {{"p", 0.5}});
    for (std::int64_t n : {8, 100, 10000}) {
        const auto rep = plan_bound(plan, n);
        ASSERT_TRUE(rep.valid) << rep.failures().size();
        EXPECT_NEAR(rep.checked_value() * static_cast<double>(n), oracle::kBernoulliZeroThirdScaled, 1e-9);
    }
}

TEST(FactoredSums, EvenDeltaTermsMatchLiteralLoops) {
    std::mt19937_64 gen(7);
    const GrowthEnvelope env{2, {0.8, 0.3, 0.2}, {0.0, 0.5, 1.0}, true, false};
    for (int n = 1; n <= 20; n += 3)
        for (int d = 1; d <= 3; ++d) {
            const auto [C, u] = theorem_constants(2, 2, n, env);
            const double a = a_factor(n, d, env.r_at(2));
            auto ri = random_instance(n, d, {3.0, 4.0, u + 3.0, u + 4.0}, u, gen);
            const auto rep = bound_delta_multivariate(BoundMode::Even, env, ri.table, TestBudget::unit(6), 2);
            const double k3 = oracle::delta_even_fourth(ri.rows, C, a, 2, u);
            const double k4 = oracle::delta_even_third_pair(ri.rows, C, a, 2, u);
            EXPECT_NEAR(term(rep, "stein_fourth"), k3, 1e-12 * std::max(1.0, k3)) << "n=" << n << " d=" << d;
            EXPECT_NEAR(term(rep, "stein_third_pair"), k4, 1e-12 * std::max(1.0, k4)) << "n=" << n << " d=" << d;
        }
}

TEST(FactoredSums, FnTermsMatchLiteralLoops) {
    std::mt19937_64 gen(8);
    const FnEnvelope env{3.0, 5.0, 2.5, true};
    for (int n = 1; n <= 20; n += 3)
        for (int d = 1; d <= 3; ++d) {
            auto ri = random_instance(n, d, {3.0, 4.0, env.r + 3.0, env.r + 4.0}, env.r, gen);
            const auto rep = bound_fn_multivariate(BoundMode::Even, env, ri.table, TestBudget::unit(6), 1);
            const double k1 = oracle::fn_fourth(ri.rows, env.A, env.B, env.r);
            const double k2 = oracle::fn_third_pair(ri.rows, env.A, env.B, env.r);
            EXPECT_NEAR(term(rep, "stein_fourth"), k1, 1e-12 * std::max(1.0, k1));
            EXPECT_NEAR(term(rep, "stein_third_pair"), k2, 1e-12 * std::max(1.0, k2));
        }
}

TEST(ProductMeans, VarianceGammaTermsMatchOracle) {
    const auto plan = example_plans("ex3.3-vg").front();
    const std::int64_t n = 16;
    const auto tab = plan_moment_table(plan, n);
    auto rows = iid_rows(tab);
    for (int k = 0; k < 2; ++k) rows.w.push_back(tab.w_moment(k, 6.0)->value);
    const auto rep = plan_bound(plan, tab);
    ASSERT_TRUE(rep.valid);
    const double a = 2.0;  // max(d / n^0, 1)
    const double k3 = oracle::delta_even_fourth(rows, 4.0 / 27.0, a, 2, 6.0);
    const double k4 = oracle::delta_even_third_pair(rows, 4.0 / 27.0, a, 2, 6.0);
    EXPECT_NEAR(term(rep, "stein_fourth"), k3, 1e-12 * k3);
    EXPECT_NEAR(term(rep, "stein_third_pair"), k4, 1e-12 * k4);
    EXPECT_NEAR(rep.reconstruct(), rep.checked_value(), 1e-12 * rep.checked_value());
}

TEST(RankStatistics, FriedmanFourthTermMatchesOracle) {
    const auto plan = example_plans("ex3.5-friedman")[1];  // r = 3
    const std::int64_t n = 64;
    const auto tab = plan_moment_table(plan, n);
    auto rows = iid_rows(tab);
    for (int k = 0; k < 3; ++k) rows.w.push_back(tab.w_moment(k, 4.0)->value);
    const auto rep = plan_bound(plan, tab);
    ASSERT_TRUE(rep.valid);
    EXPECT_EQ(rep.theorem, "fn-multivariate-zero-third");
    const double k1 = oracle::fn_fourth(rows, 4.0, 16.0, 4.0);
    EXPECT_NEAR(term(rep, "stein_fourth"), k1, 1e-12 * k1);
}

TEST(FnUnivariate, RademacherZeroThirdMatchesOracle) {
    const auto m = DataModel::rademacher(1);
    const std::int64_t n = 64;
    auto tab = analytic_moments(m, {4.0, 6.0}, n);
    tab.set_w(0, 2.0, w_moment(m, n, 0, 2.0, {WMomentMode::Holder, 0, 0, 1}));
    const auto rep = bound_fn_univariate(BoundMode::ZeroThird, {0.0, 4.0, 2.0, true}, tab, 1.0, 1.0);
    ASSERT_TRUE(rep.valid);
    auto rows = iid_rows(tab);
    rows.w = {1.0};
    EXPECT_NEAR(term(rep, "stein_fourth"), oracle::fn_uni_fourth(rows, 0.0, 4.0, 2.0), 1e-12);
}

TEST(BoundProperties, ZeroBudgetGivesZero) {
    const auto plan = example_plans("ex3.4").front();
    const auto tab = plan_moment_table(plan, 256);
    const auto rep = bound_delta_multivariate(BoundMode::General, plan.map.envelope, tab, TestBudget({0, 0, 0}), 2);
    ASSERT_TRUE(rep.valid);
    EXPECT_DOUBLE_EQ(rep.checked_value(), 0.0);
}

TEST(BoundProperties, MonotoneInMomentsAndTermsSum) {
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> bump(1.0, 2.0);
    const GrowthEnvelope env{2, {1.0}, {0.0}, true, true};
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 12 + trial;
        auto ri = random_instance(n, 1, {3.0, 4.0, 5.0, 6.0}, 2.0, gen);
        const auto base = bound_delta_univariate(BoundMode::Even, env, ri.table, 1.0, 1.0);
        ASSERT_TRUE(base.valid);
        EXPECT_NEAR(base.reconstruct(), base.checked_value(), 1e-12 * base.checked_value());
        auto bigger = ri.table;
        const double s = std::vector<double>{3.0, 4.0, 5.0, 6.0}[trial % 4];
        bigger.set_abs(trial % n, 0, s, *ri.table.abs_moment(trial % n, 0, s) * bump(gen));
        const auto grown = bound_delta_univariate(BoundMode::Even, env, bigger, 1.0, 1.0);
        EXPECT_GE(grown.checked_value(), base.checked_value());
        bigger.set_w(0, 2.0, {ri.rows.w[0] * 2.0, 0.0, "user"});
        EXPECT_GT(bound_delta_univariate(BoundMode::Even, env, bigger, 1.0, 1.0).checked_value(),
                  grown.checked_value());
    }
}

TEST(BoundProperties, RateExponentScaling) {
    const auto plan = builtin("bernoulli-variance", {{"p", 0.5}});
    const double b1 = plan_bound(plan, 100).checked_value(), b2 = plan_bound(plan, 400).checked_value();
    EXPECT_NEAR(b1 / b2, 4.0, 1e-9);
    const auto normal = builtin("bernoulli-variance", {{"p", 0.3}});
    const auto r1 = plan_bound(normal, 100), r2 = plan_bound(normal, 400);
    EXPECT_DOUBLE_EQ(r1.rate_exponent, -0.5);
    EXPECT_NEAR(r1.checked_value() / r2.checked_value(), 2.0, 1e-9);
}

TEST(BoundProperties, InapplicableReportsCarryNoValue) {
    const auto plan = builtin("bernoulli-variance", {{"p", 0.3}});
    const auto small = plan_bound(plan, 4);
    EXPECT_FALSE(small.valid);
    EXPECT_FALSE(small.value.has_value());
    EXPECT_THROW(small.checked_value(), ArgumentError);

    // Odd t in the even regime.
    const GrowthEnvelope odd{1, {1.0}, {0.0}, true, false};
    const auto tab = analytic_moments(DataModel::rademacher(1), {3.0, 4.0}, 50);
    EXPECT_FALSE(bound_delta_univariate(BoundMode::Even, odd, tab, 1.0, 1.0).valid);

    // Non-vanishing third moment in the zero-third regime.
    const GrowthEnvelope two{2, {1.0}, {0.0}, true, true};
    const auto skew = analytic_moments(DataModel::centered_bernoulli({0.2}), {4.0, 6.0}, 50);
    EXPECT_FALSE(bound_delta_univariate(BoundMode::ZeroThird, two, skew, 1.0, 1.0).valid);

    // Missing moments are listed.
    MomentTable empty(50, 1, true);
    empty.set_sigma(Eigen::MatrixXd::Identity(1, 1));
    const auto rep = bound_delta_univariate(BoundMode::General, plan.map.envelope, empty, 1.0, 1.0);
    EXPECT_FALSE(rep.valid);
    EXPECT_FALSE(rep.missing.empty());

    // The general multivariate regime needs n >= d^6.
    const auto pair = example_plans("ex3.4").front();
    EXPECT_FALSE(plan_bound(pair, 63).valid);
    EXPECT_TRUE(plan_bound(pair, 64).valid);
}

TEST(BoundProperties, MonteCarloMomentsDowngradeRigor) {
    const auto m = DataModel::rademacher(1);
    auto tab = analytic_moments(m, {4.0, 6.0}, 64);
    tab.set_w(0, 2.0, {1.0, 0.01, "monte-carlo"});
    const auto rep = bound_fn_univariate(BoundMode::ZeroThird, {0.0, 4.0, 2.0, true}, tab, 1.0, 1.0);
    EXPECT_EQ(rep.rigor, "mc-estimated-moments");
    tab.set_w(0, 2.0, {1.0, 0.0, "holder-bound"});
    EXPECT_EQ(bound_fn_univariate(BoundMode::ZeroThird, {0.0, 4.0, 2.0, true}, tab, 1.0, 1.0).rigor, "rigorous");
}

TEST(Envelopes, DominatingEnvelopeExamples) {
    const GrowthEnvelope gen{1, {2.0, 1.0}, {1.0, 0.0}, false, false};
    auto e = dominating_envelope(EnvelopeFamily::UniGeneral, gen, 100, 1);
    EXPECT_DOUBLE_EQ(e.A, 4.0);
    EXPECT_DOUBLE_EQ(e.B, 4.0);
    EXPECT_DOUBLE_EQ(e.r, 1.0);
    const GrowthEnvelope sq{2, {1.0}, {0.0}, true, true};
    e = dominating_envelope(EnvelopeFamily::UniSecond, sq, 100, 1);
    EXPECT_DOUBLE_EQ(e.A, 4.0);
    EXPECT_DOUBLE_EQ(e.r, 2.0);
    e = dominating_envelope(EnvelopeFamily::ZeroThird, sq, 100, 2);
    // C = 8, a = 2: B = 2 C a^4 d^{4t-5}, A = d B.
    EXPECT_DOUBLE_EQ(e.B, 2.0 * 8.0 * 16.0 * 8.0);
    EXPECT_DOUBLE_EQ(e.A, 2.0 * e.B);
    EXPECT_TRUE(e.even);
}

TEST(Envelopes, KolmogorovExtraction) {
    const auto k = kolmogorov_from_d3(1.0, 1, 1.0);
    ASSERT_TRUE(k.has_value());
    EXPECT_NEAR(*k, 6.17 * std::pow(M_SQRT2, 0.75), 1e-12);
    EXPECT_FALSE(kolmogorov_from_d3(1.01, 1, 1.0).has_value());
    const auto small = kolmogorov_from_d3(1e-4, 4, 2.0);
    ASSERT_TRUE(small.has_value());
    EXPECT_NEAR(*small, 6.17 * std::pow((std::sqrt(std::log(4.0)) + M_SQRT2) / 2.0, 0.75) * 0.1, 1e-12);
    EXPECT_THROW(kolmogorov_from_d3(1.0, 1, 0.0), DomainError);
}

TEST(Envelopes, SteinDerivativeBounds) {
    const FnEnvelope flat{1.0, 0.0, 0.0, false};
    EXPECT_DOUBLE_EQ(stein_derivative_bound(SteinKind::Solution, 1, flat, TestBudget::unit(1), 1, {0.0}, {1.0}), 1.0);
    EXPECT_DOUBLE_EQ(stein_derivative_bound(SteinKind::Solution, 2, flat, TestBudget::unit(2), 1, {0.0}, {1.0}), 1.0);
    EXPECT_DOUBLE_EQ(stein_derivative_bound(SteinKind::Psi, 0, {9.0, 0.0, 0.0, false}, TestBudget::unit(6), 1, {0.0},
                                            {1.0}),
                     203.0 / 2.0);
    const FnEnvelope sq{0.0, 2.0, 1.0, true};
    const double b = stein_derivative_bound(SteinKind::Solution, 1, sq, TestBudget::unit(1), 1, {2.0}, {1.0});
    EXPECT_NEAR(b, M_SQRT2 * 2.0 * (2.0 + std::sqrt(2.0 / M_PI)), 1e-12);
    EXPECT_THROW(stein_derivative_bound(SteinKind::Psi, 0, flat, TestBudget::unit(4), 1, {0.0}, {1.0}), ArgumentError);
}

TEST(Requirements, OrdersFollowTheRegime) {
    const auto g = required_moments(BoundMode::General, 1.0);
    EXPECT_EQ(g.x_orders, (std::vector<double>{3.0, 4.0}));
    EXPECT_FALSE(g.needs_third);
    const auto z = required_moments(BoundMode::ZeroThird, 2.0);
    EXPECT_EQ(z.x_orders, (std::vector<double>{4.0, 6.0}));
    EXPECT_TRUE(z.needs_third);
    EXPECT_EQ(required_moments(BoundMode::Even, 6.0).x_orders.size(), 4u);
}
