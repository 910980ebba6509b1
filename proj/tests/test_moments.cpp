#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "stein_delta/moments.hpp"

using namespace stein_delta;

namespace {

std::vector<std::vector<double>> draw_rows(const DataModel& m, std::size_t count, std::uint64_t seed) {
    std::vector<std::vector<double>> rows(count, std::vector<double>(m.d));
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(seed, i);
        m.sample_row(rng, rows[i].data());
    }
    return rows;
}

// Moments by summing over the enumerated joint support.
double support_moment(const DataModel& m, const std::function<double(const std::vector<double>&)>& f) {
    double total = 0.0;
    for (const auto& [p, row] : m.joint_support()) total += p * f(row);
    return total;
}

}  // namespace

TEST(AnalyticMoments, BernoulliClosedForms) {
    for (double p : {0.1, 0.3, 0.5, 0.77}) {
        const auto m = DataModel::centered_bernoulli({p});
        const double q = 1.0 - p;
        EXPECT_NEAR(column_abs_moment(m, 0, 2.0), p * q, 1e-15);
        EXPECT_NEAR(column_abs_moment(m, 0, 3.0), p * q * (q * q + p * p), 1e-15);
        EXPECT_NEAR(column_abs_moment(m, 0, 4.0), p * q * (q * q * q + p * p * p), 1e-15);
        EXPECT_NEAR(column_raw_moment(m, 0, 3), p * q * (q - p), 1e-15);
        EXPECT_DOUBLE_EQ(column_abs_moment(m, 0, 0.0), 1.0);
    }
}

TEST(AnalyticMoments, RademacherAndGaussian) {
    const auto r = DataModel::rademacher(2);
    for (double s : {0.5, 1.0, 3.0, 7.25}) EXPECT_DOUBLE_EQ(column_abs_moment(r, 1, s), 1.0);
    const auto g = DataModel::gaussian({1.0, 2.0});
    for (int s = 1; s <= 8; ++s)
        EXPECT_NEAR(column_abs_moment(g, 1, s), oracle::normal_abs_moment_int(s, 2.0),
                    1e-12 * oracle::normal_abs_moment_int(s, 2.0));
}

TEST(AnalyticMoments, SupportEnumerationAgreesWithClosedForms) {
    const std::vector<DataModel> models = {
        DataModel::centered_bernoulli({0.2, 0.6, 0.45}), DataModel::rademacher(3),
        DataModel::rank_scores({1, 2, 3, 4}), DataModel::rank_scores({0.5, 1.0, 4.0}),
        DataModel::multinomial_indicator({0.2, 0.3, 0.5}), DataModel::mean_variance_pair(0.3)};
    for (const auto& m : models) {
        const int d = m.d;
        const auto S = model_covariance(m);
        const auto T = mixed_third_moments(m);
        for (int j = 0; j < d; ++j) {
            for (double s : {1.0, 2.5, 3.0, 4.0}) {
                const double e = support_moment(m, [&](const auto& x) { return std::pow(std::abs(x[j]), s); });
                EXPECT_NEAR(column_abs_moment(m, j, s), e, 1e-12 * std::max(1.0, e)) << model_kind_name(m.kind);
            }
            EXPECT_NEAR(support_moment(m, [&](const auto& x) { return x[j]; }), 0.0, 1e-12);
            for (int k = 0; k < d; ++k) {
                EXPECT_NEAR(S(j, k), support_moment(m, [&](const auto& x) { return x[j] * x[k]; }), 1e-12);
                for (int l = 0; l < d; ++l)
                    EXPECT_NEAR(T[(static_cast<std::size_t>(j) * d + k) * d + l],
                                support_moment(m, [&](const auto& x) { return x[j] * x[k] * x[l]; }), 1e-12);
            }
        }
    }
}

TEST(AnalyticMoments, RankScoreCovariance) {
    for (int r = 2; r <= 6; ++r) {
        std::vector<double> J(r);
        for (int k = 0; k < r; ++k) J[k] = k + 1.0;
        const auto S = model_covariance(DataModel::rank_scores(J));
        for (int j = 0; j < r; ++j) {
            EXPECT_NEAR(S(j, j), (r - 1.0) / r, 1e-14);
            EXPECT_NEAR(S.row(j).sum(), 0.0, 1e-14);
            for (int k = 0; k < r; ++k)
                if (k != j) { EXPECT_NEAR(S(j, k), -1.0 / r, 1e-14); }
        }
    }
}

TEST(AnalyticMoments, MultinomialCovarianceAnnihilatesRootP) {
    const std::vector<double> p = {0.1, 0.25, 0.3, 0.35};
    const auto S = model_covariance(DataModel::multinomial_indicator(p));
    Eigen::VectorXd v(4);
    for (int j = 0; j < 4; ++j) v[j] = std::sqrt(p[j]);
    EXPECT_LT((S * v).norm(), 1e-14);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(S(j, j), 1.0 - p[j], 1e-15);
}

TEST(AnalyticMoments, LyapunovHoldsForAllKinds) {
    const std::vector<double> orders = {0.5, 1.0, 2.0, 2.5, 3.0, 4.0, 6.0, 8.0};
    const std::vector<DataModel> models = {DataModel::centered_bernoulli({0.05, 0.5}), DataModel::rademacher(1),
                                           DataModel::rank_scores({1, 2, 3}),
                                           DataModel::multinomial_indicator({0.1, 0.9}),
                                           DataModel::mean_variance_pair(0.8), DataModel::gaussian({0.3})};
    for (const auto& m : models) EXPECT_TRUE(analytic_moments(m, orders, 10).lyapunov_violations().empty());
}

TEST(MomentTable, LyapunovDetectsInconsistentEntries) {
    MomentTable t(3, 1, true);
    t.set_abs(0, 0, 2.0, 1.0);
    t.set_abs(0, 0, 4.0, 0.5);  // E X^4 < (E X^2)^2 is impossible
    EXPECT_EQ(t.lyapunov_violations().size(), 1u);
}

TEST(MomentTable, RowSumsScaleForIidAndSumForNonIid) {
    MomentTable iid(7, 2, true);
    iid.set_abs(0, 1, 3.0, 0.25);
    EXPECT_DOUBLE_EQ(*iid.row_sum_abs(1, 3.0), 1.75);
    EXPECT_FALSE(iid.row_sum_abs(0, 3.0).has_value());

    MomentTable rows(3, 1, false);
    rows.set_abs(0, 0, 4.0, 1.0);
    rows.set_abs(1, 0, 4.0, 2.0);
    EXPECT_FALSE(rows.row_sum_abs(0, 4.0).has_value());
    rows.set_abs(2, 0, 4.0, 4.0);
    EXPECT_DOUBLE_EQ(*rows.row_sum_abs(0, 4.0), 7.0);
}

TEST(MomentTable, SigmaValidation) {
    MomentTable t(5, 2, true);
    Eigen::MatrixXd a(2, 2);
    a << 1.0, 0.5, 0.4, 1.0;
    EXPECT_THROW(t.set_sigma(a), DomainError);
    a << 1.0, 2.0, 2.0, 1.0;
    EXPECT_THROW(t.set_sigma(a), DomainError);
    a << 1.0, -1.0, -1.0, 1.0;
    EXPECT_NO_THROW(t.set_sigma(a));
    EXPECT_DOUBLE_EQ(t.sigma_k(1), 1.0);
    EXPECT_THROW(t.set_sigma(Eigen::MatrixXd::Identity(3, 3)), ArgumentError);
}

TEST(MomentTable, JsonRoundTrip) {
    auto t = analytic_moments(DataModel::rank_scores({1, 2, 3}), {2.0, 3.0, 4.5}, 40);
    t.set_w(0, 2.5, {1.25, 0.01, "monte-carlo"});
    t.set_w(2, 1.0, {0.8, 0.0, "holder-bound"});
    const auto back = MomentTable::from_json(t.to_json());
    EXPECT_EQ(back.to_json().dump(), t.to_json().dump());
    EXPECT_EQ(back.w_moment(0, 2.5)->provenance, "monte-carlo");
    EXPECT_DOUBLE_EQ(*back.abs_moment(0, 1, 4.5), *t.abs_moment(0, 1, 4.5));
}

TEST(EmpiricalMoments, WithinThreeStandardErrors) {
    const auto m = DataModel::multinomial_indicator({0.2, 0.3, 0.5});
    const auto rows = draw_rows(m, 200000, 11);
    const auto emp = empirical_moments(rows, {2.0, 3.0, 4.0});
    const auto S = model_covariance(m);
    const auto T = mixed_third_moments(m);
    for (int j = 0; j < 3; ++j) {
        for (double s : {2.0, 3.0, 4.0}) {
            const double se = emp.abs_std_error[j].at(s);
            EXPECT_LT(std::abs(*emp.table.abs_moment(0, j, s) - column_abs_moment(m, j, s)), 4.0 * se + 1e-4);
        }
        for (int k = 0; k < 3; ++k)
            EXPECT_LT(std::abs(emp.table.sigma()(j, k) - S(j, k)), 4.0 * emp.sigma_std_error(j, k) + 1e-4);
    }
    for (std::size_t a = 0; a < T.size(); ++a)
        EXPECT_LT(std::abs(emp.table.mixed_third(0)[a] - T[a]), 4.0 * emp.mixed_third_std_error[a] + 1e-4);
}

TEST(EmpiricalMoments, RejectsDegenerateInput) {
    EXPECT_THROW(empirical_moments({{1.0}}, {2.0}), ArgumentError);
    EXPECT_THROW(empirical_moments({{1.0, 2.0}, {1.0}}, {2.0}), ArgumentError);
}

TEST(WMoments, ExactEvenMomentsMatchBinomialSums) {
    for (std::int64_t n : {1, 4, 9, 30}) {
        for (double p : {0.5, 0.2}) {
            const auto m = DataModel::centered_bernoulli({p});
            for (int q : {2, 4, 6}) {
                const double nd = static_cast<double>(n);
                const double exact = oracle::binomial_expectation(n, p, [&](std::int64_t k) {
                    return std::pow((static_cast<double>(k) - nd * p) / std::sqrt(nd), q);
                });
                EXPECT_NEAR(exact_w_even_moment(m, n, 0, q), exact, 1e-10 * std::max(1.0, exact));
            }
        }
    }
}

TEST(WMoments, RademacherAbsoluteCube) {
    const auto m = DataModel::rademacher(1);
    const double exact = oracle::binomial_expectation(4, 0.5, [](std::int64_t k) {
        return std::pow(std::abs(2.0 * static_cast<double>(k) - 4.0) / 2.0, 3);
    });
    EXPECT_NEAR(exact, oracle::kRademacherAbsCubeW4, 1e-14);

    const auto mc = w_moment(m, 4, 0, 3.0, {WMomentMode::MonteCarlo, 200000, 5, 1});
    EXPECT_EQ(mc.provenance, "monte-carlo");
    EXPECT_LT(std::abs(mc.value - oracle::kRademacherAbsCubeW4), 3.0 * mc.std_error);

    const auto ev = w_moment(m, 4, 0, 3.0, {WMomentMode::EvenMoment, 0, 0, 1});
    EXPECT_NEAR(ev.value, std::pow(2.5, 0.75), 1e-12);
    EXPECT_GE(ev.value, oracle::kRademacherAbsCubeW4);
    EXPECT_NEAR(w_moment(m, 4, 0, 4.0, {WMomentMode::EvenMoment, 0, 0, 1}).value, 2.5, 1e-12);
}

TEST(WMoments, HolderBoundsDominateExactValues) {
    for (double p : {0.1, 0.5}) {
        const auto m = DataModel::centered_bernoulli({p});
        for (double r : {0.5, 1.0, 1.5, 2.0}) {
            const double exact = oracle::binomial_expectation(16, p, [&](std::int64_t k) {
                return std::pow(std::abs(static_cast<double>(k) - 16.0 * p) / 4.0, r);
            });
            const auto h = w_moment(m, 16, 0, r, {WMomentMode::Holder, 0, 0, 1});
            EXPECT_EQ(h.provenance, "holder-bound");
            EXPECT_GE(h.value, exact * (1.0 - 1e-12));
        }
        EXPECT_THROW(w_moment(m, 16, 0, 2.5, {WMomentMode::Holder, 0, 0, 1}), CapabilityError);
    }
}

TEST(WMoments, MonteCarloIndependentOfThreadCount) {
    const auto m = DataModel::rank_scores({1, 2, 3});
    WMomentOptions o{WMomentMode::MonteCarlo, 20000, 99, 1};
    const auto one = w_moment(m, 12, 1, 3.0, o);
    for (int t : {2, 3}) {
        o.threads = t;
        const auto many = w_moment(m, 12, 1, 3.0, o);
        EXPECT_NEAR(many.value, one.value, 1e-10);
        EXPECT_NEAR(many.std_error, one.std_error, 1e-10);
    }
}

TEST(SumSampler, InversionIsMonotoneAndMatchesSupport) {
    const auto m = DataModel::centered_bernoulli({0.3});
    SumSampler s(m, 10);
    ASSERT_TRUE(s.invertible());
    double prev = -1e300;
    for (int i = 1; i < 1000; ++i) {
        const double v = s.sum_from_uniform(i / 1000.0);
        EXPECT_GE(v, prev);
        const double k = v + 3.0;
        EXPECT_NEAR(k, std::round(k), 1e-12);
        prev = v;
    }
    EXPECT_FALSE(SumSampler(DataModel::rank_scores({1, 2}), 5).invertible());
}

TEST(DataModel, FactoryValidation) {
    EXPECT_THROW(DataModel::centered_bernoulli({1.0}), ArgumentError);
    EXPECT_THROW(DataModel::multinomial_indicator({0.5, 0.4}), ArgumentError);
    EXPECT_THROW(DataModel::mean_variance_pair(0.5), ArgumentError);
    EXPECT_THROW(DataModel::rank_scores({1.0}), ArgumentError);
    EXPECT_THROW(DataModel::gaussian({-1.0}), ArgumentError);
}
