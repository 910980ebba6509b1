#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include "json.hpp"

#include "stein_delta/bounds.hpp"
#include "stein_delta/errors.hpp"
#include "stein_delta/moments.hpp"
#include "stein_delta/parallel.hpp"
#include "stein_delta/rng.hpp"
#include "stein_delta/statistics.hpp"

namespace stein_delta {

// ---------------------------------------------------------------------------
// Test functions with exact derivative budgets.
//   cosine-wave:  h(x) = sin(<a, x> + b)
//   product-form: h(x) = prod_l sin(a_l x_l + b)
// Every order-k mixed partial is bounded by (max |a_l|)^k in both families.

struct SmoothTestFunction {
    enum class Family { CosineWave, ProductForm };
    Family family = Family::CosineWave;
    std::vector<double> a{1.0};
    double b = 0.0;

    static SmoothTestFunction wave(std::vector<double> a, double b = 0.0) {
        return {Family::CosineWave, std::move(a), b};
    }
    static SmoothTestFunction product(std::vector<double> a, double b = 0.0) {
        return {Family::ProductForm, std::move(a), b};
    }
    static SmoothTestFunction for_plan(const ExperimentPlan& plan) { return wave(plan.h_a, plan.h_b); }

    int dimension() const { return static_cast<int>(a.size()); }
    double scale() const {
        double s = 0.0;
        for (double v : a) s = std::max(s, std::abs(v));
        return s;
    }
    double operator()(const double* x) const {
        if (family == Family::CosineWave) {
            double arg = b;
            for (std::size_t l = 0; l < a.size(); ++l) arg += a[l] * x[l];
            return std::sin(arg);
        }
        double prod = 1.0;
        for (std::size_t l = 0; l < a.size(); ++l) prod *= std::sin(a[l] * x[l] + b);
        return prod;
    }
    double operator()(double x) const { return (*this)(&x); }
    TestBudget budget(int order = 6) const {
        std::vector<double> norms;
        for (int k = 1; k <= order; ++k) norms.push_back(std::pow(scale(), k));
        return TestBudget(norms);
    }
};

// ---------------------------------------------------------------------------
// Distance estimates

struct DistanceEstimate {
    double value = 0.0;       // |mean h(T) - mean h(Y)|
    double difference = 0.0;  // signed mean h(T) - mean h(Y)
    double std_error = 0.0;
    std::int64_t replicates = 0;
    std::uint64_t seed = 0;
    bool coupled = false;

    nlohmann::json to_json() const {
        return {{"value", value},           {"difference", difference}, {"std_error", std_error},
                {"replicates", replicates}, {"seed", seed},             {"coupled", coupled}};
    }
};

enum class Coupling { Independent, Quantile };

// Generic estimator from two samplers writing into caller buffers. Stream ids: the
// statistic uses kStatistic + i and the limit kLimit + i for replicate i.
template <class DrawT, class DrawY>
DistanceEstimate estimate_delta_generic(const SmoothTestFunction& h, int dim, std::int64_t replicates,
                                        std::uint64_t seed, int threads, DrawT make_t, DrawY make_y) {
    if (replicates < 2) throw ArgumentError("estimate_delta_h: need at least two replicates");
    auto channels = reduce_replicates(replicates, 2, threads, [&](std::int64_t b, std::int64_t e, Channels& ch) {
        auto draw_t = make_t();
        auto draw_y = make_y();
        std::vector<double> buf(dim);
        for (std::int64_t i = b; i < e; ++i) {
            Rng rt(seed, streams::kStatistic + static_cast<std::uint64_t>(i));
            draw_t(rt, buf.data());
            ch[0].add(h(buf.data()));
            Rng ry(seed, streams::kLimit + static_cast<std::uint64_t>(i));
            draw_y(ry, buf.data());
            ch[1].add(h(buf.data()));
        }
    });
    DistanceEstimate est;
    est.difference = channels[0].mean - channels[1].mean;
    est.value = std::abs(est.difference);
    est.std_error = std::hypot(channels[0].std_error(), channels[1].std_error());
    est.replicates = replicates;
    est.seed = seed;
    return est;
}

inline DistanceEstimate estimate_delta_h(const ExperimentPlan& plan, const SmoothTestFunction& h, std::int64_t n,
                                         std::int64_t replicates, std::uint64_t seed, int threads = 1,
                                         Coupling coupling = Coupling::Independent) {
    if (replicates < 1000) throw ArgumentError("estimate_delta_h: replicates must be >= 1000");
    if (h.dimension() != plan.map.m) throw ArgumentError("estimate_delta_h: test function dimension must equal m");
    const LimitDescriptor limit = resolved_limit(plan);
    const StatisticSampler stat_proto(plan.map, plan.model, n);
    const LimitSampler limit_proto(limit, &plan.map);

    if (coupling == Coupling::Independent) {
        return estimate_delta_generic(
            h, plan.map.m, replicates, seed, threads,
            [&] {
                return [s = stat_proto](Rng& rng, double* out) mutable { s.draw(rng, out); };
            },
            [&] {
                return [s = limit_proto](Rng& rng, double* out) mutable { s.draw(rng, out); };
            });
    }

    // Quantile coupling: one uniform drives both the lattice sum and the Gaussian.
    if (!stat_proto.sums().invertible() || plan.map.m != 1)
        throw CapabilityError("estimate_delta_h: quantile coupling needs a one-dimensional lattice model");
    auto channels = reduce_replicates(replicates, 1, threads, [&](std::int64_t b, std::int64_t e, Channels& ch) {
        StatisticSampler stat = stat_proto;
        double t = 0.0;
        for (std::int64_t i = b; i < e; ++i) {
            Rng rng(seed, streams::kCoupled + static_cast<std::uint64_t>(i));
            const double u = rng.uniform_open();
            const double sum = stat.sums().sum_from_uniform(u);
            stat.from_sum(&sum, &t);
            const double y = limit_proto.from_standard_normal(normal_quantile(u));
            ch[0].add(h(t) - h(y));
        }
    });
    DistanceEstimate est;
    est.difference = channels[0].mean;
    est.value = std::abs(est.difference);
    est.std_error = channels[0].std_error();
    est.replicates = replicates;
    est.seed = seed;
    est.coupled = true;
    return est;
}

// ---------------------------------------------------------------------------
// Dominance

struct Verdict {
    enum class Kind { Dominated, Violated, Inconclusive };
    Kind kind = Kind::Dominated;
    double margin = 0.0;  // estimate - k SE - bound (positive only when violated)

    std::string name() const {
        switch (kind) {
            case Kind::Dominated: return "dominated";
            case Kind::Violated: return "violated";
            case Kind::Inconclusive: return "inconclusive";
        }
        return "?";
    }
};

struct DominanceRule {
    double se_multiplier = 3.0;
    double inconclusive_ratio = 0.5;  // SE above ratio * bound is inconclusive
};

// A violation outranks the inconclusive rule: a clear excess is reported whatever the noise.
inline Verdict verify_bound(const DistanceEstimate& est, const BoundReport& report, DominanceRule rule = {}) {
    const double bound = report.checked_value();
    const double lower = est.value - rule.se_multiplier * est.std_error;
    Verdict v;
    v.margin = lower - bound;
    if (lower > bound)
        v.kind = Verdict::Kind::Violated;
    else if (est.std_error > rule.inconclusive_ratio * bound)
        v.kind = Verdict::Kind::Inconclusive;
    else
        v.kind = Verdict::Kind::Dominated;
    return v;
}

// ---------------------------------------------------------------------------
// Rate fits

struct RateFit {
    double slope = 0.0, intercept = 0.0, r_squared = 0.0;
    double slope_se = 0.0;        // from OLS residuals
    double slope_se_noise = 0.0;  // propagated Monte Carlo error of the points
    double ci95_half_width = 0.0;
    std::vector<std::pair<std::int64_t, DistanceEstimate>> points;

    double lower95() const { return slope - ci95_half_width; }
    double upper95() const { return slope + ci95_half_width; }

    nlohmann::json to_json() const {
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& [n, e] : points) pts.push_back({{"n", n}, {"estimate", e.value}, {"std_error", e.std_error}});
        return {{"slope", slope},
                {"intercept", intercept},
                {"r_squared", r_squared},
                {"slope_se", slope_se},
                {"slope_se_noise", slope_se_noise},
                {"ci95", {lower95(), upper95()}},
                {"points", pts}};
    }
};

// OLS of log estimate on log n. The 95% half-width uses Student t on the residual error
// combined in quadrature with 1.96 times the propagated noise error.
inline RateFit fit_rate(const std::vector<std::pair<std::int64_t, DistanceEstimate>>& points) {
    if (points.size() < 3) throw PreconditionError("fit_rate: need at least 3 points");
    std::string noisy;
    for (const auto& [n, e] : points)
        if (!(e.value > 3.0 * e.std_error) || !(e.value > 0.0)) noisy += (noisy.empty() ? "" : ", ") + std::to_string(n);
    if (!noisy.empty()) throw PreconditionError("fit_rate: estimates not above 3 SE at n = " + noisy);

    const double k = static_cast<double>(points.size());
    double mx = 0.0, my = 0.0;
    for (const auto& [n, e] : points) {
        mx += std::log(static_cast<double>(n));
        my += std::log(e.value);
    }
    mx /= k;
    my /= k;
    double sxx = 0.0, sxy = 0.0, syy = 0.0, noise = 0.0;
    for (const auto& [n, e] : points) {
        const double dx = std::log(static_cast<double>(n)) - mx, dy = std::log(e.value) - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
        const double rel = e.std_error / e.value;
        noise += dx * dx * rel * rel;
    }
    if (!(sxx > 0.0)) throw PreconditionError("fit_rate: sample sizes must differ");
    RateFit fit;
    fit.points = points;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    const double ssr = std::max(syy - fit.slope * sxy, 0.0);
    fit.r_squared = syy > 0.0 ? 1.0 - ssr / syy : 1.0;
    fit.slope_se = k > 2.0 ? std::sqrt(ssr / (k - 2.0) / sxx) : 0.0;
    fit.slope_se_noise = std::sqrt(noise) / sxx;
    const double tq = k > 2.0 ? boost::math::quantile(boost::math::students_t(k - 2.0), 0.975) : 0.0;
    fit.ci95_half_width = std::hypot(tq * fit.slope_se, 1.96 * fit.slope_se_noise);
    return fit;
}

// ---------------------------------------------------------------------------
// Point-mass floor of the Kolmogorov distance for Rademacher sums.

struct PointMass {
    double exact = 0.0;      // P(S_n = 0) = C(n, n/2) 2^{-n}
    double asymptote = 0.0;  // sqrt(2 / (pi n))
    double ratio() const { return exact / asymptote; }
};

inline PointMass point_mass_check(std::int64_t n) {
    if (n < 2 || n % 2 != 0) throw ArgumentError("point_mass_check: n must be a positive even integer");
    if (n > 1000000) throw ArgumentError("point_mass_check: n must be <= 1e6");
    const double nd = static_cast<double>(n);
    PointMass pm;
    pm.exact = std::exp(std::lgamma(nd + 1.0) - 2.0 * std::lgamma(nd / 2.0 + 1.0) - nd * std::log(2.0));
    pm.asymptote = std::sqrt(2.0 / (M_PI * nd));
    return pm;
}

// Monte Carlo frequency of S_n = 0; its SE is sqrt(p(1-p)/N).
inline DistanceEstimate point_mass_mc(std::int64_t n, std::int64_t replicates, std::uint64_t seed, int threads = 1) {
    point_mass_check(n);
    const DataModel model = DataModel::rademacher(1);
    const SumSampler proto(model, n);
    auto ch = reduce_replicates(replicates, 1, threads, [&](std::int64_t b, std::int64_t e, Channels& c) {
        SumSampler s = proto;
        double sum = 0.0;
        for (std::int64_t i = b; i < e; ++i) {
            Rng rng(seed, streams::kAuxiliary + static_cast<std::uint64_t>(i));
            s.draw(rng, &sum);
            c[0].add(sum == 0.0 ? 1.0 : 0.0);
        }
    });
    DistanceEstimate est;
    est.value = est.difference = ch[0].mean;
    est.std_error = ch[0].std_error();
    est.replicates = replicates;
    est.seed = seed;
    return est;
}

// ---------------------------------------------------------------------------
// Stein-solution derivative check in one dimension.
// f(w) = -int_0^inf (E h~(e^{-s} w + sqrt(1 - e^{-2s}) Z) - E h~(Z)) ds,  h~ = h o g.
// Derivatives come from central differences of the integral under common random numbers,
// so the E h~(Z) term cancels.

struct SteinQuadrature {
    double s_max = 20.0;
    int steps = 400;
    std::int64_t mc_reps = 20000;
    double slack = 0.10;
};

struct SteinPointResult {
    double w = 0.0;
    int order = 1;
    double estimate = 0.0;
    double bound = 0.0;
    bool pass = false;
    double tail = 0.0;  // e^{-s_max}
    std::string diagnostic;
};

inline std::vector<SteinPointResult> stein_solution_check(const FnEnvelope& env, const std::function<double(double)>& g,
                                                          const SmoothTestFunction& h, double sigma,
                                                          const std::vector<double>& points, int order,
                                                          SteinQuadrature quad, std::uint64_t seed) {
    if (order < 1 || order > 2) throw ArgumentError("stein_solution_check: order must be 1 or 2");
    if (h.dimension() != 1) throw ArgumentError("stein_solution_check: one-dimensional test functions only");
    if (!(sigma > 0.0)) throw DomainError("stein_solution_check: sigma must be positive");
    if (quad.steps < 2 || quad.mc_reps < 2) throw ArgumentError("stein_solution_check: bad quadrature settings");

    std::vector<double> z(static_cast<std::size_t>(quad.mc_reps));
    for (std::size_t j = 0; j < z.size(); ++j) {
        Rng rng(seed, streams::kAuxiliary + j);
        z[j] = sigma * rng.normal();
    }
    auto htilde = [&](double x) { return h(g(x)); };
    const double ds = quad.s_max / quad.steps;
    const TestBudget budget = h.budget(std::max(order, 1));

    std::vector<SteinPointResult> out;
    for (double w : points) {
        const double delta = 1e-4 * (1.0 + std::abs(w));
        double integral = 0.0;
        for (int step = 0; step <= quad.steps; ++step) {
            const double s = step * ds;
            const double decay = std::exp(-s), spread = std::sqrt(std::max(0.0, 1.0 - std::exp(-2.0 * s)));
            double acc = 0.0;
            for (double zj : z) {
                const double base = spread * zj;
                const double up = htilde(decay * (w + delta) + base), down = htilde(decay * (w - delta) + base);
                if (order == 1)
                    acc += (up - down) / (2.0 * delta);
                else
                    acc += (up - 2.0 * htilde(decay * w + base) + down) / (delta * delta);
            }
            const double weight = (step == 0 || step == quad.steps) ? 0.5 : 1.0;
            integral += weight * acc / static_cast<double>(z.size());
        }
        SteinPointResult r;
        r.w = w;
        r.order = order;
        r.estimate = -integral * ds;
        r.bound = stein_derivative_bound(SteinKind::Solution, order, env, budget, 1, {w}, {sigma});
        r.tail = std::exp(-quad.s_max);
        r.pass = std::abs(r.estimate) <= r.bound * (1.0 + quad.slack);
        if (!r.pass) {
            std::ostringstream os;
            os << "|f^(" << order << ")(" << w << ")| = " << std::abs(r.estimate) << " exceeds bound " << r.bound
               << " with slack " << quad.slack << "; truncated tail e^{-s_max} = " << r.tail;
            r.diagnostic = os.str();
        }
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sweeps over a plan's grid

struct VerifyRow {
    std::int64_t n = 0;
    DistanceEstimate estimate;
    BoundReport report;
    Verdict verdict;
};

inline std::vector<VerifyRow> verify_plan(const ExperimentPlan& plan, int threads = 1, DominanceRule rule = {}) {
    plan.validate();
    const auto h = SmoothTestFunction::for_plan(plan);
    std::vector<VerifyRow> rows;
    for (std::size_t idx = 0; idx < plan.n_grid.size(); ++idx) {
        const std::int64_t n = plan.n_grid[idx];
        VerifyRow row;
        row.n = n;
        row.report = plan_bound(plan, n, threads);
        row.estimate = estimate_delta_h(plan, h, n, plan.replicates, plan.seed + idx, threads);
        if (row.report.valid) row.verdict = verify_bound(row.estimate, row.report, rule);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string verify_csv(const std::vector<VerifyRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "n,estimate,std_error,bound,theorem,dominated\n";
    for (const auto& r : rows) {
        os << r.n << ',' << r.estimate.value << ',' << r.estimate.std_error << ',';
        if (r.report.valid)
            os << *r.report.value;
        else
            os << "NA";
        os << ',' << r.report.theorem << ',';
        if (!r.report.valid)
            os << "NA";
        else
            os << (r.verdict.kind == Verdict::Kind::Violated ? "false" : "true");
        os << '\n';
    }
    return os.str();
}

struct RateOptions {
    std::vector<std::int64_t> grid{64, 128, 256, 512, 1024, 2048, 4096};
    std::int64_t base_replicates = 1000000;
    bool scale_with_n = false;  // replicates proportional to n / grid.front()
    Coupling coupling = Coupling::Quantile;
};

// Replicates proportional to n keep SE / estimate roughly constant along an O(1/n) sweep.
inline std::vector<std::pair<std::int64_t, DistanceEstimate>> rate_sweep(const ExperimentPlan& plan,
                                                                         const RateOptions& opt, int threads = 1) {
    const auto h = SmoothTestFunction::for_plan(plan);
    std::vector<std::pair<std::int64_t, DistanceEstimate>> pts;
    for (std::size_t idx = 0; idx < opt.grid.size(); ++idx) {
        const std::int64_t n = opt.grid[idx];
        const std::int64_t reps =
            opt.scale_with_n ? opt.base_replicates * n / opt.grid.front() : opt.base_replicates;
        pts.emplace_back(n, estimate_delta_h(plan, h, n, reps, plan.seed + 1000 + idx, threads, opt.coupling));
    }
    return pts;
}

}  // namespace stein_delta
