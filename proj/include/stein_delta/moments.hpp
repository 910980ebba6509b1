#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "stein_delta/core_math.hpp"
#include "stein_delta/errors.hpp"
#include "stein_delta/parallel.hpp"
#include "stein_delta/rng.hpp"

namespace stein_delta {

// ---------------------------------------------------------------------------
// Data models

enum class ModelKind {
    CenteredBernoulli,     // independent columns B_j - p_j
    Rademacher,            // independent +-1 columns
    RankScores,            // normalised scores under a uniform random permutation
    MultinomialIndicator,  // (I_j - p_j) / sqrt(p_j) for one categorical trial
    MeanVariancePair,      // (V, V^2 - var) for V a centred Bernoulli(p)
    Gaussian,              // independent N(0, sigma_j^2) columns
    UserSampler
};

inline std::string model_kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::CenteredBernoulli: return "centered-bernoulli";
        case ModelKind::Rademacher: return "rademacher";
        case ModelKind::RankScores: return "rank-scores";
        case ModelKind::MultinomialIndicator: return "multinomial-indicator";
        case ModelKind::MeanVariancePair: return "mean-variance-pair";
        case ModelKind::Gaussian: return "gaussian";
        case ModelKind::UserSampler: return "user-sampler";
    }
    return "unknown";
}

using Atoms = std::vector<std::pair<double, double>>;  // (probability, value)

struct DataModel {
    ModelKind kind = ModelKind::Rademacher;
    int d = 1;
    bool iid_rows = true;
    std::vector<double> probs;   // bernoulli / multinomial / pair parameter
    std::vector<double> scores;  // raw rank scores J(1..r)
    std::vector<double> sigmas;  // gaussian column scales
    std::function<void(Rng&, double*)> user_sampler;
    std::vector<double> score_cache;  // normalised scores, filled by rank_scores()

    static DataModel centered_bernoulli(std::vector<double> p) {
        if (p.empty()) throw ArgumentError("centered-bernoulli: need at least one column");
        for (double v : p)
            if (!(v > 0.0 && v < 1.0)) throw ArgumentError("centered-bernoulli: p must lie in (0,1)");
        DataModel m;
        m.kind = ModelKind::CenteredBernoulli;
        m.d = static_cast<int>(p.size());
        m.probs = std::move(p);
        return m;
    }
    static DataModel rademacher(int d = 1) {
        if (d < 1) throw ArgumentError("rademacher: d must be >= 1");
        DataModel m;
        m.kind = ModelKind::Rademacher;
        m.d = d;
        return m;
    }
    static DataModel rank_scores(std::vector<double> J) {
        if (J.size() < 2) throw ArgumentError("rank-scores: need r >= 2 scores");
        DataModel m;
        m.kind = ModelKind::RankScores;
        m.d = static_cast<int>(J.size());
        m.scores = std::move(J);
        m.score_cache = m.normalized_scores();
        return m;
    }
    static DataModel multinomial_indicator(std::vector<double> p) {
        if (p.size() < 2) throw ArgumentError("multinomial-indicator: need r >= 2 cells");
        double total = 0.0;
        for (double v : p) {
            if (!(v > 0.0 && v < 1.0))
                throw ArgumentError("multinomial-indicator: probabilities must lie in (0,1)");
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-12)
            throw ArgumentError("multinomial-indicator: probabilities must sum to 1");
        DataModel m;
        m.kind = ModelKind::MultinomialIndicator;
        m.d = static_cast<int>(p.size());
        m.probs = std::move(p);
        return m;
    }
    static DataModel mean_variance_pair(double p) {
        if (!(p > 0.0 && p < 1.0) || std::abs(p - 0.5) < 1e-15)
            throw ArgumentError("mean-variance-pair: p must lie in (0,1) and differ from 1/2");
        DataModel m;
        m.kind = ModelKind::MeanVariancePair;
        m.d = 2;
        m.probs = {p};
        return m;
    }
    static DataModel gaussian(std::vector<double> sd) {
        if (sd.empty()) throw ArgumentError("gaussian: need at least one column");
        for (double s : sd)
            if (!(s >= 0.0)) throw ArgumentError("gaussian: scales must be non-negative");
        DataModel m;
        m.kind = ModelKind::Gaussian;
        m.d = static_cast<int>(sd.size());
        m.sigmas = std::move(sd);
        return m;
    }
    static DataModel user(int d, std::function<void(Rng&, double*)> sampler) {
        if (d < 1 || !sampler) throw ArgumentError("user-sampler: need d >= 1 and a sampler");
        DataModel m;
        m.kind = ModelKind::UserSampler;
        m.d = d;
        m.user_sampler = std::move(sampler);
        return m;
    }

    bool analytic() const { return kind != ModelKind::UserSampler; }

    // (J(k) - mean J) / sigma_J with sigma_J^2 = sum (J - mean)^2 / (r - 1).
    std::vector<double> normalized_scores() const {
        if (!score_cache.empty()) return score_cache;
        const double r = static_cast<double>(scores.size());
        const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / r;
        double ss = 0.0;
        for (double v : scores) ss += (v - mean) * (v - mean);
        const double sd = std::sqrt(ss / (r - 1.0));
        if (!(sd > 0.0)) throw ArgumentError("rank-scores: scores must not be constant");
        std::vector<double> x;
        for (double v : scores) x.push_back((v - mean) / sd);
        return x;
    }

    double pair_variance() const { return probs[0] * (1.0 - probs[0]); }

    // Law of column j as a finite list of atoms (all kinds but gaussian and user).
    Atoms marginal_atoms(int j) const {
        switch (kind) {
            case ModelKind::CenteredBernoulli: {
                const double p = probs[j];
                return {{p, 1.0 - p}, {1.0 - p, -p}};
            }
            case ModelKind::Rademacher: return {{0.5, 1.0}, {0.5, -1.0}};
            case ModelKind::RankScores: {
                Atoms a;
                const double w = 1.0 / static_cast<double>(d);
                for (double x : normalized_scores()) a.emplace_back(w, x);
                return a;
            }
            case ModelKind::MultinomialIndicator: {
                const double p = probs[j];
                return {{p, (1.0 - p) / std::sqrt(p)}, {1.0 - p, -std::sqrt(p)}};
            }
            case ModelKind::MeanVariancePair: {
                const double p = probs[0], v = pair_variance();
                if (j == 0) return {{p, 1.0 - p}, {1.0 - p, -p}};
                return {{p, (1.0 - p) * (1.0 - p) - v}, {1.0 - p, p * p - v}};
            }
            default: throw CapabilityError("marginal_atoms: model has no finite marginal law");
        }
    }

    // Finite joint support as (probability, row); used for low-dimensional kinds and as
    // an enumeration oracle.
    std::vector<std::pair<double, std::vector<double>>> joint_support() const {
        std::vector<std::pair<double, std::vector<double>>> out;
        switch (kind) {
            case ModelKind::CenteredBernoulli:
            case ModelKind::Rademacher: {
                if (d > 16) throw RangeError("joint_support: too many columns");
                for (std::uint32_t mask = 0; mask < (1u << d); ++mask) {
                    double prob = 1.0;
                    std::vector<double> row(d);
                    for (int j = 0; j < d; ++j) {
                        const auto atoms = marginal_atoms(j);
                        const auto& a = atoms[(mask >> j) & 1u];
                        prob *= a.first;
                        row[j] = a.second;
                    }
                    out.emplace_back(prob, row);
                }
                return out;
            }
            case ModelKind::RankScores: {
                if (d > 8) throw RangeError("joint_support: permutation enumeration limited to r <= 8");
                const auto x = normalized_scores();
                std::vector<int> perm(d);
                std::iota(perm.begin(), perm.end(), 0);
                double count = 1.0;
                for (int i = 2; i <= d; ++i) count *= i;
                do {
                    std::vector<double> row(d);
                    for (int j = 0; j < d; ++j) row[j] = x[perm[j]];
                    out.emplace_back(1.0 / count, row);
                } while (std::next_permutation(perm.begin(), perm.end()));
                return out;
            }
            case ModelKind::MultinomialIndicator: {
                for (int c = 0; c < d; ++c) {
                    std::vector<double> row(d);
                    for (int j = 0; j < d; ++j)
                        row[j] = ((c == j ? 1.0 : 0.0) - probs[j]) / std::sqrt(probs[j]);
                    out.emplace_back(probs[c], row);
                }
                return out;
            }
            case ModelKind::MeanVariancePair: {
                const double p = probs[0], v = pair_variance();
                out.push_back({p, {1.0 - p, (1.0 - p) * (1.0 - p) - v}});
                out.push_back({1.0 - p, {-p, p * p - v}});
                return out;
            }
            default: throw CapabilityError("joint_support: model has no finite support");
        }
    }

    void sample_row(Rng& rng, double* out) const {
        switch (kind) {
            case ModelKind::CenteredBernoulli:
                for (int j = 0; j < d; ++j) out[j] = (rng.uniform() < probs[j] ? 1.0 : 0.0) - probs[j];
                return;
            case ModelKind::Rademacher:
                for (int j = 0; j < d; ++j) out[j] = (rng() >> 63) ? 1.0 : -1.0;
                return;
            case ModelKind::RankScores: {
                // Fisher-Yates over the normalised scores.
                for (int j = 0; j < d; ++j) out[j] = score_cache[j];
                for (int j = d - 1; j > 0; --j) {
                    const auto k = static_cast<int>(rng.below(static_cast<std::uint64_t>(j) + 1));
                    std::swap(out[j], out[k]);
                }
                return;
            }
            case ModelKind::MultinomialIndicator: {
                const double u = rng.uniform();
                double acc = 0.0;
                int cell = d - 1;
                for (int c = 0; c < d; ++c) {
                    acc += probs[c];
                    if (u < acc) {
                        cell = c;
                        break;
                    }
                }
                for (int j = 0; j < d; ++j)
                    out[j] = ((cell == j ? 1.0 : 0.0) - probs[j]) / std::sqrt(probs[j]);
                return;
            }
            case ModelKind::MeanVariancePair: {
                const double p = probs[0];
                const double v = (rng.uniform() < p ? 1.0 : 0.0) - p;
                out[0] = v;
                out[1] = v * v - pair_variance();
                return;
            }
            case ModelKind::Gaussian:
                for (int j = 0; j < d; ++j) out[j] = sigmas[j] * rng.normal();
                return;
            case ModelKind::UserSampler: user_sampler(rng, out); return;
        }
    }
};

// E|X_j|^s for one observation of an analytic model.
inline double column_abs_moment(const DataModel& model, int j, double s) {
    if (!model.analytic()) throw CapabilityError("column_abs_moment: user-sampler has no closed form");
    if (model.kind == ModelKind::Gaussian) return abs_normal_moment(s, model.sigmas[j]);
    double total = 0.0;
    for (const auto& [p, v] : model.marginal_atoms(j)) total += p * std::pow(std::abs(v), s);
    return total;
}

// E[X_j^q] for integer q.
inline double column_raw_moment(const DataModel& model, int j, int q) {
    if (!model.analytic()) throw CapabilityError("column_raw_moment: user-sampler has no closed form");
    if (model.kind == ModelKind::Gaussian)
        return q % 2 == 0 ? abs_normal_moment(q, model.sigmas[j]) : 0.0;
    double total = 0.0;
    for (const auto& [p, v] : model.marginal_atoms(j)) total += p * std::pow(v, q);
    return total;
}

inline Eigen::MatrixXd model_covariance(const DataModel& model) {
    const int d = model.d;
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(d, d);
    switch (model.kind) {
        case ModelKind::CenteredBernoulli:
            for (int j = 0; j < d; ++j) S(j, j) = model.probs[j] * (1.0 - model.probs[j]);
            return S;
        case ModelKind::Rademacher: return Eigen::MatrixXd::Identity(d, d);
        case ModelKind::Gaussian:
            for (int j = 0; j < d; ++j) S(j, j) = model.sigmas[j] * model.sigmas[j];
            return S;
        case ModelKind::RankScores: {
            // Exchangeable scores with zero sum: E[X_j X_k] = -E[X^2] / (r - 1) off the diagonal.
            const auto x = model.normalized_scores();
            double second = 0.0;
            for (double v : x) second += v * v;
            second /= d;
            for (int j = 0; j < d; ++j)
                for (int k = 0; k < d; ++k) S(j, k) = j == k ? second : -second / (d - 1.0);
            return S;
        }
        case ModelKind::MultinomialIndicator:
            for (int j = 0; j < d; ++j)
                for (int k = 0; k < d; ++k)
                    S(j, k) = j == k ? 1.0 - model.probs[j] : -std::sqrt(model.probs[j] * model.probs[k]);
            return S;
        case ModelKind::MeanVariancePair:
            for (const auto& [p, row] : model.joint_support())
                for (int j = 0; j < d; ++j)
                    for (int k = 0; k < d; ++k) S(j, k) += p * row[j] * row[k];
            return S;
        case ModelKind::UserSampler:
            throw CapabilityError("model_covariance: user-sampler requires empirical_moments");
    }
    return S;
}

// Signed E[X_j X_k X_l], flattened as (j * d + k) * d + l.
inline std::vector<double> mixed_third_moments(const DataModel& model) {
    const int d = model.d;
    std::vector<double> T(static_cast<std::size_t>(d) * d * d, 0.0);
    auto at = [&](int j, int k, int l) -> double& { return T[(static_cast<std::size_t>(j) * d + k) * d + l]; };
    switch (model.kind) {
        case ModelKind::CenteredBernoulli:
        case ModelKind::Rademacher:
        case ModelKind::Gaussian:
            // Independent mean-zero columns: only the diagonal survives.
            for (int j = 0; j < d; ++j) at(j, j, j) = column_raw_moment(model, j, 3);
            return T;
        case ModelKind::RankScores: {
            const auto x = model.normalized_scores();
            double s3 = 0.0;
            for (double v : x) s3 += v * v * v;
            const double r = d;
            for (int j = 0; j < d; ++j)
                for (int k = 0; k < d; ++k)
                    for (int l = 0; l < d; ++l) {
                        if (j == k && k == l)
                            at(j, k, l) = s3 / r;
                        else if (j == k || k == l || j == l)
                            at(j, k, l) = -s3 / (r * (r - 1.0));
                        else
                            at(j, k, l) = 2.0 * s3 / (r * (r - 1.0) * (r - 2.0));
                    }
            return T;
        }
        case ModelKind::MultinomialIndicator:
        case ModelKind::MeanVariancePair:
            for (const auto& [p, row] : model.joint_support())
                for (int j = 0; j < d; ++j)
                    for (int k = 0; k < d; ++k)
                        for (int l = 0; l < d; ++l) at(j, k, l) += p * row[j] * row[k] * row[l];
            return T;
        case ModelKind::UserSampler:
            throw CapabilityError("mixed_third_moments: user-sampler requires empirical_moments");
    }
    return T;
}

// ---------------------------------------------------------------------------
// Sampling sums of n rows

// Inversion table for Binomial(n, p).
class BinomialTable {
public:
    BinomialTable() = default;
    BinomialTable(std::int64_t n, double p) : n_(n) {
        cdf_.resize(static_cast<std::size_t>(n) + 1);
        const double lp = std::log(p), lq = std::log1p(-p);
        const double base = std::lgamma(static_cast<double>(n) + 1.0);
        double acc = 0.0;
        for (std::int64_t k = 0; k <= n; ++k) {
            const double kd = static_cast<double>(k);
            acc += std::exp(base - std::lgamma(kd + 1.0) - std::lgamma(static_cast<double>(n - k) + 1.0) +
                            kd * lp + static_cast<double>(n - k) * lq);
            cdf_[static_cast<std::size_t>(k)] = acc;
        }
        for (auto& c : cdf_) c /= acc;
        cdf_.back() = 1.0;
    }
    // Smallest k with F(k) > u.
    std::int64_t quantile(double u) const {
        const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        if (it == cdf_.end()) return n_;
        return static_cast<std::int64_t>(it - cdf_.begin());
    }

private:
    std::int64_t n_ = 0;
    std::vector<double> cdf_;
};

// Draws S = sum_{i<=n} X_i. Models whose row sums reduce to binomial counts are drawn in
// O(d) by inversion; the others loop over rows.
class SumSampler {
public:
    SumSampler(const DataModel& model, std::int64_t n) : model_(&model), n_(n) {
        if (n < 1) throw ArgumentError("SumSampler: n must be >= 1");
        auto tables = std::make_shared<std::vector<BinomialTable>>();
        switch (model.kind) {
            case ModelKind::CenteredBernoulli:
                for (double p : model.probs) tables->emplace_back(n, p);
                break;
            case ModelKind::Rademacher: tables->emplace_back(n, 0.5); break;
            case ModelKind::MeanVariancePair: tables->emplace_back(n, model.probs[0]); break;
            default: break;
        }
        tables_ = std::move(tables);
        row_.resize(model.d);
    }

    int dimension() const { return model_->d; }
    std::int64_t n() const { return n_; }

    // True when `sum_from_uniform` is available (one-dimensional lattice sums).
    bool invertible() const {
        return model_->d == 1 &&
               (model_->kind == ModelKind::CenteredBernoulli || model_->kind == ModelKind::Rademacher);
    }

    // Monotone map from u in (0,1) to the sum; drives quantile coupling.
    double sum_from_uniform(double u) const {
        if (!invertible()) throw CapabilityError("SumSampler: model sum is not invertible");
        const double k = static_cast<double>((*tables_)[0].quantile(u));
        const double n = static_cast<double>(n_);
        if (model_->kind == ModelKind::Rademacher) return 2.0 * k - n;
        return k - n * model_->probs[0];
    }

    void draw(Rng& rng, double* sum) {
        const int d = model_->d;
        const double n = static_cast<double>(n_);
        switch (model_->kind) {
            case ModelKind::CenteredBernoulli:
                for (int j = 0; j < d; ++j)
                    sum[j] = static_cast<double>((*tables_)[j].quantile(rng.uniform())) - n * model_->probs[j];
                return;
            case ModelKind::Rademacher:
                for (int j = 0; j < d; ++j)
                    sum[j] = 2.0 * static_cast<double>((*tables_)[0].quantile(rng.uniform())) - n;
                return;
            case ModelKind::MeanVariancePair: {
                const double p = model_->probs[0], v = model_->pair_variance();
                const double k = static_cast<double>((*tables_)[0].quantile(rng.uniform()));
                sum[0] = k - n * p;
                sum[1] = k * (1.0 - p) * (1.0 - p) + (n - k) * p * p - n * v;
                return;
            }
            case ModelKind::Gaussian:
                for (int j = 0; j < d; ++j) sum[j] = std::sqrt(n) * model_->sigmas[j] * rng.normal();
                return;
            default:
                std::fill(sum, sum + d, 0.0);
                for (std::int64_t i = 0; i < n_; ++i) {
                    model_->sample_row(rng, row_.data());
                    for (int j = 0; j < d; ++j) sum[j] += row_[j];
                }
                return;
        }
    }

private:
    const DataModel* model_;
    std::int64_t n_;
    std::shared_ptr<const std::vector<BinomialTable>> tables_;
    std::vector<double> row_;
};

// ---------------------------------------------------------------------------
// Moment tables

inline std::string format_order(double s) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", s);
    return buf;
}

inline constexpr double kOrderTolerance = 1e-12;

struct WMoment {
    double value = 0.0;
    double std_error = 0.0;
    std::string provenance;  // holder-bound | even-moment-bound | monte-carlo | user
};

inline bool provenance_rigorous(const std::string& p) {
    return p == "holder-bound" || p == "even-moment-bound" || p == "user";
}

using OrderMap = std::map<double, double>;

inline std::optional<double> find_order(const OrderMap& m, double s) {
    auto it = m.lower_bound(s - kOrderTolerance);
    if (it != m.end() && std::abs(it->first - s) <= kOrderTolerance) return it->second;
    return std::nullopt;
}

class MomentTable {
public:
    MomentTable() = default;
    MomentTable(std::int64_t n, int d, bool iid) : n_(n), d_(d), iid_(iid) {
        if (n < 1 || d < 1) throw ArgumentError("MomentTable: n and d must be >= 1");
        const std::size_t rows = iid ? 1 : static_cast<std::size_t>(n);
        abs_.assign(rows, std::vector<OrderMap>(d));
        third_.assign(rows, std::vector<double>());
        sigma_ = Eigen::MatrixXd::Zero(d, d);
        w_.assign(d, std::map<double, WMoment>());
    }

    std::int64_t n() const { return n_; }
    int d() const { return d_; }
    bool iid() const { return iid_; }
    std::size_t stored_rows() const { return abs_.size(); }

    void set_abs(std::size_t row, int j, double s, double value) {
        auto& m = abs_.at(row).at(j);
        for (auto it = m.begin(); it != m.end(); ++it)
            if (std::abs(it->first - s) <= kOrderTolerance) {
                it->second = value;
                return;
            }
        m[s] = value;
    }
    std::optional<double> abs_moment(std::size_t row, int j, double s) const {
        return find_order(abs_.at(row).at(j), s);
    }
    const OrderMap& abs_orders(std::size_t row, int j) const { return abs_.at(row).at(j); }

    // sum_i E|X_ij|^s; nullopt if any row lacks the order.
    std::optional<double> row_sum_abs(int j, double s) const {
        double total = 0.0;
        for (std::size_t i = 0; i < abs_.size(); ++i) {
            auto v = abs_moment(i, j, s);
            if (!v) return std::nullopt;
            total += *v;
        }
        return iid_ ? total * static_cast<double>(n_) : total;
    }

    void set_mixed_third(std::size_t row, std::vector<double> tensor) {
        if (tensor.size() != static_cast<std::size_t>(d_) * d_ * d_)
            throw ArgumentError("MomentTable: mixed-third tensor has wrong size");
        third_.at(row) = std::move(tensor);
    }
    bool has_mixed_third() const {
        return std::all_of(third_.begin(), third_.end(), [](const auto& t) { return !t.empty(); });
    }
    const std::vector<double>& mixed_third(std::size_t row) const { return third_.at(row); }
    // sum_i sum_{j,k,l} |E[X_ij X_ik X_il]|
    double row_sum_abs_mixed_third() const {
        double total = 0.0;
        for (const auto& t : third_)
            for (double v : t) total += std::abs(v);
        return iid_ ? total * static_cast<double>(n_) : total;
    }
    double max_abs_mixed_third() const {
        double m = 0.0;
        for (const auto& t : third_)
            for (double v : t) m = std::max(m, std::abs(v));
        return m;
    }

    // Covariance of W; symmetrised and eigen-clamped above -1e-10 trace.
    void set_sigma(const Eigen::MatrixXd& s) {
        if (s.rows() != d_ || s.cols() != d_) throw ArgumentError("MomentTable: Sigma has wrong shape");
        if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, s.cwiseAbs().maxCoeff()))
            throw DomainError("MomentTable: Sigma is not symmetric");
        const Eigen::MatrixXd sym = 0.5 * (s + s.transpose());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
        const double tol = -1e-10 * std::max(sym.trace(), 0.0);
        if (es.eigenvalues().minCoeff() < tol)
            throw DomainError("MomentTable: Sigma is not non-negative definite");
        if (es.eigenvalues().minCoeff() < 0.0) {
            Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
            sigma_ = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
        } else {
            sigma_ = sym;
        }
    }
    const Eigen::MatrixXd& sigma() const { return sigma_; }
    double sigma_k(int k) const { return std::sqrt(std::max(sigma_(k, k), 0.0)); }

    void set_w(int k, double r, WMoment w) {
        auto& m = w_.at(k);
        for (auto it = m.begin(); it != m.end(); ++it)
            if (std::abs(it->first - r) <= kOrderTolerance) {
                it->second = std::move(w);
                return;
            }
        m[r] = std::move(w);
    }
    std::optional<WMoment> w_moment(int k, double r) const {
        const auto& m = w_.at(k);
        auto it = m.lower_bound(r - kOrderTolerance);
        if (it != m.end() && std::abs(it->first - r) <= kOrderTolerance) return it->second;
        return std::nullopt;
    }
    const std::map<double, WMoment>& w_orders(int k) const { return w_.at(k); }

    // Lyapunov: E|X|^a <= (E|X|^b)^{a/b} for stored 0 < a < b. Returns offending (row, j, a, b).
    std::vector<std::tuple<std::size_t, int, double, double>> lyapunov_violations() const {
        std::vector<std::tuple<std::size_t, int, double, double>> bad;
        for (std::size_t i = 0; i < abs_.size(); ++i)
            for (int j = 0; j < d_; ++j)
                for (auto a = abs_[i][j].begin(); a != abs_[i][j].end(); ++a)
                    for (auto b = std::next(a); b != abs_[i][j].end(); ++b) {
                        if (a->first <= 0.0) continue;
                        const double rhs = std::pow(b->second, a->first / b->first);
                        if (a->second > rhs * (1.0 + 1e-12) + 1e-300) bad.emplace_back(i, j, a->first, b->first);
                    }
        return bad;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["n"] = n_;
        j["d"] = d_;
        j["iid_rows"] = iid_;
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& row : abs_) {
            nlohmann::json cols = nlohmann::json::array();
            for (const auto& col : row) {
                nlohmann::json orders = nlohmann::json::object();
                for (const auto& [s, v] : col) orders[format_order(s)] = v;
                cols.push_back(orders);
            }
            rows.push_back(cols);
        }
        j["abs_moments"] = rows;
        nlohmann::json thirds = nlohmann::json::array();
        for (const auto& t : third_) thirds.push_back(t);
        j["mixed_third"] = thirds;
        nlohmann::json sig = nlohmann::json::array();
        for (int a = 0; a < d_; ++a) {
            nlohmann::json r = nlohmann::json::array();
            for (int b = 0; b < d_; ++b) r.push_back(sigma_(a, b));
            sig.push_back(r);
        }
        j["sigma"] = sig;
        nlohmann::json w = nlohmann::json::array();
        for (const auto& col : w_) {
            nlohmann::json orders = nlohmann::json::object();
            for (const auto& [r, v] : col)
                orders[format_order(r)] = {{"value", v.value}, {"std_error", v.std_error}, {"provenance", v.provenance}};
            w.push_back(orders);
        }
        j["w_abs_moments"] = w;
        return j;
    }

    static MomentTable from_json(const nlohmann::json& j) {
        MomentTable t(j.at("n").get<std::int64_t>(), j.at("d").get<int>(), j.at("iid_rows").get<bool>());
        const auto& rows = j.at("abs_moments");
        if (rows.size() != t.stored_rows()) throw ArgumentError("MomentTable JSON: wrong number of rows");
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (int c = 0; c < t.d_; ++c)
                for (const auto& [key, v] : rows[i].at(c).items()) t.set_abs(i, c, std::stod(key), v.get<double>());
        const auto& thirds = j.at("mixed_third");
        for (std::size_t i = 0; i < thirds.size() && i < t.stored_rows(); ++i)
            if (!thirds[i].empty()) t.set_mixed_third(i, thirds[i].get<std::vector<double>>());
        Eigen::MatrixXd s(t.d_, t.d_);
        for (int a = 0; a < t.d_; ++a)
            for (int b = 0; b < t.d_; ++b) s(a, b) = j.at("sigma").at(a).at(b).get<double>();
        t.set_sigma(s);
        const auto& w = j.at("w_abs_moments");
        for (int k = 0; k < t.d_ && k < static_cast<int>(w.size()); ++k)
            for (const auto& [key, v] : w[k].items())
                t.set_w(k, std::stod(key),
                        WMoment{v.at("value").get<double>(), v.at("std_error").get<double>(),
                                v.at("provenance").get<std::string>()});
        return t;
    }

private:
    std::int64_t n_ = 1;
    int d_ = 1;
    bool iid_ = true;
    std::vector<std::vector<OrderMap>> abs_;
    std::vector<std::vector<double>> third_;
    Eigen::MatrixXd sigma_;
    std::vector<std::map<double, WMoment>> w_;
};

// Closed-form table for an analytic model: absolute moments at `orders`, mixed thirds and Sigma.
inline MomentTable analytic_moments(const DataModel& model, const std::vector<double>& orders, std::int64_t n) {
    if (!model.analytic()) throw CapabilityError("analytic_moments: user-sampler has no closed form");
    MomentTable t(n, model.d, true);
    for (int j = 0; j < model.d; ++j)
        for (double s : orders) {
            if (!(s >= 0.0)) throw DomainError("analytic_moments: negative order");
            t.set_abs(0, j, s, column_abs_moment(model, j, s));
        }
    t.set_mixed_third(0, mixed_third_moments(model));
    t.set_sigma(model_covariance(model));
    return t;
}

struct EmpiricalMoments {
    MomentTable table;
    std::vector<OrderMap> abs_std_error;  // per column
    Eigen::MatrixXd sigma_std_error;
    std::vector<double> mixed_third_std_error;
};

// Plug-in moments of the centred samples. Standard errors are influence-function
// (infinitesimal jackknife) errors: the sample standard deviation of each per-observation
// contribution divided by sqrt(N).
inline EmpiricalMoments empirical_moments(const std::vector<std::vector<double>>& samples,
                                          const std::vector<double>& orders) {
    if (samples.size() < 2) throw ArgumentError("empirical_moments: need at least two samples");
    const int d = static_cast<int>(samples.front().size());
    if (d < 1) throw ArgumentError("empirical_moments: empty sample vectors");
    const std::size_t N = samples.size();
    std::vector<double> mean(d, 0.0);
    for (const auto& s : samples) {
        if (static_cast<int>(s.size()) != d) throw ArgumentError("empirical_moments: ragged samples");
        for (int j = 0; j < d; ++j) mean[j] += s[j];
    }
    for (double& m : mean) m /= static_cast<double>(N);

    std::vector<std::vector<RunningMoments>> absm(d, std::vector<RunningMoments>(orders.size()));
    std::vector<RunningMoments> cov(static_cast<std::size_t>(d) * d), third(static_cast<std::size_t>(d) * d * d);
    std::vector<double> c(d);
    for (const auto& s : samples) {
        for (int j = 0; j < d; ++j) c[j] = s[j] - mean[j];
        for (int j = 0; j < d; ++j)
            for (std::size_t o = 0; o < orders.size(); ++o) absm[j][o].add(std::pow(std::abs(c[j]), orders[o]));
        for (int j = 0; j < d; ++j)
            for (int k = 0; k < d; ++k) {
                cov[static_cast<std::size_t>(j) * d + k].add(c[j] * c[k]);
                for (int l = 0; l < d; ++l) third[(static_cast<std::size_t>(j) * d + k) * d + l].add(c[j] * c[k] * c[l]);
            }
    }
    EmpiricalMoments out{MomentTable(1, d, true), std::vector<OrderMap>(d), Eigen::MatrixXd(d, d), {}};
    for (int j = 0; j < d; ++j)
        for (std::size_t o = 0; o < orders.size(); ++o) {
            out.table.set_abs(0, j, orders[o], absm[j][o].mean);
            out.abs_std_error[j][orders[o]] = absm[j][o].std_error();
        }
    Eigen::MatrixXd S(d, d);
    for (int j = 0; j < d; ++j)
        for (int k = 0; k < d; ++k) {
            S(j, k) = cov[static_cast<std::size_t>(j) * d + k].mean;
            out.sigma_std_error(j, k) = cov[static_cast<std::size_t>(j) * d + k].std_error();
        }
    out.table.set_sigma(0.5 * (S + S.transpose()));
    std::vector<double> t3;
    for (const auto& r : third) {
        t3.push_back(r.mean);
        out.mixed_third_std_error.push_back(r.std_error());
    }
    out.table.set_mixed_third(0, t3);
    return out;
}

// ---------------------------------------------------------------------------
// Moments of W_k = n^{-1/2} sum_i X_ik

enum class WMomentMode { Holder, MonteCarlo, EvenMoment };

struct WMomentOptions {
    WMomentMode mode = WMomentMode::Holder;
    std::int64_t replicates = 100000;
    std::uint64_t seed = 0;
    int threads = 1;
};

// Exact E[W_k^q] for iid rows via cumulants: kappa_j(W) = n^{1 - j/2} kappa_j(X).
inline double exact_w_even_moment(const DataModel& model, std::int64_t n, int k, int q) {
    if (q == 0) return 1.0;
    std::vector<double> m(q + 1), kappa(q + 1);
    m[0] = 1.0;
    for (int a = 1; a <= q; ++a) m[a] = column_raw_moment(model, k, a);
    auto binom = [](int a, int b) {
        double r = 1.0;
        for (int i = 1; i <= b; ++i) r = r * (a - b + i) / i;
        return r;
    };
    for (int a = 1; a <= q; ++a) {
        double s = m[a];
        for (int b = 1; b < a; ++b) s -= binom(a - 1, b - 1) * kappa[b] * m[a - b];
        kappa[a] = s;
    }
    const double nd = static_cast<double>(n);
    std::vector<double> kw(q + 1), mw(q + 1);
    for (int a = 1; a <= q; ++a) kw[a] = kappa[a] * std::pow(nd, 1.0 - a / 2.0);
    mw[0] = 1.0;
    for (int a = 1; a <= q; ++a) {
        double s = 0.0;
        for (int b = 1; b <= a; ++b) s += binom(a - 1, b - 1) * kw[b] * mw[a - b];
        mw[a] = s;
    }
    return mw[q];
}

inline WMoment w_moment(const DataModel& model, std::int64_t n, int k, double r, const WMomentOptions& opt) {
    if (!(r >= 0.0)) throw DomainError("w_moment: negative order");
    if (k < 0 || k >= model.d) throw ArgumentError("w_moment: coordinate out of range");
    switch (opt.mode) {
        case WMomentMode::Holder: {
            if (r > 2.0) throw CapabilityError("w_moment: the Holder bound needs r <= 2");
            const double var = model_covariance(model)(k, k);
            return {std::pow(std::sqrt(var), r), 0.0, "holder-bound"};
        }
        case WMomentMode::EvenMoment: {
            // E|W|^r <= (E W^q)^{r/q} with q the smallest even integer >= r; equality at r = q.
            if (r == 0.0) return {1.0, 0.0, "even-moment-bound"};
            const int q = 2 * static_cast<int>(std::ceil(r / 2.0 - 1e-12));
            if (q > 24) throw RangeError("w_moment: even-moment order above 24");
            const double mq = exact_w_even_moment(model, n, k, q);
            return {std::pow(std::max(mq, 0.0), r / q), 0.0, "even-moment-bound"};
        }
        case WMomentMode::MonteCarlo: {
            if (opt.replicates < 2) throw ArgumentError("w_moment: need at least two replicates");
            const double scale = 1.0 / std::sqrt(static_cast<double>(n));
            const SumSampler prototype(model, n);
            auto result = reduce_replicates(
                opt.replicates, 1, opt.threads, [&](std::int64_t b, std::int64_t e, Channels& ch) {
                    SumSampler sampler = prototype;
                    std::vector<double> sum(model.d);
                    for (std::int64_t i = b; i < e; ++i) {
                        Rng rng(opt.seed, streams::kAuxiliary + static_cast<std::uint64_t>(i));
                        sampler.draw(rng, sum.data());
                        ch[0].add(std::pow(std::abs(sum[k] * scale), r));
                    }
                });
            return {result[0].mean, result[0].std_error(), "monte-carlo"};
        }
    }
    return {};
}

// Default policy: Holder when r <= 2, Monte Carlo with 1e5 replicates otherwise.
inline WMomentOptions default_w_options(double r, std::uint64_t seed = 0) {
    WMomentOptions o;
    o.mode = r <= 2.0 ? WMomentMode::Holder : WMomentMode::MonteCarlo;
    o.replicates = 100000;
    o.seed = seed;
    return o;
}

}  // namespace stein_delta
