#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "stein_delta/bounds.hpp"
#include "stein_delta/core_math.hpp"
#include "stein_delta/errors.hpp"
#include "stein_delta/moments.hpp"
#include "stein_delta/rng.hpp"

namespace stein_delta {

// ---------------------------------------------------------------------------
// Model serialisation

inline nlohmann::json model_to_json(const DataModel& model) {
    nlohmann::json j;
    j["kind"] = model_kind_name(model.kind);
    switch (model.kind) {
        case ModelKind::CenteredBernoulli:
        case ModelKind::MultinomialIndicator: j["p"] = model.probs; break;
        case ModelKind::MeanVariancePair: j["p"] = model.probs[0]; break;
        case ModelKind::Rademacher: j["d"] = model.d; break;
        case ModelKind::RankScores: j["scores"] = model.scores; break;
        case ModelKind::Gaussian: j["sigmas"] = model.sigmas; break;
        case ModelKind::UserSampler: throw CapabilityError("model_to_json: user samplers cannot be serialised");
    }
    return j;
}

inline DataModel model_from_json(const nlohmann::json& j) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "centered-bernoulli") return DataModel::centered_bernoulli(j.at("p").get<std::vector<double>>());
    if (kind == "rademacher") return DataModel::rademacher(j.value("d", 1));
    if (kind == "rank-scores") return DataModel::rank_scores(j.at("scores").get<std::vector<double>>());
    if (kind == "multinomial-indicator")
        return DataModel::multinomial_indicator(j.at("p").get<std::vector<double>>());
    if (kind == "mean-variance-pair") return DataModel::mean_variance_pair(j.at("p").get<double>());
    if (kind == "gaussian") return DataModel::gaussian(j.at("sigmas").get<std::vector<double>>());
    throw ArgumentError("unknown model kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Maps

// f: R^d -> R^m with its order-t derivative tensor at 0, stored as m blocks of d^t
// entries with row-major multi-index (i_1, ..., i_t).
struct MapSpec {
    std::string kind = "user";
    int d = 1, m = 1, t = 1;
    std::function<void(const double*, double*)> evaluator;
    std::vector<double> tensor;
    GrowthEnvelope envelope;

    std::size_t tensor_block() const {
        std::size_t s = 1;
        for (int k = 0; k < t; ++k) s *= static_cast<std::size_t>(d);
        return s;
    }
    void evaluate(const double* x, double* out) const { evaluator(x, out); }

    void validate_shape() const {
        if (d < 1 || m < 1 || t < 1) throw ArgumentError("MapSpec: d, m, t must be >= 1");
        if (!evaluator) throw ArgumentError("MapSpec: missing evaluator");
        if (tensor.size() != tensor_block() * static_cast<std::size_t>(m))
            throw ArgumentError("MapSpec: derivative tensor has wrong size");
        bool nonzero = false;
        for (double v : tensor) nonzero = nonzero || v != 0.0;
        if (!nonzero) throw ArgumentError("MapSpec: order-t derivative tensor vanishes");
        // Symmetry under swapping any two of the t indices.
        const std::size_t block = tensor_block();
        std::vector<int> idx(t);
        for (int l = 0; l < m; ++l)
            for (std::size_t flat = 0; flat < block; ++flat) {
                std::size_t rem = flat;
                for (int k = t - 1; k >= 0; --k) {
                    idx[k] = static_cast<int>(rem % d);
                    rem /= d;
                }
                auto sorted = idx;
                std::sort(sorted.begin(), sorted.end());
                std::size_t canon = 0;
                for (int k = 0; k < t; ++k) canon = canon * d + sorted[k];
                const double a = tensor[l * block + flat], b = tensor[l * block + canon];
                if (std::abs(a - b) > 1e-9 * std::max(1.0, std::abs(b)))
                    throw ArgumentError("MapSpec: derivative tensor is not symmetric");
            }
    }
};

namespace detail {
// Mixed partial of component l along indices `idx` by the central-difference stencil.
inline double central_partial(const MapSpec& map, int l, const std::vector<int>& idx, double h) {
    const int t = static_cast<int>(idx.size());
    std::vector<double> x(map.d), out(map.m);
    double total = 0.0;
    for (std::uint32_t mask = 0; mask < (1u << t); ++mask) {
        std::fill(x.begin(), x.end(), 0.0);
        int sign = 1;
        for (int k = 0; k < t; ++k) {
            const bool plus = (mask >> k) & 1u;
            x[idx[k]] += plus ? h : -h;
            if (!plus) sign = -sign;
        }
        map.evaluate(x.data(), out.data());
        total += sign * out[l];
    }
    return total / std::pow(2.0 * h, t);
}

inline void for_each_index(int d, int t, const std::function<void(std::size_t, const std::vector<int>&)>& fn) {
    std::size_t block = 1;
    for (int k = 0; k < t; ++k) block *= static_cast<std::size_t>(d);
    std::vector<int> idx(t);
    for (std::size_t flat = 0; flat < block; ++flat) {
        std::size_t rem = flat;
        for (int k = t - 1; k >= 0; --k) {
            idx[k] = static_cast<int>(rem % d);
            rem /= d;
        }
        fn(flat, idx);
    }
}
}  // namespace detail

// Builds a user map: the order-t tensor is obtained by central differences and the
// orders below t must vanish at 0 to 1e-6.
inline MapSpec make_user_map(int d, int m, int t, std::function<void(const double*, double*)> f,
                             GrowthEnvelope env, double scale = 1.0) {
    if (t > 4) throw RangeError("make_user_map: finite-difference tensors limited to t <= 4");
    MapSpec map;
    map.kind = "user";
    map.d = d;
    map.m = m;
    map.t = t;
    map.evaluator = std::move(f);
    map.envelope = std::move(env);
    const double eps = std::numeric_limits<double>::epsilon();
    auto step = [&](int order) { return std::pow(eps, 1.0 / (order + 2.0)) * (1.0 + std::abs(scale)); };
    for (int k = 1; k < t; ++k)
        for (int l = 0; l < m; ++l)
            detail::for_each_index(d, k, [&](std::size_t, const std::vector<int>& idx) {
                const double v = detail::central_partial(map, l, idx, step(k));
                if (std::abs(v) > 1e-6)
                    throw ArgumentError("make_user_map: derivative of order " + std::to_string(k) +
                                        " does not vanish at 0");
            });
    map.tensor.assign(map.tensor_block() * m, 0.0);
    for (int l = 0; l < m; ++l)
        detail::for_each_index(d, t, [&](std::size_t flat, const std::vector<int>& idx) {
            map.tensor[l * map.tensor_block() + flat] = detail::central_partial(map, l, idx, step(t));
        });
    map.validate_shape();
    return map;
}

// Y_l = (1/t!) sum T_l[i_1..i_t] z_{i_1} ... z_{i_t}
inline void contract_tensor(const MapSpec& map, const double* z, double* out) {
    const std::size_t block = map.tensor_block();
    double tfact = 1.0;
    for (int k = 2; k <= map.t; ++k) tfact *= k;
    for (int l = 0; l < map.m; ++l) {
        double total = 0.0;
        detail::for_each_index(map.d, map.t, [&](std::size_t flat, const std::vector<int>& idx) {
            const double c = map.tensor[l * block + flat];
            if (c == 0.0) return;
            double prod = c;
            for (int i : idx) prod *= z[i];
            total += prod;
        });
        out[l] = total / tfact;
    }
}

// ---------------------------------------------------------------------------
// Gaussian sampling through the symmetric eigen square root (handles singular Sigma).

class GaussianSampler {
public:
    GaussianSampler() = default;
    explicit GaussianSampler(const Eigen::MatrixXd& sigma) {
        if (sigma.rows() != sigma.cols()) throw DomainError("GaussianSampler: Sigma must be square");
        if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() >
            1e-12 * std::max(1.0, sigma.cwiseAbs().maxCoeff()))
            throw DomainError("GaussianSampler: Sigma is not symmetric");
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (sigma + sigma.transpose()));
        const double tol = -1e-10 * std::max(sigma.trace(), 0.0);
        if (es.eigenvalues().size() > 0 && es.eigenvalues().minCoeff() < tol)
            throw DomainError("GaussianSampler: Sigma is not non-negative definite");
        const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
        root_ = es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
        z_.resize(sigma.rows());
    }
    int dimension() const { return static_cast<int>(root_.rows()); }
    void draw(Rng& rng, double* out) {
        for (Eigen::Index i = 0; i < z_.size(); ++i) z_(i) = rng.normal();
        Eigen::Map<Eigen::VectorXd>(out, root_.rows()) = root_ * z_;
    }
    const Eigen::MatrixXd& root() const { return root_; }

private:
    Eigen::MatrixXd root_;
    Eigen::VectorXd z_;
};

inline Eigen::VectorXd gaussian_sampler(const Eigen::MatrixXd& sigma, Rng& rng) {
    GaussianSampler g(sigma);
    Eigen::VectorXd out(sigma.rows());
    g.draw(rng, out.data());
    return out;
}

// ---------------------------------------------------------------------------
// Limits

enum class LimitKind { TensorContraction, Normal, ChiSquare, VarianceGamma, ScaledSquare };

inline std::string limit_kind_name(LimitKind k) {
    switch (k) {
        case LimitKind::TensorContraction: return "tensor-contraction";
        case LimitKind::Normal: return "normal";
        case LimitKind::ChiSquare: return "chi-square";
        case LimitKind::VarianceGamma: return "variance-gamma";
        case LimitKind::ScaledSquare: return "scaled-square";
    }
    return "?";
}

struct LimitDescriptor {
    LimitKind kind = LimitKind::TensorContraction;
    Eigen::MatrixXd matrix;  // Sigma of Z (tensor) or the covariance of Y (normal)
    double df = 1.0;         // chi-square
    double s = 1.0;          // variance-gamma: Y = (s/2) Z1 Z2
    double c = 1.0;          // scaled-square: Y = c Z^2

    int dimension(const MapSpec* map) const {
        switch (kind) {
            case LimitKind::TensorContraction: return map ? map->m : 1;
            case LimitKind::Normal: return static_cast<int>(matrix.rows());
            default: return 1;
        }
    }

    void validate() const {
        switch (kind) {
            case LimitKind::ChiSquare:
                if (!(df >= 1.0)) throw DomainError("LimitDescriptor: chi-square needs df >= 1");
                break;
            case LimitKind::VarianceGamma:
                if (!(s > 0.0)) throw DomainError("LimitDescriptor: variance-gamma needs s > 0");
                break;
            case LimitKind::ScaledSquare:
                if (!std::isfinite(c)) throw DomainError("LimitDescriptor: scaled-square needs finite c");
                break;
            case LimitKind::Normal:
            case LimitKind::TensorContraction: GaussianSampler check(matrix); break;
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["kind"] = limit_kind_name(kind);
        switch (kind) {
            case LimitKind::TensorContraction:
            case LimitKind::Normal: {
                nlohmann::json rows = nlohmann::json::array();
                for (Eigen::Index a = 0; a < matrix.rows(); ++a) {
                    nlohmann::json row = nlohmann::json::array();
                    for (Eigen::Index b = 0; b < matrix.cols(); ++b) row.push_back(matrix(a, b));
                    rows.push_back(row);
                }
                j["matrix"] = rows;
                break;
            }
            case LimitKind::ChiSquare: j["df"] = df; break;
            case LimitKind::VarianceGamma: j["s"] = s; break;
            case LimitKind::ScaledSquare: j["c"] = c; break;
        }
        return j;
    }
};

// Draws Y given the limit; the tensor kind contracts the map's tensor with Z ~ N(0, Sigma).
class LimitSampler {
public:
    LimitSampler(const LimitDescriptor& limit, const MapSpec* map) : limit_(limit), map_(map) {
        limit.validate();
        if (limit.kind == LimitKind::TensorContraction) {
            if (!map) throw ArgumentError("LimitSampler: tensor limit needs a map");
            if (limit.matrix.rows() != map->d) throw ArgumentError("LimitSampler: Sigma does not match map.d");
        }
        if (limit.kind == LimitKind::TensorContraction || limit.kind == LimitKind::Normal)
            gauss_ = GaussianSampler(limit.matrix);
        z_.resize(std::max(1, gauss_.dimension()));
    }
    int dimension() const { return limit_.dimension(map_); }

    void draw(Rng& rng, double* out) {
        switch (limit_.kind) {
            case LimitKind::TensorContraction:
                gauss_.draw(rng, z_.data());
                contract_tensor(*map_, z_.data(), out);
                return;
            case LimitKind::Normal: gauss_.draw(rng, out); return;
            case LimitKind::ChiSquare: {
                const double whole = std::floor(limit_.df);
                if (whole == limit_.df) {
                    double total = 0.0;
                    for (int k = 0; k < static_cast<int>(whole); ++k) {
                        const double z = rng.normal();
                        total += z * z;
                    }
                    out[0] = total;
                } else {
                    std::gamma_distribution<double> g(limit_.df / 2.0, 2.0);
                    out[0] = g(rng);
                }
                return;
            }
            case LimitKind::VarianceGamma: {
                const double z1 = rng.normal(), z2 = rng.normal();
                out[0] = 0.5 * limit_.s * z1 * z2;
                return;
            }
            case LimitKind::ScaledSquare: {
                const double z = rng.normal();
                out[0] = limit_.c * z * z;
                return;
            }
        }
    }

    // Monotone-in-z representation of a one-dimensional limit, used for quantile coupling.
    double from_standard_normal(double z) const {
        switch (limit_.kind) {
            case LimitKind::TensorContraction: {
                if (map_->d != 1 || map_->m != 1)
                    throw CapabilityError("LimitSampler: coupling needs a one-dimensional map");
                const double scaled = std::sqrt(std::max(limit_.matrix(0, 0), 0.0)) * z;
                double out = 0.0;
                contract_tensor(*map_, &scaled, &out);
                return out;
            }
            case LimitKind::Normal:
                if (limit_.matrix.rows() != 1) throw CapabilityError("LimitSampler: coupling needs a scalar normal");
                return std::sqrt(std::max(limit_.matrix(0, 0), 0.0)) * z;
            case LimitKind::ScaledSquare: return limit_.c * z * z;
            case LimitKind::ChiSquare:
                if (limit_.df != 1.0) throw CapabilityError("LimitSampler: coupling needs chi-square(1)");
                return z * z;
            case LimitKind::VarianceGamma: throw CapabilityError("LimitSampler: variance-gamma cannot be coupled");
        }
        return 0.0;
    }

private:
    LimitDescriptor limit_;
    const MapSpec* map_;
    GaussianSampler gauss_;
    std::vector<double> z_;
};

inline std::vector<double> sample_limit(const LimitDescriptor& limit, const MapSpec* map, Rng& rng) {
    LimitSampler s(limit, map);
    std::vector<double> out(s.dimension());
    s.draw(rng, out.data());
    return out;
}

// ---------------------------------------------------------------------------
// Statistic T_{t,n} = n^{t/2} (f(Xbar) - f(0))

inline void statistic_from_sum(const MapSpec& map, std::int64_t n, const double* sum, double* out,
                               std::vector<double>& scratch) {
    const double nd = static_cast<double>(n);
    scratch.resize(static_cast<std::size_t>(map.d) + 2 * static_cast<std::size_t>(map.m));
    double* xbar = scratch.data();
    double* f0 = xbar + map.d;
    double* fx = f0 + map.m;
    for (int j = 0; j < map.d; ++j) xbar[j] = sum[j] / nd;
    std::vector<double> zero(map.d, 0.0);
    map.evaluate(zero.data(), f0);
    map.evaluate(xbar, fx);
    const double scale = std::pow(nd, map.t / 2.0);
    for (int l = 0; l < map.m; ++l) out[l] = scale * (fx[l] - f0[l]);
}

inline std::vector<double> statistic_from_rows(const MapSpec& map, const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw ArgumentError("statistic_from_rows: no rows");
    std::vector<double> sum(map.d, 0.0), out(map.m), scratch;
    for (const auto& row : rows) {
        if (static_cast<int>(row.size()) != map.d) throw ArgumentError("statistic_from_rows: row dimension mismatch");
        for (int j = 0; j < map.d; ++j) sum[j] += row[j];
    }
    statistic_from_sum(map, static_cast<std::int64_t>(rows.size()), sum.data(), out.data(), scratch);
    return out;
}

class StatisticSampler {
public:
    StatisticSampler(const MapSpec& map, const DataModel& model, std::int64_t n)
        : map_(&map), sums_(model, n), n_(n), sum_(model.d) {
        if (model.d != map.d) throw ArgumentError("sample_statistic: model dimension does not match map.d");
    }
    void draw(Rng& rng, double* out) {
        sums_.draw(rng, sum_.data());
        statistic_from_sum(*map_, n_, sum_.data(), out, scratch_);
    }
    // Statistic from an explicit row sum (used by coupling and negation checks).
    void from_sum(const double* sum, double* out) { statistic_from_sum(*map_, n_, sum, out, scratch_); }
    const SumSampler& sums() const { return sums_; }

private:
    const MapSpec* map_;
    SumSampler sums_;
    std::int64_t n_;
    std::vector<double> sum_, scratch_;
};

inline std::vector<double> sample_statistic(const MapSpec& map, const DataModel& model, std::int64_t n, Rng& rng) {
    if (n < 1) throw ArgumentError("sample_statistic: n must be >= 1");
    StatisticSampler s(map, model, n);
    std::vector<double> out(map.m);
    s.draw(rng, out.data());
    return out;
}

// ---------------------------------------------------------------------------
// Direct evaluators for the rank and goodness-of-fit statistics

namespace detail {
inline void check_ranking(const std::vector<int>& ranking, int r) {
    if (static_cast<int>(ranking.size()) != r) throw ArgumentError("ranking has wrong length");
    std::vector<bool> seen(r, false);
    for (int v : ranking) {
        if (v < 1 || v > r || seen[v - 1]) throw ArgumentError("ranking is not a permutation of 1..r");
        seen[v - 1] = true;
    }
}
}  // namespace detail

// rankings[i][j] is the rank given to treatment j in block i.
inline double sen_statistic(const std::vector<double>& J, const std::vector<std::vector<int>>& rankings) {
    const int r = static_cast<int>(J.size());
    if (rankings.empty()) throw ArgumentError("sen_statistic: no rankings");
    const auto x = DataModel::rank_scores(J).normalized_scores();
    std::vector<double> W(r, 0.0);
    for (const auto& ranking : rankings) {
        detail::check_ranking(ranking, r);
        for (int j = 0; j < r; ++j) W[j] += x[ranking[j] - 1];
    }
    const double n = static_cast<double>(rankings.size());
    double total = 0.0;
    for (double w : W) total += w * w / n;
    return total;
}

// Classical form 12 / (n r (r+1)) sum_j (R_j - n (r+1)/2)^2.
inline double friedman_statistic(const std::vector<std::vector<int>>& rankings) {
    if (rankings.empty()) throw ArgumentError("friedman_statistic: no rankings");
    const int r = static_cast<int>(rankings.front().size());
    if (r < 2) throw ArgumentError("friedman_statistic: need r >= 2");
    std::vector<double> R(r, 0.0);
    for (const auto& ranking : rankings) {
        detail::check_ranking(ranking, r);
        for (int j = 0; j < r; ++j) R[j] += ranking[j];
    }
    const double n = static_cast<double>(rankings.size());
    double total = 0.0;
    for (double v : R) total += (v - n * (r + 1) / 2.0) * (v - n * (r + 1) / 2.0);
    return 12.0 / (n * r * (r + 1)) * total;
}

inline double pearson_statistic(const std::vector<std::int64_t>& counts, const std::vector<double>& p) {
    if (counts.size() != p.size() || counts.size() < 2) throw ArgumentError("pearson_statistic: size mismatch");
    std::int64_t n = 0;
    for (auto c : counts) {
        if (c < 0) throw ArgumentError("pearson_statistic: negative count");
        n += c;
    }
    if (n < 1) throw ArgumentError("pearson_statistic: counts must sum to n >= 1");
    double total = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
        if (!(p[j] > 0.0)) throw ArgumentError("pearson_statistic: probabilities must be positive");
        const double e = static_cast<double>(n) * p[j];
        total += (static_cast<double>(counts[j]) - e) * (static_cast<double>(counts[j]) - e) / e;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Statistic streams: 8-byte magic "SDSTAT01" then little-endian float64 values.

inline constexpr char kStreamMagic[9] = "SDSTAT01";

inline void write_statistic_stream(const std::string& path, const std::vector<double>& values) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ArgumentError("cannot open '" + path + "' for writing");
    os.write(kStreamMagic, 8);
    for (double v : values) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        os.write(reinterpret_cast<const char*>(&bits), 8);
    }
}

inline std::vector<double> read_statistic_stream(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ArgumentError("cannot open '" + path + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kStreamMagic, 8) != 0)
        throw ArgumentError("'" + path + "' is not an SDSTAT01 stream");
    std::vector<double> out;
    std::uint64_t bits;
    while (is.read(reinterpret_cast<char*>(&bits), 8)) {
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        double v;
        std::memcpy(&v, &bits, 8);
        out.push_back(v);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Experiment plans

struct BoundSpec {
    BoundOp op = BoundOp::DeltaUnivariate;
    BoundMode mode = BoundMode::General;
    FnEnvelope fn;  // used by the fn operations; the delta operations use map.envelope
};

struct ExperimentPlan {
    std::string name;
    std::string builtin;
    nlohmann::json params = nlohmann::json::object();
    DataModel model;
    MapSpec map;
    LimitDescriptor limit;
    BoundSpec bound;
    std::vector<std::int64_t> n_grid;
    std::int64_t replicates = 20000;
    std::uint64_t seed = 20240601;
    std::vector<double> h_a;  // test function sin(<a, x> + b)
    double h_b = 0.0;
    std::string w_moments = "auto";  // auto | holder | monte-carlo | even-moment

    void validate() const {
        if (n_grid.empty()) throw ArgumentError("plan '" + name + "': n_grid is empty");
        for (std::size_t i = 0; i < n_grid.size(); ++i) {
            if (n_grid[i] < 1) throw ArgumentError("plan '" + name + "': n_grid entries must be >= 1");
            if (i > 0 && n_grid[i] <= n_grid[i - 1])
                throw ArgumentError("plan '" + name + "': n_grid must be strictly increasing");
        }
        if (replicates < 1000) throw ArgumentError("plan '" + name + "': replicates must be >= 1000");
        if (static_cast<int>(h_a.size()) != map.m)
            throw ArgumentError("plan '" + name + "': test-function vector must have length m");
        if (w_moments != "auto" && w_moments != "holder" && w_moments != "monte-carlo" && w_moments != "even-moment")
            throw ArgumentError("plan '" + name + "': unknown w_moments mode '" + w_moments + "'");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["name"] = name;
        j["builtin"] = builtin;
        j["params"] = params;
        j["n_grid"] = n_grid;
        j["replicates"] = replicates;
        j["seed"] = seed;
        j["test_function"] = {{"a", h_a}, {"b", h_b}};
        j["w_moments"] = w_moments;
        return j;
    }
    std::string canonical() const { return to_json().dump(2) + "\n"; }
};

namespace detail {

inline MapSpec quadratic_map(int r) {
    MapSpec map;
    map.kind = "sum-of-squares";
    map.d = r;
    map.m = 1;
    map.t = 2;
    map.evaluator = [r](const double* x, double* out) {
        double total = 0.0;
        for (int j = 0; j < r; ++j) total += x[j] * x[j];
        out[0] = total;
    };
    map.tensor.assign(static_cast<std::size_t>(r) * r, 0.0);
    for (int j = 0; j < r; ++j) map.tensor[static_cast<std::size_t>(j) * r + j] = 2.0;
    map.envelope.t = 2;
    map.envelope.A = {2.0};
    map.envelope.r = {0.0};
    map.envelope.even = true;
    return map;
}

inline LimitDescriptor normal_limit(double var) {
    LimitDescriptor l;
    l.kind = LimitKind::Normal;
    l.matrix = Eigen::MatrixXd::Constant(1, 1, var);
    return l;
}

inline LimitDescriptor chi_square_limit(double df) {
    LimitDescriptor l;
    l.kind = LimitKind::ChiSquare;
    l.df = df;
    return l;
}

inline ExperimentPlan rank_plan(const std::string& builtin, const nlohmann::json& params, std::vector<double> J) {
    ExperimentPlan plan;
    plan.builtin = builtin;
    plan.params = params;
    const int r = static_cast<int>(J.size());
    plan.model = DataModel::rank_scores(std::move(J));
    plan.map = quadratic_map(r);
    plan.limit = chi_square_limit(r - 1.0);
    plan.bound.op = BoundOp::FnMultivariate;
    plan.bound.mode = BoundMode::Even;
    plan.bound.fn = {8.0, 64.0, 6.0, true};
    plan.n_grid = {16, 64, 256};
    return plan;
}

}  // namespace detail

inline std::int64_t json_int(const nlohmann::json& params, const char* key) {
    const auto& v = params.at(key);
    if (!v.is_number_integer()) throw ArgumentError(std::string("parameter '") + key + "' must be an integer");
    return v.get<std::int64_t>();
}

// Built-in statistics with the envelope constants of the worked examples.
inline ExperimentPlan builtin(const std::string& name, const nlohmann::json& params) {
    ExperimentPlan plan;
    plan.builtin = name;
    plan.params = params;

    if (name == "bernoulli-variance") {
        const double p = params.at("p").get<double>();
        if (!(p > 0.0 && p < 1.0)) throw ArgumentError("bernoulli-variance: p must lie in (0,1)");
        plan.model = DataModel::centered_bernoulli({p});
        const bool half = p == 0.5;
        plan.map.kind = name;
        plan.map.d = plan.map.m = 1;
        plan.map.t = half ? 2 : 1;
        plan.map.evaluator = [p](const double* x, double* out) { out[0] = (p + x[0]) * (1.0 - p - x[0]); };
        if (half) {
            plan.map.tensor = {-2.0};
            plan.map.envelope = {2, {1.0}, {0.0}, true, true};
            plan.limit.kind = LimitKind::ScaledSquare;
            plan.limit.c = -0.25;
            plan.bound = {BoundOp::DeltaUnivariate, BoundMode::ZeroThird, {}};
        } else {
            plan.map.tensor = {1.0 - 2.0 * p};
            plan.map.envelope = {1, {2.0, 1.0}, {1.0, 0.0}, false, false};
            plan.limit = detail::normal_limit(p * (1.0 - p) * (1.0 - 2.0 * p) * (1.0 - 2.0 * p));
            plan.bound = {BoundOp::DeltaUnivariate, BoundMode::General, {}};
        }
        plan.n_grid = {64, 256, 1024, 4096};
    } else if (name == "power-mean") {
        const auto exponent = static_cast<int>(json_int(params, "exponent"));
        const double mu = params.at("mu").get<double>();
        if (exponent < 2 || exponent > 8) throw ArgumentError("power-mean: exponent must lie in [2, 8]");
        plan.model = model_from_json(params.at("model"));
        if (plan.model.d != 1) throw ArgumentError("power-mean: model must be one-dimensional");
        const double sigma2 = model_covariance(plan.model)(0, 0);
        plan.map.kind = name;
        plan.map.d = plan.map.m = 1;
        plan.map.evaluator = [mu, exponent](const double* x, double* out) { out[0] = std::pow(mu + x[0], exponent); };
        const double p = exponent;
        if (mu != 0.0) {
            plan.map.t = 1;
            plan.map.tensor = {p * std::pow(mu, exponent - 1)};
            const double b = std::pow(2.0, p - 2.0) * p * std::max(1.0, std::pow(std::abs(mu), p - 1.0));
            const double c = std::pow(2.0, p - 3.0) * p * (p - 1.0) * std::max(1.0, std::pow(std::abs(mu), p - 2.0));
            plan.map.envelope = {1, {b, c}, {p - 1.0, p - 2.0}, false, false};
            plan.limit = detail::normal_limit(p * p * sigma2 * std::pow(mu, 2.0 * p - 2.0));
        } else {
            plan.map.t = exponent;
            double fact = 1.0;
            for (int k = 2; k <= exponent; ++k) fact *= k;
            plan.map.tensor = {fact};
            plan.map.envelope = {exponent, {fact / 2.0}, {0.0}, exponent % 2 == 0, false};
            plan.limit.kind = LimitKind::TensorContraction;
            plan.limit.matrix = Eigen::MatrixXd::Constant(1, 1, sigma2);
        }
        plan.bound = {BoundOp::DeltaUnivariate, BoundMode::General, {}};
        plan.n_grid = {64, 256, 1024};
    } else if (name == "product-means") {
        const double mu1 = params.at("mu1").get<double>(), mu2 = params.at("mu2").get<double>();
        plan.model = model_from_json(params.at("model"));
        if (plan.model.d != 2) throw ArgumentError("product-means: model must have two columns");
        const Eigen::MatrixXd S = model_covariance(plan.model);
        if (std::abs(S(0, 1)) > 1e-12) throw ArgumentError("product-means: columns must be independent");
        plan.map.kind = name;
        plan.map.d = 2;
        plan.map.m = 1;
        plan.map.evaluator = [mu1, mu2](const double* x, double* out) { out[0] = (mu1 + x[0]) * (mu2 + x[1]); };
        if (mu1 != 0.0 || mu2 != 0.0) {
            plan.map.t = 1;
            plan.map.tensor = {mu2, mu1};
            const double c = std::max({1.0, std::abs(mu1), std::abs(mu2)});
            plan.map.envelope = {1, {c, 1.0 / 3.0, 0.0}, {1.0, 0.0, 0.0}, false, false};
            plan.limit = detail::normal_limit(mu2 * mu2 * S(0, 0) + mu1 * mu1 * S(1, 1));
            plan.bound = {BoundOp::DeltaMultivariate, BoundMode::General, {}};
            plan.n_grid = {64, 256, 1024};
        } else {
            plan.map.t = 2;
            plan.map.tensor = {0.0, 1.0, 1.0, 0.0};
            plan.map.envelope = {2, {1.0 / 3.0, 0.0, 0.0, 0.0, 0.0}, {0.0, 0.0, 0.0, 0.0, 0.0}, true, false};
            // Limit Z1 Z2 with Z_k ~ N(0, sigma_k^2): variance-gamma with s = 2 sigma_1 sigma_2.
            plan.limit.kind = LimitKind::VarianceGamma;
            plan.limit.s = 2.0 * std::sqrt(S(0, 0) * S(1, 1));
            plan.bound = {BoundOp::DeltaMultivariate, BoundMode::Even, {}};
            plan.n_grid = {16, 64, 256};
        }
    } else if (name == "mean-and-variance") {
        const double p = params.at("p").get<double>();
        plan.model = DataModel::mean_variance_pair(p);
        plan.map.kind = name;
        plan.map.d = 2;
        plan.map.m = 2;
        plan.map.t = 1;
        plan.map.evaluator = [](const double* x, double* out) {
            out[0] = x[0];
            out[1] = x[1] - x[0] * x[0];
        };
        plan.map.tensor = {1.0, 0.0, 0.0, 1.0};
        plan.map.envelope = {1, {2.0, 2.0 / 3.0, 0.0}, {1.0, 0.0, 0.0}, false, false};
        plan.limit.kind = LimitKind::Normal;
        plan.limit.matrix = model_covariance(plan.model);
        plan.bound = {BoundOp::DeltaMultivariate, BoundMode::General, {}};
        plan.n_grid = {64, 256, 1024};
    } else if (name == "gaussian-mean") {
        // Gaussian rows: T and its limit coincide in law, so every distance is zero.
        const double sigma = params.at("sigma").get<double>();
        if (!(sigma > 0.0)) throw ArgumentError("gaussian-mean: sigma must be positive");
        plan.model = DataModel::gaussian({sigma});
        plan.map.kind = name;
        plan.map.d = plan.map.m = plan.map.t = 1;
        plan.map.evaluator = [](const double* x, double* out) { out[0] = x[0]; };
        plan.map.tensor = {1.0};
        plan.map.envelope = {1, {1.0, 0.0}, {0.0, 0.0}, false, false};
        plan.limit = detail::normal_limit(sigma * sigma);
        plan.bound = {BoundOp::DeltaUnivariate, BoundMode::General, {}};
        plan.n_grid = {8, 64};
    } else if (name == "sen-rank") {
        plan = detail::rank_plan(name, params, params.at("J").get<std::vector<double>>());
    } else if (name == "friedman") {
        const auto r = json_int(params, "r");
        if (r < 2 || r > 12) throw ArgumentError("friedman: r must lie in [2, 12]");
        std::vector<double> J;
        for (int k = 1; k <= r; ++k) J.push_back(k);
        plan = detail::rank_plan(name, params, J);
        // Symmetric scores: mixed third moments vanish.
        plan.bound.mode = BoundMode::ZeroThird;
        plan.bound.fn = {4.0, 16.0, 4.0, true};
    } else if (name == "brown-mood") {
        const auto a = json_int(params, "a"), r = json_int(params, "r");
        if (r < 2 || r > 12 || a < 1 || a > r - 1) throw ArgumentError("brown-mood: need r in [2, 12] and 1 <= a <= r-1");
        std::vector<double> J;
        for (int k = 1; k <= r; ++k) J.push_back(k <= a ? 1.0 : 0.0);
        plan = detail::rank_plan(name, params, J);
    } else if (name == "pearson") {
        const auto p = params.at("p").get<std::vector<double>>();
        plan.model = DataModel::multinomial_indicator(p);
        const int r = static_cast<int>(p.size());
        plan.map = detail::quadratic_map(r);
        plan.limit = detail::chi_square_limit(r - 1.0);
        plan.bound = {BoundOp::FnMultivariate, BoundMode::Even, {8.0, 64.0, 6.0, true}};
        plan.n_grid = {16, 64, 256};
    } else {
        throw ArgumentError("unknown builtin '" + name + "'");
    }
    plan.builtin = name;
    plan.params = params;
    plan.name = name;
    plan.h_a.assign(plan.map.m, 1.0);
    plan.map.validate_shape();
    plan.map.envelope.validate();
    return plan;
}

inline ExperimentPlan plan_from_json(const nlohmann::json& j) {
    ExperimentPlan plan = builtin(j.at("builtin").get<std::string>(), j.value("params", nlohmann::json::object()));
    if (j.contains("name")) plan.name = j.at("name").get<std::string>();
    if (j.contains("n_grid")) plan.n_grid = j.at("n_grid").get<std::vector<std::int64_t>>();
    if (j.contains("replicates")) plan.replicates = j.at("replicates").get<std::int64_t>();
    if (j.contains("seed")) plan.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("test_function")) {
        const auto& tf = j.at("test_function");
        if (tf.contains("a")) plan.h_a = tf.at("a").get<std::vector<double>>();
        if (tf.contains("b")) plan.h_b = tf.at("b").get<double>();
    }
    if (j.contains("w_moments")) plan.w_moments = j.at("w_moments").get<std::string>();
    plan.validate();
    return plan;
}

// Plans reproducing the worked examples, keyed by example name.
inline std::vector<ExperimentPlan> example_plans(const std::string& example) {
    auto named = [](ExperimentPlan p, const std::string& n) {
        p.name = n;
        return p;
    };
    const nlohmann::json pair_model = {{"kind", "centered-bernoulli"}, {"p", {0.3, 0.6}}};
    if (example == "ex3.1-normal") return {named(builtin("bernoulli-variance", {{"p", 0.3}}), example)};
    if (example == "ex3.1-chisq") return {named(builtin("bernoulli-variance", {{"p", 0.5}}), example)};
    if (example == "ex3.2")
        return {named(builtin("power-mean", {{"exponent", 3},
                                             {"mu", 1.0},
                                             {"model", {{"kind", "centered-bernoulli"}, {"p", {0.3}}}}}),
                      example)};
    if (example == "ex3.3-normal")
        return {named(builtin("product-means", {{"mu1", 1.0}, {"mu2", 1.0}, {"model", pair_model}}), example)};
    if (example == "ex3.3-vg")
        return {named(builtin("product-means", {{"mu1", 0.0}, {"mu2", 0.0}, {"model", pair_model}}), example)};
    if (example == "ex3.4") return {named(builtin("mean-and-variance", {{"p", 0.3}}), example)};
    if (example == "ex3.5-friedman") {
        std::vector<ExperimentPlan> out;
        for (int r : {2, 3, 4}) out.push_back(named(builtin("friedman", {{"r", r}}), example + "-r" + std::to_string(r)));
        return out;
    }
    if (example == "ex3.5-brownmood") {
        std::vector<ExperimentPlan> out;
        out.push_back(named(builtin("brown-mood", {{"a", 1}, {"r", 3}}), example + "-a1-r3"));
        out.push_back(named(builtin("brown-mood", {{"a", 1}, {"r", 4}}), example + "-a1-r4"));
        return out;
    }
    if (example == "ex3.6-pearson") {
        std::vector<ExperimentPlan> out;
        for (int r : {3, 4})
            out.push_back(named(builtin("pearson", {{"p", std::vector<double>(r, 1.0 / r)}}),
                                example + "-r" + std::to_string(r)));
        return out;
    }
    throw ArgumentError("unknown example '" + example + "'");
}

inline const std::vector<std::string>& example_names() {
    static const std::vector<std::string> names = {"ex3.1-normal", "ex3.1-chisq",    "ex3.2",
                                                   "ex3.3-normal", "ex3.3-vg",       "ex3.4",
                                                   "ex3.5-friedman", "ex3.5-brownmood", "ex3.6-pearson"};
    return names;
}

// ---------------------------------------------------------------------------
// Bounds for a plan

inline double test_function_scale(const ExperimentPlan& plan) {
    double a = 0.0;
    for (double v : plan.h_a) a = std::max(a, std::abs(v));
    return a;
}

inline TestBudget plan_budget(const ExperimentPlan& plan) {
    const double a = test_function_scale(plan);
    std::vector<double> norms;
    for (int k = 1; k <= 6; ++k) norms.push_back(std::pow(a, k));
    return TestBudget(norms);
}

inline MomentRequirement plan_requirement(const ExperimentPlan& plan) {
    const bool fn = plan.bound.op == BoundOp::FnMultivariate || plan.bound.op == BoundOp::FnUnivariate;
    return required_moments(plan.bound.op, plan.bound.mode, fn ? nullptr : &plan.map.envelope,
                            fn ? &plan.bound.fn : nullptr);
}

inline WMomentOptions plan_w_options(const ExperimentPlan& plan, double r, int threads) {
    WMomentOptions o;
    o.seed = plan.seed;
    o.threads = threads;
    if (plan.w_moments == "holder")
        o.mode = WMomentMode::Holder;
    else if (plan.w_moments == "monte-carlo")
        o.mode = WMomentMode::MonteCarlo;
    else if (plan.w_moments == "even-moment")
        o.mode = WMomentMode::EvenMoment;
    else
        o.mode = r <= 2.0 ? WMomentMode::Holder : WMomentMode::EvenMoment;
    return o;
}

// Minimal moment table for the plan's bound at sample size n.
inline MomentTable plan_moment_table(const ExperimentPlan& plan, std::int64_t n, int threads = 1) {
    const auto req = plan_requirement(plan);
    MomentTable table = analytic_moments(plan.model, req.x_orders, n);
    for (double r : req.w_orders)
        for (int k = 0; k < plan.model.d; ++k)
            table.set_w(k, r, w_moment(plan.model, n, k, r, plan_w_options(plan, r, threads)));
    return table;
}

inline BoundReport plan_bound(const ExperimentPlan& plan, const MomentTable& table) {
    const TestBudget budget = plan_budget(plan);
    const double a = test_function_scale(plan);
    switch (plan.bound.op) {
        case BoundOp::DeltaMultivariate:
            return bound_delta_multivariate(plan.bound.mode, plan.map.envelope, table, budget, plan.map.m);
        case BoundOp::DeltaUnivariate:
            return bound_delta_univariate(plan.bound.mode, plan.map.envelope, table, a, a * a);
        case BoundOp::FnMultivariate:
            return bound_fn_multivariate(plan.bound.mode, plan.bound.fn, table, budget, plan.map.m);
        case BoundOp::FnUnivariate:
            return bound_fn_univariate(plan.bound.mode, plan.bound.fn, table, a, a * a);
    }
    throw ArgumentError("plan_bound: unknown operation");
}

inline BoundReport plan_bound(const ExperimentPlan& plan, std::int64_t n, int threads = 1) {
    return plan_bound(plan, plan_moment_table(plan, n, threads));
}

// The limit law the statistic converges to, with tensor limits bound to Sigma of the model.
inline LimitDescriptor resolved_limit(const ExperimentPlan& plan) {
    LimitDescriptor l = plan.limit;
    if (l.kind == LimitKind::TensorContraction && l.matrix.size() == 0) l.matrix = model_covariance(plan.model);
    return l;
}

}  // namespace stein_delta
