#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "stein_delta/bounds.hpp"
#include "stein_delta/errors.hpp"
#include "stein_delta/mc_verify.hpp"
#include "stein_delta/moments.hpp"
#include "stein_delta/statistics.hpp"

namespace stein_delta::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitApplicability = 3;
inline constexpr int kExitViolation = 4;

inline const std::vector<std::string>& commands() {
    static const std::vector<std::string> c = {"bound", "verify", "rate", "example", "stein-check", "moments"};
    return c;
}

struct Diagnostic {
    std::string path;
    std::string rule;
    std::string message;
    bool applicability = false;

    std::string str() const { return path + ": [" + rule + "] " + message; }
};

struct Options {
    std::string command;
    std::optional<std::uint64_t> seed;  // --seed
    int threads = 1;
    std::string out_dir = ".";
    std::string format;  // empty: use the document's format
};

// ---------------------------------------------------------------------------
// Parsed configuration

struct RateSettings {
    RateOptions options;
    bool coupling_set = false;
};

struct SteinSettings {
    std::string g = "identity";
    int order = 1;
    FnEnvelope envelope{1.0, 0.0, 0.0, false};
    double sigma = 1.0;
    std::vector<double> points{-2.0, -1.0, 0.0, 1.0, 2.0};
    SteinQuadrature quadrature;
    SmoothTestFunction h;
    std::uint64_t seed = 20240601;
};

struct RunConfig {
    std::string command;
    std::vector<ExperimentPlan> plans;
    std::vector<std::int64_t> bound_n;  // explicit n for bound / moments
    DominanceRule dominance;
    RateSettings rate;
    SteinSettings stein;
    std::string format = "json";
};

namespace detail {

struct Checker {
    std::vector<Diagnostic>& out;
    void add(const std::string& path, const std::string& rule, const std::string& msg, bool app = false) {
        out.push_back({path, rule, msg, app});
    }
    void keys(const nlohmann::json& obj, const std::string& path, const std::set<std::string>& allowed) {
        for (const auto& [k, v] : obj.items())
            if (!allowed.count(k)) add(path + "." + k, "unknown-key", "key is not part of the schema");
    }
    bool object(const nlohmann::json& j, const std::string& path) {
        if (!j.is_object()) {
            add(path, "type", "expected an object");
            return false;
        }
        return true;
    }
    std::optional<std::int64_t> integer(const nlohmann::json& j, const std::string& path, std::int64_t lo,
                                        std::int64_t hi) {
        if (!j.is_number_integer()) {
            add(path, "type", "expected an integer");
            return std::nullopt;
        }
        const auto v = j.get<std::int64_t>();
        if (v < lo || v > hi) {
            add(path, "range", "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
            return std::nullopt;
        }
        return v;
    }
    std::optional<double> number(const nlohmann::json& j, const std::string& path) {
        if (!j.is_number()) {
            add(path, "type", "expected a number");
            return std::nullopt;
        }
        const double v = j.get<double>();
        if (!std::isfinite(v)) {
            add(path, "range", "must be finite");
            return std::nullopt;
        }
        return v;
    }
    std::optional<std::vector<std::int64_t>> grid(const nlohmann::json& j, const std::string& path) {
        if (!j.is_array() || j.empty()) {
            add(path, "type", "expected a non-empty array of integers");
            return std::nullopt;
        }
        std::vector<std::int64_t> g;
        for (std::size_t i = 0; i < j.size(); ++i) {
            auto v = integer(j[i], path + "[" + std::to_string(i) + "]", 1, 100000000);
            if (!v) return std::nullopt;
            if (!g.empty() && *v <= g.back()) {
                add(path, "order", "entries must be strictly increasing");
                return std::nullopt;
            }
            g.push_back(*v);
        }
        return g;
    }
};

inline const char* kPlanKeys[] = {"builtin", "params", "name", "n_grid", "replicates", "seed", "test_function",
                                  "w_moments"};

inline std::optional<ExperimentPlan> parse_plan(Checker& c, const nlohmann::json& j, const std::string& path) {
    if (!c.object(j, path)) return std::nullopt;
    c.keys(j, path, std::set<std::string>(std::begin(kPlanKeys), std::end(kPlanKeys)));
    if (!j.contains("builtin") || !j.at("builtin").is_string()) {
        c.add(path + ".builtin", "required", "a builtin name is required");
        return std::nullopt;
    }
    const std::size_t before = c.out.size();
    if (j.contains("params") && !j.at("params").is_object()) c.add(path + ".params", "type", "expected an object");
    if (j.contains("name") && !j.at("name").is_string()) c.add(path + ".name", "type", "expected a string");
    if (j.contains("n_grid")) c.grid(j.at("n_grid"), path + ".n_grid");
    if (j.contains("replicates")) c.integer(j.at("replicates"), path + ".replicates", 1000, 1000000000);
    if (j.contains("seed")) c.integer(j.at("seed"), path + ".seed", 0, std::numeric_limits<std::int64_t>::max());
    if (j.contains("w_moments")) {
        const auto& w = j.at("w_moments");
        if (!w.is_string() || (w != "auto" && w != "holder" && w != "monte-carlo" && w != "even-moment"))
            c.add(path + ".w_moments", "enum", "expected auto, holder, monte-carlo or even-moment");
    }
    if (j.contains("test_function")) {
        const auto& tf = j.at("test_function");
        if (c.object(tf, path + ".test_function")) {
            c.keys(tf, path + ".test_function", {"a", "b"});
            if (tf.contains("a")) {
                if (!tf.at("a").is_array() || tf.at("a").empty())
                    c.add(path + ".test_function.a", "type", "expected a non-empty array of numbers");
                else
                    for (std::size_t i = 0; i < tf.at("a").size(); ++i)
                        c.number(tf.at("a")[i], path + ".test_function.a[" + std::to_string(i) + "]");
            }
            if (tf.contains("b")) c.number(tf.at("b"), path + ".test_function.b");
        }
    }
    if (c.out.size() != before) return std::nullopt;
    try {
        return plan_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        c.add(path + ".params", "builtin-params", e.what());
    } catch (const Error& e) {
        c.add(path + ".params", "builtin-params", e.what());
    }
    return std::nullopt;
}

inline void check_applicability(Checker& c, const ExperimentPlan& plan, const std::vector<std::int64_t>& grid,
                                const std::string& path) {
    for (std::size_t i = 0; i < grid.size(); ++i) {
        try {
            const auto report = plan_bound(plan, grid[i]);
            for (const auto& f : report.failures())
                c.add(path + "[" + std::to_string(i) + "]", "applicability",
                      report.theorem + " at n=" + std::to_string(grid[i]) + " requires " + f, true);
        } catch (const Error& e) {
            c.add(path + "[" + std::to_string(i) + "]", "applicability", e.what(), true);
        }
    }
}

}  // namespace detail

// Parses and checks a configuration document. The returned config is usable iff the
// diagnostic list is empty; run() refuses anything validate() rejects.
inline std::pair<RunConfig, std::vector<Diagnostic>> parse_config(const std::string& command,
                                                                  const nlohmann::json& doc,
                                                                  std::optional<std::uint64_t> seed_override = {}) {
    std::vector<Diagnostic> diags;
    detail::Checker c{diags};
    RunConfig cfg;
    cfg.command = command;
    if (std::find(commands().begin(), commands().end(), command) == commands().end()) {
        c.add("$", "command", "unknown command '" + command + "'");
        return {cfg, diags};
    }
    if (!c.object(doc, "$")) return {cfg, diags};

    std::set<std::string> allowed = {"command", "seed", "format"};
    if (command == "bound" || command == "moments") allowed.insert({"plan", "example", "n"});
    if (command == "verify") allowed.insert({"plan", "example", "n_grid", "replicates", "dominance"});
    if (command == "rate") allowed.insert({"plan", "example", "rate", "dominance"});
    if (command == "example") allowed.insert({"example", "replicates", "dominance"});
    if (command == "stein-check") allowed.insert({"stein"});
    c.keys(doc, "$", allowed);

    if (doc.contains("command") && (!doc.at("command").is_string() || doc.at("command") != command))
        c.add("$.command", "command", "document command does not match '" + command + "'");
    if (doc.contains("format")) {
        const auto& f = doc.at("format");
        if (!f.is_string() || (f != "json" && f != "csv"))
            c.add("$.format", "enum", "expected json or csv");
        else
            cfg.format = f.get<std::string>();
    }
    std::optional<std::uint64_t> seed = seed_override;
    if (!seed && doc.contains("seed")) {
        if (auto s = c.integer(doc.at("seed"), "$.seed", 0, std::numeric_limits<std::int64_t>::max()))
            seed = static_cast<std::uint64_t>(*s);
    }

    if (command == "stein-check") {
        auto& st = cfg.stein;
        if (seed) st.seed = *seed;
        if (!doc.contains("stein")) {
            c.add("$.stein", "required", "stein-check needs a 'stein' object");
            return {cfg, diags};
        }
        const auto& s = doc.at("stein");
        if (!c.object(s, "$.stein")) return {cfg, diags};
        c.keys(s, "$.stein", {"g", "order", "envelope", "sigma", "points", "quadrature", "test_function"});
        if (s.contains("g")) {
            if (!s.at("g").is_string() || (s.at("g") != "identity" && s.at("g") != "square"))
                c.add("$.stein.g", "enum", "expected identity or square");
            else
                st.g = s.at("g").get<std::string>();
        }
        if (s.contains("order"))
            if (auto v = c.integer(s.at("order"), "$.stein.order", 1, 2)) st.order = static_cast<int>(*v);
        if (s.contains("envelope")) {
            const auto& e = s.at("envelope");
            if (c.object(e, "$.stein.envelope")) {
                c.keys(e, "$.stein.envelope", {"A", "B", "r"});
                for (const char* k : {"A", "B", "r"}) {
                    if (!e.contains(k)) {
                        c.add(std::string("$.stein.envelope.") + k, "required", "envelope entry is required");
                        continue;
                    }
                    auto v = c.number(e.at(k), std::string("$.stein.envelope.") + k);
                    if (v && *v < 0.0) c.add(std::string("$.stein.envelope.") + k, "range", "must be >= 0");
                    if (v) (std::string(k) == "A" ? st.envelope.A : std::string(k) == "B" ? st.envelope.B : st.envelope.r) = *v;
                }
            }
        }
        if (s.contains("sigma")) {
            auto v = c.number(s.at("sigma"), "$.stein.sigma");
            if (v && !(*v > 0.0)) c.add("$.stein.sigma", "range", "must be positive");
            if (v) st.sigma = *v;
        }
        if (s.contains("points")) {
            const auto& p = s.at("points");
            if (!p.is_array() || p.empty()) {
                c.add("$.stein.points", "type", "expected a non-empty array of numbers");
            } else {
                st.points.clear();
                for (std::size_t i = 0; i < p.size(); ++i)
                    if (auto v = c.number(p[i], "$.stein.points[" + std::to_string(i) + "]")) st.points.push_back(*v);
            }
        }
        if (s.contains("quadrature")) {
            const auto& q = s.at("quadrature");
            if (c.object(q, "$.stein.quadrature")) {
                c.keys(q, "$.stein.quadrature", {"s_max", "steps", "mc_reps", "slack"});
                if (q.contains("s_max")) {
                    auto v = c.number(q.at("s_max"), "$.stein.quadrature.s_max");
                    if (v && !(*v > 0.0)) c.add("$.stein.quadrature.s_max", "range", "must be positive");
                    if (v) st.quadrature.s_max = *v;
                }
                if (q.contains("steps"))
                    if (auto v = c.integer(q.at("steps"), "$.stein.quadrature.steps", 2, 100000))
                        st.quadrature.steps = static_cast<int>(*v);
                if (q.contains("mc_reps"))
                    if (auto v = c.integer(q.at("mc_reps"), "$.stein.quadrature.mc_reps", 2, 10000000))
                        st.quadrature.mc_reps = *v;
                if (q.contains("slack")) {
                    auto v = c.number(q.at("slack"), "$.stein.quadrature.slack");
                    if (v && *v < 0.0) c.add("$.stein.quadrature.slack", "range", "must be >= 0");
                    if (v) st.quadrature.slack = *v;
                }
            }
        }
        if (s.contains("test_function")) {
            const auto& tf = s.at("test_function");
            if (c.object(tf, "$.stein.test_function")) {
                c.keys(tf, "$.stein.test_function", {"a", "b"});
                if (tf.contains("a"))
                    if (auto v = c.number(tf.at("a"), "$.stein.test_function.a")) st.h.a = {*v};
                if (tf.contains("b"))
                    if (auto v = c.number(tf.at("b"), "$.stein.test_function.b")) st.h.b = *v;
            }
        }
        return {cfg, diags};
    }

    // Plan sources
    const bool has_plan = doc.contains("plan"), has_example = doc.contains("example");
    if (command == "example" && !has_example) c.add("$.example", "required", "example needs an example name");
    if (command != "example" && has_plan == has_example)
        c.add("$", "plan-source", "exactly one of 'plan' or 'example' is required");
    if (has_plan && !has_example) {
        if (auto p = detail::parse_plan(c, doc.at("plan"), "$.plan")) cfg.plans.push_back(*p);
    }
    if (has_example && !has_plan) {
        const auto& e = doc.at("example");
        if (!e.is_string() ||
            std::find(example_names().begin(), example_names().end(), e.get<std::string>()) == example_names().end())
            c.add("$.example", "enum", "unknown example name");
        else
            cfg.plans = example_plans(e.get<std::string>());
    }
    if (seed)
        for (auto& p : cfg.plans) p.seed = *seed;

    if (doc.contains("replicates"))
        if (auto v = c.integer(doc.at("replicates"), "$.replicates", 1000, 1000000000))
            for (auto& p : cfg.plans) p.replicates = *v;
    if (doc.contains("n_grid"))
        if (auto g = c.grid(doc.at("n_grid"), "$.n_grid"))
            for (auto& p : cfg.plans) p.n_grid = *g;
    if (doc.contains("n")) {
        const auto& n = doc.at("n");
        if (n.is_array()) {
            if (auto g = c.grid(n, "$.n")) cfg.bound_n = *g;
        } else if (auto v = c.integer(n, "$.n", 1, 100000000)) {
            cfg.bound_n = {*v};
        }
    }
    if (doc.contains("dominance")) {
        const auto& d = doc.at("dominance");
        if (c.object(d, "$.dominance")) {
            c.keys(d, "$.dominance", {"se_multiplier", "inconclusive_ratio"});
            if (d.contains("se_multiplier")) {
                auto v = c.number(d.at("se_multiplier"), "$.dominance.se_multiplier");
                if (v && *v < 0.0) c.add("$.dominance.se_multiplier", "range", "must be >= 0");
                if (v) cfg.dominance.se_multiplier = *v;
            }
            if (d.contains("inconclusive_ratio")) {
                auto v = c.number(d.at("inconclusive_ratio"), "$.dominance.inconclusive_ratio");
                if (v && *v <= 0.0) c.add("$.dominance.inconclusive_ratio", "range", "must be positive");
                if (v) cfg.dominance.inconclusive_ratio = *v;
            }
        }
    }
    if (command == "rate") {
        auto& ro = cfg.rate.options;
        ro.base_replicates = 100000;
        ro.scale_with_n = true;
        if (doc.contains("rate")) {
            const auto& r = doc.at("rate");
            if (c.object(r, "$.rate")) {
                c.keys(r, "$.rate", {"grid", "base_replicates", "scale_with_n", "coupling"});
                if (r.contains("grid")) {
                    auto g = c.grid(r.at("grid"), "$.rate.grid");
                    if (g && g->size() < 3) c.add("$.rate.grid", "range", "a rate fit needs at least 3 points");
                    if (g) ro.grid = *g;
                }
                if (r.contains("base_replicates"))
                    if (auto v = c.integer(r.at("base_replicates"), "$.rate.base_replicates", 1000, 1000000000))
                        ro.base_replicates = *v;
                if (r.contains("scale_with_n")) {
                    if (!r.at("scale_with_n").is_boolean())
                        c.add("$.rate.scale_with_n", "type", "expected a boolean");
                    else
                        ro.scale_with_n = r.at("scale_with_n").get<bool>();
                }
                if (r.contains("coupling")) {
                    const auto& cp = r.at("coupling");
                    if (!cp.is_string() || (cp != "quantile" && cp != "independent")) {
                        c.add("$.rate.coupling", "enum", "expected quantile or independent");
                    } else {
                        ro.coupling = cp == "quantile" ? Coupling::Quantile : Coupling::Independent;
                        cfg.rate.coupling_set = true;
                    }
                }
            }
        }
        for (const auto& p : cfg.plans) {
            const bool invertible = SumSampler(p.model, 1).invertible() && p.map.m == 1 &&
                                    p.limit.kind != LimitKind::VarianceGamma;
            if (!invertible) {
                if (cfg.rate.coupling_set && ro.coupling == Coupling::Quantile)
                    c.add("$.rate.coupling", "capability", "quantile coupling needs a one-dimensional lattice model");
                else
                    ro.coupling = Coupling::Independent;
            } else if (!cfg.rate.coupling_set) {
                ro.coupling = Coupling::Quantile;
            }
        }
    }

    if (diags.empty()) {
        for (std::size_t i = 0; i < cfg.plans.size(); ++i) {
            const std::string path = has_plan ? "$.plan" : "$.example[" + std::to_string(i) + "]";
            try {
                cfg.plans[i].validate();
            } catch (const Error& e) {
                c.add(path, "plan", e.what());
                continue;
            }
            std::vector<std::int64_t> grid = cfg.plans[i].n_grid;
            std::string grid_path = doc.contains("n_grid") ? "$.n_grid" : path + ".n_grid";
            if (command == "bound" || command == "moments") {
                if (!cfg.bound_n.empty()) {
                    grid = cfg.bound_n;
                    grid_path = "$.n";
                }
            }
            if (command == "rate") {
                grid = cfg.rate.options.grid;
                grid_path = "$.rate.grid";
            }
            if (command != "moments") detail::check_applicability(c, cfg.plans[i], grid, grid_path);
        }
    }
    return {cfg, diags};
}

inline std::vector<Diagnostic> validate(const std::string& command, const nlohmann::json& doc) {
    return parse_config(command, doc).second;
}

// ---------------------------------------------------------------------------
// Execution

namespace detail {

inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write '" + path.string() + "'");
    os << content;
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline nlohmann::json rows_json(const std::vector<VerifyRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row;
        row["n"] = r.n;
        row["estimate"] = r.estimate.to_json();
        row["report"] = r.report.to_json();
        row["verdict"] = r.report.valid ? nlohmann::json(r.verdict.name()) : nlohmann::json(nullptr);
        row["margin"] = r.report.valid ? nlohmann::json(r.verdict.margin) : nlohmann::json(nullptr);
        if (r.report.valid && *r.report.value > 0.0) row["slack_ratio"] = *r.report.value / std::max(r.estimate.value, 1e-300);
        arr.push_back(row);
    }
    return arr;
}

inline bool any_violation(const std::vector<VerifyRow>& rows) {
    for (const auto& r : rows)
        if (r.report.valid && r.verdict.kind == Verdict::Kind::Violated) return true;
    return false;
}

inline nlohmann::json try_fit(const std::vector<VerifyRow>& rows) {
    std::vector<std::pair<std::int64_t, DistanceEstimate>> pts;
    for (const auto& r : rows) pts.emplace_back(r.n, r.estimate);
    try {
        return fit_rate(pts).to_json();
    } catch (const Error& e) {
        return {{"error", e.what()}};
    }
}

}  // namespace detail

inline int execute(const RunConfig& cfg, const Options& opt, std::ostream& out, std::ostream& err) {
    namespace fs = std::filesystem;
    const fs::path dir(opt.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        err << "error: output directory '" << opt.out_dir << "' is not writable\n";
        return kExitConfig;
    }
    const std::string format = opt.format.empty() ? cfg.format : opt.format;
    const int threads = std::max(1, opt.threads);

    if (cfg.command == "bound") {
        nlohmann::json all = nlohmann::json::array();
        std::ostringstream csv;
        csv << BoundReport::csv_header() << '\n';
        bool invalid = false;
        for (const auto& plan : cfg.plans) {
            const auto grid = cfg.bound_n.empty() ? plan.n_grid : cfg.bound_n;
            for (auto n : grid) {
                const auto report = plan_bound(plan, n, threads);
                invalid = invalid || !report.valid;
                auto j = report.to_json();
                j["plan"] = plan.name;
                all.push_back(j);
                csv << report.csv_row() << '\n';
            }
        }
        const std::string name = cfg.plans.size() == 1 ? cfg.plans[0].name : cfg.plans[0].builtin;
        if (format == "csv") {
            detail::write_file(dir / (name + "_bound.csv"), csv.str());
            out << csv.str();
        } else {
            detail::write_file(dir / (name + "_bound.json"), detail::dump(all));
            out << detail::dump(all);
        }
        return invalid ? kExitApplicability : kExitOk;
    }

    if (cfg.command == "moments") {
        nlohmann::json all = nlohmann::json::array();
        for (const auto& plan : cfg.plans) {
            nlohmann::json tables = nlohmann::json::array();
            const auto grid = cfg.bound_n.empty() ? plan.n_grid : cfg.bound_n;
            for (auto n : grid) {
                auto j = plan_moment_table(plan, n, threads).to_json();
                j["plan"] = plan.name;
                tables.push_back(j);
                all.push_back(j);
            }
            detail::write_file(dir / (plan.name + "_moments.json"), detail::dump(tables));
        }
        out << detail::dump(all);
        return kExitOk;
    }

    if (cfg.command == "verify" || cfg.command == "example") {
        bool violated = false;
        for (const auto& plan : cfg.plans) {
            const auto rows = verify_plan(plan, threads, cfg.dominance);
            violated = violated || detail::any_violation(rows);
            const std::string csv = verify_csv(rows);
            nlohmann::json summary;
            summary["plan"] = plan.to_json();
            summary["rows"] = detail::rows_json(rows);
            summary["rate_fit"] = detail::try_fit(rows);
            summary["violated"] = detail::any_violation(rows);
            detail::write_file(dir / (plan.name + ".csv"), csv);
            detail::write_file(dir / (plan.name + "_summary.json"), detail::dump(summary));
            if (format == "csv")
                out << csv;
            else
                out << detail::dump(summary);
        }
        return violated ? kExitViolation : kExitOk;
    }

    if (cfg.command == "rate") {
        bool violated = false;
        for (const auto& plan : cfg.plans) {
            const auto pts = rate_sweep(plan, cfg.rate.options, threads);
            std::vector<VerifyRow> rows;
            for (const auto& [n, est] : pts) {
                VerifyRow row;
                row.n = n;
                row.estimate = est;
                row.report = plan_bound(plan, n, threads);
                if (row.report.valid) row.verdict = verify_bound(est, row.report, cfg.dominance);
                rows.push_back(row);
            }
            violated = violated || detail::any_violation(rows);
            nlohmann::json summary;
            summary["plan"] = plan.to_json();
            summary["rows"] = detail::rows_json(rows);
            summary["rate_fit"] = detail::try_fit(rows);
            summary["coupling"] = cfg.rate.options.coupling == Coupling::Quantile ? "quantile" : "independent";
            summary["violated"] = detail::any_violation(rows);
            const std::string csv = verify_csv(rows);
            detail::write_file(dir / (plan.name + "_rate.csv"), csv);
            detail::write_file(dir / (plan.name + "_rate_summary.json"), detail::dump(summary));
            out << (format == "csv" ? csv : detail::dump(summary));
        }
        return violated ? kExitViolation : kExitOk;
    }

    if (cfg.command == "stein-check") {
        const auto& st = cfg.stein;
        std::function<double(double)> g = [](double w) { return w; };
        if (st.g == "square") g = [](double w) { return w * w; };
        const auto results =
            stein_solution_check(st.envelope, g, st.h, st.sigma, st.points, st.order, st.quadrature, st.seed);
        std::ostringstream csv;
        csv.precision(17);
        csv << "w,order,estimate,bound,pass\n";
        nlohmann::json arr = nlohmann::json::array();
        bool fail = false;
        for (const auto& r : results) {
            csv << r.w << ',' << r.order << ',' << r.estimate << ',' << r.bound << ',' << (r.pass ? "true" : "false")
                << '\n';
            arr.push_back({{"w", r.w},
                           {"order", r.order},
                           {"estimate", r.estimate},
                           {"bound", r.bound},
                           {"pass", r.pass},
                           {"tail", r.tail},
                           {"diagnostic", r.diagnostic}});
            if (!r.pass) {
                fail = true;
                err << "stein-check: " << r.diagnostic << '\n';
            }
        }
        detail::write_file(dir / "stein_check.csv", csv.str());
        detail::write_file(dir / "stein_check_summary.json", detail::dump(arr));
        out << (format == "csv" ? csv.str() : detail::dump(arr));
        return fail ? kExitViolation : kExitOk;
    }
    err << "error: unknown command '" << cfg.command << "'\n";
    return kExitConfig;
}

// Validates then runs a parsed document. Applicability diagnostics map to exit 3, all
// other diagnostics to exit 2.
inline int run_document(const Options& opt, const nlohmann::json& doc, std::ostream& out, std::ostream& err) {
    auto [cfg, diags] = parse_config(opt.command, doc, opt.seed);
    if (!diags.empty()) {
        bool only_applicability = true;
        for (const auto& d : diags) {
            err << d.str() << '\n';
            only_applicability = only_applicability && d.applicability;
        }
        return only_applicability ? kExitApplicability : kExitConfig;
    }
    try {
        return execute(cfg, opt, out, err);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    }
}

// Seed precedence: --seed, then STEIN_DELTA_SEED, then the document.
inline std::optional<std::uint64_t> resolve_seed(std::optional<std::uint64_t> flag, std::ostream& err, bool& ok) {
    ok = true;
    if (flag) return flag;
    if (const char* env = std::getenv("STEIN_DELTA_SEED")) {
        try {
            std::size_t used = 0;
            const auto v = std::stoull(env, &used);
            if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            err << "$env.STEIN_DELTA_SEED: [type] expected a non-negative integer\n";
            ok = false;
        }
    }
    return std::nullopt;
}

inline int run_file(Options opt, const std::string& config_path, std::ostream& out, std::ostream& err) {
    std::ifstream is(config_path);
    if (!is) {
        err << config_path << ": [io] cannot open configuration\n";
        return kExitConfig;
    }
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        err << config_path << ": [syntax] " << e.what() << '\n';
        return kExitConfig;
    }
    bool ok = true;
    opt.seed = resolve_seed(opt.seed, err, ok);
    if (!ok) return kExitConfig;
    return run_document(opt, doc, out, err);
}

}  // namespace stein_delta::cli
