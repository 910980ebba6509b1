#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stein_delta/cli.hpp"

using namespace stein_delta;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("stein_delta_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run(const std::string& command, const nlohmann::json& doc, const fs::path& dir, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
    cli::Options opt;
    opt.command = command;
    opt.out_dir = dir.string();
    std::ostringstream out, err;
    const int code = cli::run_document(opt, doc, out, err);
    if (out_text) *out_text = out.str();
    if (err_text) *err_text = err.str();
    return code;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

nlohmann::json random_value(Rng& rng) {
    switch (rng.below(9)) {
        case 0: return "text";
        case 1: return -1;
        case 2: return 0;
        case 3: return 1.5;
        case 4: return 1000000000000LL;
        case 5: return nlohmann::json::array({3, 2});
        case 6: return nlohmann::json::object({{"x", 1}});
        case 7: return nullptr;
        default: return static_cast<int>(rng.below(200));
    }
}

// Replaces, deletes or adds one entry somewhere in the document tree.
void mutate(nlohmann::json& j, Rng& rng, int depth = 0) {
    if (!j.is_object() && !j.is_array()) {
        j = random_value(rng);
        return;
    }
    if (j.empty() || rng.below(4) == 0) {
        if (j.is_object())
            j["extra" + std::to_string(rng.below(3))] = random_value(rng);
        else
            j.push_back(random_value(rng));
        return;
    }
    const std::size_t pick = rng.below(j.size());
    auto it = j.begin();
    std::advance(it, static_cast<long>(pick));
    if (depth < 3 && (it->is_object() || it->is_array()) && rng.below(3) != 0) {
        mutate(*it, rng, depth + 1);
        return;
    }
    if (rng.below(3) == 0)
        j.erase(it);
    else
        *it = random_value(rng);
}

}  // namespace

TEST(Cli, CommandsAndExitCodes) {
    EXPECT_EQ(cli::commands().size(), 6u);
    const auto dir = scratch_dir("codes");
    const nlohmann::json ok = {{"example", "ex3.1-chisq"}, {"n", {8, 100}}};
    EXPECT_EQ(run("bound", ok, dir), cli::kExitOk);
    EXPECT_TRUE(fs::exists(dir / "ex3.1-chisq_bound.json"));
    EXPECT_EQ(run("bound", {{"example", "ex3.1-chisq"}, {"n", 4}}, dir), cli::kExitApplicability);
    EXPECT_EQ(run("bound", {{"example", "nope"}}, dir), cli::kExitConfig);
    EXPECT_EQ(run("bound", {{"example", "ex3.2"}, {"plan", {{"builtin", "friedman"}}}}, dir), cli::kExitConfig);
    EXPECT_EQ(run("no-such-command", ok, dir), cli::kExitConfig);
    EXPECT_EQ(run("bound", nlohmann::json::array(), dir), cli::kExitConfig);
}

TEST(Cli, DiagnosticsNameTheOffendingPath) {
    const nlohmann::json even_small = {{"plan", {{"builtin", "pearson"}, {"params", {{"p", {0.5, 0.5}}}}}},
                                       {"n_grid", {8}}};
    auto diags = cli::validate("verify", even_small);
    ASSERT_FALSE(diags.empty());
    EXPECT_TRUE(diags.front().applicability);
    EXPECT_EQ(diags.front().path, "$.n_grid[0]");
    EXPECT_NE(diags.front().message.find("n >= 12"), std::string::npos);

    const nlohmann::json bad_p = {{"plan", {{"builtin", "pearson"}, {"params", {{"p", {0.3, 0.6}}}}}}};
    diags = cli::validate("verify", bad_p);
    ASSERT_EQ(diags.size(), 1u);
    EXPECT_EQ(diags[0].path, "$.plan.params");
    EXPECT_NE(diags[0].message.find("sum to 1"), std::string::npos);

    const nlohmann::json typo = {{"example", "ex3.4"}, {"replicats", 5000}};
    diags = cli::validate("verify", typo);
    ASSERT_EQ(diags.size(), 1u);
    EXPECT_EQ(diags[0].rule, "unknown-key");
    EXPECT_EQ(diags[0].path, "$.replicats");

    const nlohmann::json rate = {{"example", "ex3.4"}, {"rate", {{"coupling", "quantile"}}}};
    diags = cli::validate("rate", rate);
    ASSERT_FALSE(diags.empty());
    EXPECT_EQ(diags[0].rule, "capability");
}

TEST(Cli, ValidateAndRunAgreeUnderMutation) {
    const auto dir = scratch_dir("fuzz");
    const nlohmann::json base = {
        {"plan", {{"builtin", "friedman"}, {"params", {{"r", 3}}}, {"n_grid", {16, 64}}, {"seed", 4}}},
        {"n", {16, 64}},
        {"format", "json"}};
    int accepted = 0, rejected = 0;
    for (int trial = 0; trial < 500; ++trial) {
        Rng rng(2024, trial);
        auto doc = base;
        const int edits = 1 + static_cast<int>(rng.below(3));
        for (int e = 0; e < edits; ++e) mutate(doc, rng);
        std::vector<cli::Diagnostic> diags;
        ASSERT_NO_THROW(diags = cli::validate("bound", doc)) << doc.dump();
        const int code = run("bound", doc, dir);
        if (diags.empty()) {
            ++accepted;
            EXPECT_EQ(code, cli::kExitOk) << doc.dump();
        } else {
            ++rejected;
            bool app = true;
            for (const auto& d : diags) app = app && d.applicability;
            EXPECT_EQ(code, app ? cli::kExitApplicability : cli::kExitConfig) << doc.dump();
        }
    }
    EXPECT_GT(accepted, 20);
    EXPECT_GT(rejected, 100);
}

TEST(Cli, RerunsAreByteIdentical) {
    const nlohmann::json doc = {
        {"plan", {{"builtin", "gaussian-mean"}, {"params", {{"sigma", 1.0}}}, {"replicates", 3000}, {"seed", 11}}}};
    const auto a = scratch_dir("rerun_a"), b = scratch_dir("rerun_b");
    std::string out_a, out_b;
    ASSERT_EQ(run("verify", doc, a, &out_a), cli::kExitOk);
    ASSERT_EQ(run("verify", doc, b, &out_b), cli::kExitOk);
    EXPECT_EQ(out_a, out_b);
    int files = 0;
    for (const auto& entry : fs::directory_iterator(a)) {
        ++files;
        EXPECT_EQ(slurp(entry.path()), slurp(b / entry.path().filename())) << entry.path();
    }
    EXPECT_EQ(files, 2);
}

TEST(Cli, SeedPrecedence) {
    std::ostringstream err;
    bool ok = true;
    ::unsetenv("STEIN_DELTA_SEED");
    EXPECT_FALSE(cli::resolve_seed(std::nullopt, err, ok).has_value());
    EXPECT_TRUE(ok);
    ::setenv("STEIN_DELTA_SEED", "42", 1);
    EXPECT_EQ(cli::resolve_seed(std::nullopt, err, ok).value(), 42u);
    EXPECT_EQ(cli::resolve_seed(7u, err, ok).value(), 7u);
    ::setenv("STEIN_DELTA_SEED", "4x", 1);
    cli::resolve_seed(std::nullopt, err, ok);
    EXPECT_FALSE(ok);
    ::unsetenv("STEIN_DELTA_SEED");

    const nlohmann::json doc = {{"example", "ex3.4"}, {"seed", 3}};
    auto [cfg, diags] = cli::parse_config("verify", doc, 99u);
    ASSERT_TRUE(diags.empty());
    EXPECT_EQ(cfg.plans[0].seed, 99u);
    std::tie(cfg, diags) = cli::parse_config("verify", doc);
    EXPECT_EQ(cfg.plans[0].seed, 3u);
}

TEST(Cli, SteinCheckAndMomentsOutputs) {
    const auto dir = scratch_dir("stein");
    const nlohmann::json st = {
        {"stein",
         {{"g", "identity"}, {"order", 1}, {"envelope", {{"A", 1}, {"B", 0}, {"r", 0}}},
          {"quadrature", {{"mc_reps", 2000}, {"steps", 100}}}}},
        {"format", "csv"}};
    std::string out;
    EXPECT_EQ(run("stein-check", st, dir, &out), cli::kExitOk);
    EXPECT_EQ(out.rfind("w,order,estimate,bound,pass\n", 0), 0u);
    EXPECT_TRUE(fs::exists(dir / "stein_check_summary.json"));

    EXPECT_EQ(run("moments", {{"example", "ex3.6-pearson"}, {"n", 64}}, dir), cli::kExitOk);
    EXPECT_TRUE(fs::exists(dir / "ex3.6-pearson-r3_moments.json"));
    EXPECT_TRUE(fs::exists(dir / "ex3.6-pearson-r4_moments.json"));
    const auto tables = nlohmann::json::parse(slurp(dir / "ex3.6-pearson-r3_moments.json"));
    ASSERT_EQ(tables.size(), 1u);
    EXPECT_EQ(tables[0]["n"], 64);
}

TEST(Cli, RunFileReportsSyntaxErrors) {
    const auto dir = scratch_dir("syntax");
    const auto path = dir / "broken.json";
    {
        std::ofstream os(path);
        os << "{ \"example\": ";
    }
    cli::Options opt;
    opt.command = "bound";
    opt.out_dir = dir.string();
    std::ostringstream out, err;
    EXPECT_EQ(cli::run_file(opt, path.string(), out, err), cli::kExitConfig);
    EXPECT_NE(err.str().find("[syntax]"), std::string::npos);
    EXPECT_EQ(cli::run_file(opt, (dir / "missing.json").string(), out, err), cli::kExitConfig);
}
