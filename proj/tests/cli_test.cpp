// End-to-end tests for the command-line binary. The test runner receives the
// binary path and the corpus path as positional arguments (see the CMake
// add_test wiring) and drives the tool through subprocesses.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kha/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

std::string g_bin;
std::string g_corpus;
fs::path g_work;

struct CmdResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr combined
};

CmdResult run_cli(const std::string& args) {
    const std::string cmd = g_bin + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    CmdResult r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) {
        r.output = "popen failed";
        return r;
    }
    std::size_t n = 0;
    while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) {
        r.output.append(buf.data(), n);
    }
    const int status = pclose(p);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    ASSERT_TRUE(f.is_open()) << path;
    f << text;
}

std::string slurp(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    EXPECT_TRUE(f.is_open()) << path;
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::string tiny_config(std::size_t steps, const std::string& extra = "", std::uint64_t seed = 5) {
    return "model.layers = 1\n"
           "model.d = 16\n"
           "model.n_heads = 2\n"
           "model.kv_groups = 1\n"
           "train.steps = " +
           std::to_string(steps) +
           "\n"
           "train.seq_len = 16\n"
           "train.batch_tokens = 32\n"
           "train.seed = " +
           std::to_string(seed) +
           "\n"
           "data.corpus_path = " +
           g_corpus + "\n" + extra;
}

// Trains into g_work/<name> once; later callers reuse the artifacts.
fs::path ensure_run(const std::string& name, std::size_t steps, const std::string& extra = "",
                    std::uint64_t seed = 5) {
    const fs::path dir = g_work / name;
    if (!fs::exists(dir / "run.json")) {
        const fs::path cfg = g_work / (name + ".cfg");
        write_file(cfg, tiny_config(steps, extra, seed));
        const CmdResult r = run_cli("train --config " + cfg.string() + " --out " + dir.string());
        EXPECT_EQ(r.exit_code, 0) << r.output;
    }
    return dir;
}

std::size_t line_count(const std::string& text) {
    std::size_t n = 0;
    for (char c : text) n += c == '\n';
    return n;
}

}  // namespace

TEST(CliUsage, MissingSubcommandOrOptionsExitTwo) {
    EXPECT_EQ(run_cli("").exit_code, 2);
    EXPECT_EQ(run_cli("train").exit_code, 2);  // --config is required
    EXPECT_EQ(run_cli("no-such-command").exit_code, 2);
    EXPECT_EQ(run_cli("--help").exit_code, 0);
}

TEST(CliFlops, PrintsReferencePointAndRatios) {
    const CmdResult r = run_cli("flops");
    EXPECT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("34359738368"), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("38654705664"), std::string::npos);
    EXPECT_NE(r.output.find("73014444032"), std::string::npos);
    EXPECT_NE(r.output.find("402653184"), std::string::npos);
    EXPECT_NE(r.output.find("0.55%"), std::string::npos);
    EXPECT_NE(r.output.find("1.17%"), std::string::npos);
}

TEST(CliFlops, JsonReportRoundTrips) {
    const fs::path out = g_work / "flops.json";
    const CmdResult r = run_cli("flops --json " + out.string());
    EXPECT_EQ(r.exit_code, 0) << r.output;
    const auto j = nlohmann::json::parse(slurp(out));
    EXPECT_EQ(j.at("mha").get<std::string>(), "34359738368");
    EXPECT_EQ(j.at("total").get<std::string>(), "73014444032");
    EXPECT_EQ(j.at("kha").get<std::string>(), "402653184");
    EXPECT_DOUBLE_EQ(j.at("kha_over_mha").get<double>(), 0.01171875);
}

TEST(CliFlops, ZeroDimensionExitsTwo) {
    const CmdResult r = run_cli("flops --L 0");
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("positive"), std::string::npos) << r.output;
}

TEST(CliTrain, WritesArtifactsDeterministically) {
    const fs::path run1 = ensure_run("baseline", 4);

    const std::string csv = slurp(run1 / "loss.csv");
    EXPECT_EQ(line_count(csv), 5u);  // header + one row per step
    EXPECT_EQ(csv.rfind("step,loss,lr,grad_norm\n", 0), 0u);

    const auto j = nlohmann::json::parse(slurp(run1 / "run.json"));
    EXPECT_EQ(j.at("steps").get<std::size_t>(), 4u);
    EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 5u);
    EXPECT_EQ(j.at("losses").size(), 4u);
    EXPECT_EQ(j.at("config").at("kha_kind").get<std::string>(), "none");

    const auto entries = kha::read_checkpoint((run1 / "model.khac").string());
    EXPECT_GT(entries.size(), 20u);  // meta plus every weight tensor

    // A rerun of the same config is byte-identical.
    const fs::path cfg = g_work / "baseline.cfg";
    const fs::path run2 = g_work / "baseline_rerun";
    const CmdResult b = run_cli("train --config " + cfg.string() + " --out " + run2.string());
    ASSERT_EQ(b.exit_code, 0) << b.output;
    EXPECT_NE(b.output.find("trained 4 steps"), std::string::npos) << b.output;
    EXPECT_EQ(slurp(run1 / "loss.csv"), slurp(run2 / "loss.csv"));
    EXPECT_EQ(slurp(run1 / "model.khac"), slurp(run2 / "model.khac"));
}

TEST(CliTrain, ZeroStepsWriteHeaderOnlyCsv) {
    const fs::path out = ensure_run("zero_steps", 0);
    EXPECT_EQ(slurp(out / "loss.csv"), "step,loss,lr,grad_norm\n");
    EXPECT_TRUE(fs::exists(out / "model.khac"));
}

TEST(CliTrain, ConfigProblemsExitTwo) {
    const fs::path cfg = g_work / "bad.cfg";
    write_file(cfg, "model.flavor = spicy\n");
    const CmdResult r = run_cli("train --config " + cfg.string());
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("unknown key"), std::string::npos) << r.output;

    const CmdResult missing = run_cli("train --config /no/such/file.cfg");
    EXPECT_EQ(missing.exit_code, 2);
}

TEST(CliTrain, DivergenceExitsThree) {
    const fs::path cfg = g_work / "diverge.cfg";
    write_file(cfg, tiny_config(2, "train.lr_peak = inf\n"));
    const fs::path out = g_work / "diverge";
    const CmdResult r = run_cli("train --config " + cfg.string() + " --out " + out.string());
    EXPECT_EQ(r.exit_code, 3);
    EXPECT_NE(r.output.find("non-finite loss"), std::string::npos) << r.output;
}

TEST(CliCompare, ReportsDeltaAndWritesCsv) {
    const fs::path run_a = ensure_run("baseline", 4);
    const fs::path run_b = ensure_run("other_seed", 4, "", 6);

    const fs::path csv = g_work / "cmp.csv";
    const CmdResult r = run_cli("compare " + (run_a / "run.json").string() + " " +
                                (run_b / "run.json").string() + " --out " + csv.string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("run A: final"), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("delta_final (B - A):"), std::string::npos);
    EXPECT_NE(r.output.find("delta_spikes (B - A):"), std::string::npos);
    const std::string body = slurp(csv);
    EXPECT_EQ(body.rfind("step,loss_a,loss_b,diff\n", 0), 0u);
    EXPECT_EQ(line_count(body), 5u);
}

TEST(CliCompare, MismatchedStepCountsExitTwo) {
    const fs::path run_a = ensure_run("baseline", 4);
    const fs::path run_short = ensure_run("short_run", 2);
    const CmdResult r = run_cli("compare " + (run_a / "run.json").string() + " " +
                                (run_short / "run.json").string());
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("step counts differ"), std::string::npos) << r.output;
}

TEST(CliAbsorb, FoldsLinearKnockingAndVerifies) {
    const fs::path run = ensure_run(
        "linear_run", 2,
        "kha.kind = linear\nkha.sites = qkv\nkha.init = random\nkha.random_std = 0.2\n");

    const fs::path in = run / "model.khac", out = g_work / "linear_absorbed.khac";
    const CmdResult r = run_cli("absorb " + in.string() + " " + out.string() + " --verify");
    ASSERT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("verify: max |delta|"), std::string::npos) << r.output;

    const auto entries = kha::read_checkpoint(out.string());
    const kha::CheckpointMeta meta(entries);
    EXPECT_TRUE(meta.get_flag("absorbed"));
    EXPECT_EQ(meta.get_u64("kha_kind"), 0u);
    for (const auto& e : entries) {
        EXPECT_EQ(e.name.find(".kha."), std::string::npos) << e.name;
    }

    // A second absorption has nothing left to fold.
    const CmdResult again = run_cli("absorb " + out.string() + " " + (g_work / "x.khac").string());
    EXPECT_EQ(again.exit_code, 2);
    EXPECT_NE(again.output.find("no knocking projections"), std::string::npos) << again.output;
}

TEST(CliAbsorb, NonLinearKindsAreRejected) {
    const fs::path mlp_run = ensure_run("mlp_run", 1, "kha.kind = mlp\n");
    const CmdResult r = run_cli("absorb " + (mlp_run / "model.khac").string() + " " +
                                (g_work / "y.khac").string());
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("not absorbable"), std::string::npos) << r.output;

    const fs::path base_run = ensure_run("baseline", 4);
    const CmdResult base = run_cli("absorb " + (base_run / "model.khac").string() + " " +
                                   (g_work / "z.khac").string());
    EXPECT_EQ(base.exit_code, 2);
    EXPECT_NE(base.output.find("no knocking projections"), std::string::npos) << base.output;
}

TEST(CliHeatmap, ExportsClippedMatrixAndPgm) {
    // A zero-step run keeps the diagonal initialization bit-exact, so the
    // exported up-projection is exactly the identity.
    const fs::path run = ensure_run("mlp_pristine", 0, "kha.kind = mlp\n");

    const fs::path csv = g_work / "hm_up.csv", pgm = g_work / "hm_up.pgm";
    const CmdResult r = run_cli("export-heatmap " + (run / "model.khac").string() + " " +
                                csv.string() + " " + pgm.string() + " --layer 0 --matrix up");
    ASSERT_EQ(r.exit_code, 0) << r.output;

    std::ifstream cf(csv);
    std::string line;
    std::size_t row = 0;
    while (std::getline(cf, line)) {
        std::istringstream ls(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(ls, cell, ',')) {
            EXPECT_DOUBLE_EQ(std::stod(cell), row == col ? 1.0 : 0.0)
                << "row " << row << " col " << col;
            col += 1;
        }
        EXPECT_EQ(col, 8u);
        row += 1;
    }
    EXPECT_EQ(row, 8u);

    const std::string p = slurp(pgm);
    ASSERT_EQ(p.rfind("P5\n8 8\n255\n", 0), 0u);
    const std::string pixels = p.substr(11);
    ASSERT_EQ(pixels.size(), 64u);
    for (std::size_t i = 0; i < 8; ++i) {
        for (std::size_t j = 0; j < 8; ++j) {
            EXPECT_EQ(static_cast<unsigned char>(pixels[i * 8 + j]), i == j ? 255 : 0);
        }
    }
}

TEST(CliHeatmap, GateKeepsRawSignedValues) {
    const fs::path run = ensure_run("gate_pristine", 0,
                                    "kha.kind = gate\nkha.init = random\nkha.random_std = 0.5\n");
    const fs::path csv = g_work / "hm_gate.csv";
    const CmdResult r = run_cli("export-heatmap " + (run / "model.khac").string() + " " +
                                csv.string() + " --matrix gate");
    ASSERT_EQ(r.exit_code, 0) << r.output;
    // Raw export: a random gate draw must contain negative entries, which
    // the [0,1] clip applied to other matrices would have erased.
    EXPECT_NE(slurp(csv).find("-"), std::string::npos);
}

TEST(CliHeatmap, MissingTensorsAndBadNamesExitTwo) {
    const fs::path base_model = ensure_run("baseline", 4) / "model.khac";
    const fs::path csv = g_work / "hm_err.csv";
    const CmdResult absent =
        run_cli("export-heatmap " + base_model.string() + " " + csv.string() + " --matrix tv");
    EXPECT_EQ(absent.exit_code, 2);
    EXPECT_NE(absent.output.find("no tensor"), std::string::npos) << absent.output;

    const CmdResult unknown =
        run_cli("export-heatmap " + base_model.string() + " " + csv.string() + " --matrix w00t");
    EXPECT_EQ(unknown.exit_code, 2);
    EXPECT_NE(unknown.output.find("unknown matrix"), std::string::npos) << unknown.output;

    const fs::path mlp_model = ensure_run("mlp_pristine", 0, "kha.kind = mlp\n") / "model.khac";
    const CmdResult bad_layer = run_cli("export-heatmap " + mlp_model.string() + " " +
                                        csv.string() + " --layer 7 --matrix up");
    EXPECT_EQ(bad_layer.exit_code, 2);
}

int main(int argc, char** argv) {
    ::testing::InitGoogleTest(&argc, argv);
    if (argc < 3) {
        std::fprintf(stderr, "usage: %s <kha-binary> <corpus-path>\n", argv[0]);
        return 1;
    }
    g_bin = argv[1];
    g_corpus = argv[2];
    if (!fs::exists(g_bin) || !fs::exists(g_corpus)) {
        std::fprintf(stderr, "missing binary or corpus\n");
        return 1;
    }
    g_work = fs::temp_directory_path() / "kha_cli_test";
    fs::remove_all(g_work);
    fs::create_directories(g_work);
    const int rc = RUN_ALL_TESTS();
    fs::remove_all(g_work);
    return rc;
}
