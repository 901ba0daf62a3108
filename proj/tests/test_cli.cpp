// End-to-end checks of the command-line driver: the binary is spawned via the
// path baked in at configure time (LMBF_CLI_PATH).

#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output; // stdout and stderr merged
};

RunResult run_cli(const std::string& args) {
    const std::string cmd = std::string(LMBF_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    EXPECT_NE(pipe, nullptr) << cmd;
    RunResult r;
    std::array<char, 4096> buf{};
    size_t n = 0;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
    const int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static inline int counter = 0;
};

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::trunc);
    os << text;
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// Parses "<label> <number> ..." rows, returning number by label.
int64_t row_value(const std::string& table, const std::string& label) {
    std::istringstream is(table);
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string first;
        int64_t value = -1;
        if (ls >> first >> value && first == label) return value;
    }
    ADD_FAILURE() << "row '" << label << "' not found in:\n" << table;
    return -1;
}

} // namespace

TEST(Cli, HelpExitsZero) {
    auto r = run_cli("--help");
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_NE(r.output.find("Subcommands"), std::string::npos);
}

TEST(Cli, UnknownSubcommandIsUsageError) {
    auto r = run_cli("frobnicate");
    EXPECT_EQ(r.exit_code, 1);
    EXPECT_NE(r.output.find("Usage"), std::string::npos);
}

TEST(Cli, UnknownFlagIsUsageError) {
    auto r = run_cli("ablate --frobnicate");
    EXPECT_EQ(r.exit_code, 1);
}

TEST(Cli, MissingConfigFileIsRuntimeError) {
    auto r = run_cli("train --config /nonexistent.cfg --out /tmp/never");
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.output.find("cannot open"), std::string::npos);
}

TEST(Cli, ParamsFullTotalIsNearTableValue) {
    auto r = run_cli("params --config FULL");
    ASSERT_EQ(r.exit_code, 0) << r.output;
    const int64_t total = row_value(r.output, "total");
    // 0.191M plus/minus 15 percent.
    EXPECT_GE(total, 162350);
    EXPECT_LE(total, 219650);
}

TEST(Cli, ParamsRejectsUnknownId) {
    auto r = run_cli("params --config NOPE");
    EXPECT_EQ(r.exit_code, 2);
}

TEST(Cli, AblateLadderIsStrictlyIncreasing) {
    auto r = run_cli("ablate");
    ASSERT_EQ(r.exit_code, 0) << r.output;
    const int64_t brp = row_value(r.output, "BRP");
    const int64_t mrb13 = row_value(r.output, "BRP_MRB13");
    const int64_t mrb135 = row_value(r.output, "BRP_MRB135");
    const int64_t full = row_value(r.output, "FULL");
    EXPECT_LT(brp, mrb13);
    EXPECT_LT(mrb13, mrb135);
    EXPECT_LT(mrb135, full);
    // Patch-size rows change the pipeline, not the network.
    EXPECT_EQ(row_value(r.output, "BRP_MRB135_P64"), mrb135);
    EXPECT_EQ(row_value(r.output, "BRP_MRB135_P128"), mrb135);
}

TEST(Cli, SynthRerunsAreByteIdentical) {
    TempDir a("lmbf-cli-synth-a"), b("lmbf-cli-synth-b");
    auto ra = run_cli("synth --seed 7 --out " + a.path.string());
    auto rb = run_cli("synth --seed 7 --out " + b.path.string());
    ASSERT_EQ(ra.exit_code, 0) << ra.output;
    ASSERT_EQ(rb.exit_code, 0) << rb.output;
    size_t files = 0;
    for (const auto& entry : fs::recursive_directory_iterator(a.path)) {
        if (!entry.is_regular_file()) continue;
        ++files;
        const fs::path rel = fs::relative(entry.path(), a.path);
        ASSERT_TRUE(fs::exists(b.path / rel)) << rel;
        EXPECT_EQ(read_file(entry.path()), read_file(b.path / rel)) << rel;
    }
    EXPECT_EQ(files, 16u); // 8 images + 8 masks
}

TEST(Cli, PatchifyWritesManifest) {
    TempDir data("lmbf-cli-pf-data"), out("lmbf-cli-pf-out");
    ASSERT_EQ(run_cli("synth --seed 3 --out " + data.path.string()).exit_code, 0);
    write_file(out.path / "pf.cfg", "data = " + data.path.string() +
                                        "\nsplit = train\nfeature = vessels\npatch = 32\n");
    auto r = run_cli("patchify --config " + (out.path / "pf.cfg").string() + " --out " + out.path.string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    const std::string manifest = read_file(out.path / "manifest.csv");
    EXPECT_NE(manifest.find("source_id,grid_row,grid_col,fg_pixels,kept"), std::string::npos);
    // 8 images, each 64x64 tiled at 32 -> 4 patches: header + 32 rows.
    EXPECT_EQ(std::count(manifest.begin(), manifest.end(), '\n'), 33);
}

TEST(Cli, GradcheckSuitePassesAndExitsZero) {
    auto r = run_cli("gradcheck");
    ASSERT_EQ(r.exit_code, 0) << r.output;
    EXPECT_NE(r.output.find("forward_bidirectional"), std::string::npos);
    EXPECT_EQ(r.output.find("FAIL"), std::string::npos) << r.output;
}

TEST(Cli, TrainEvalRoundTrip) {
    TempDir out("lmbf-cli-train");
    write_file(out.path / "tr.cfg",
               "synth_images = 2\nsize = 32\nconfig_id = BRP\nwidth_reduced = 1\n"
               "lr = 1e-3\nepochs = 3\nbatch = 1\nseed = 4\ncheckpoints = 1\n");
    auto r = run_cli("train --config " + (out.path / "tr.cfg").string() + " --out " + out.path.string());
    ASSERT_EQ(r.exit_code, 0) << r.output;
    EXPECT_TRUE(fs::exists(out.path / "history.csv"));
    EXPECT_TRUE(fs::exists(out.path / "final" / "manifest.txt"));
    EXPECT_TRUE(fs::exists(out.path / "checkpoints" / "epoch_0003" / "manifest.txt"));
    const std::string history = read_file(out.path / "history.csv");
    EXPECT_NE(history.find("epoch,loss,sn,sp,acc,f1,auc"), std::string::npos);
    EXPECT_EQ(std::count(history.begin(), history.end(), '\n'), 4); // header + 3 epochs

    write_file(out.path / "ev.cfg", "synth_images = 2\nsize = 32\nconfig_id = BRP\nwidth_reduced = 1\n"
                                    "checkpoint = " + (out.path / "final").string() + "\n");
    auto e = run_cli("eval --config " + (out.path / "ev.cfg").string());
    ASSERT_EQ(e.exit_code, 0) << e.output;
    EXPECT_NE(e.output.find("pooled"), std::string::npos);
    EXPECT_NE(e.output.find("synth-1"), std::string::npos);
}

TEST(Cli, DivergedTrainingExitsThree) {
    TempDir out("lmbf-cli-div");
    write_file(out.path / "dv.cfg", "synth_images = 1\nsize = 32\nconfig_id = BRP\nwidth_reduced = 1\n"
                                    "lr = 1e20\nepochs = 2\nbatch = 1\n");
    auto r = run_cli("train --config " + (out.path / "dv.cfg").string() + " --out " + out.path.string());
    EXPECT_EQ(r.exit_code, 3);
    EXPECT_NE(r.output.find("diverged"), std::string::npos);
}
