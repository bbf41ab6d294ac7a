#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string output;
};

Result run(const std::string& args) {
    const std::string cmd = std::string(UNLEARN_CLI) + " " + args + " 2>&1";
    Result r{-1, {}};
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[512];
    while (std::fgets(buf, sizeof buf, p)) r.output += buf;
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path write_config(const std::string& name, const std::string& text) {
    const fs::path dir = fs::temp_directory_path() / "unlearn_cli";
    fs::create_directories(dir);
    std::ofstream(dir / name) << text;
    return dir / name;
}

const char* kTiny = R"({
  "seed": 1,
  "dataset": {"kind": "moons", "n": 80},
  "scenario": {"mode": "class-removal", "target_classes": [1], "rho": 0.5},
  "train": {"epochs": 15},
  "oracle": {"epochs": 5},
  "inversion": {"steps": 30, "batch_size": 16},
  "filtration": {"target_count": 150, "bandwidth": "fixed", "sigma": 1.0},
  "relearn": {"epochs": 2}
})";

} // namespace

TEST(Cli, HelpAndUsageErrors) {
    EXPECT_EQ(run("--help").code, 0);
    EXPECT_EQ(run("run --bogus-flag").code, 2);
    EXPECT_EQ(run("run --config x.json --stage nope").code, 2);
}

TEST(Cli, ConfigErrorsExitTwoWithLine) {
    const fs::path bad = write_config("bad.json", "{\n  \"seed\": 0,\n  \"bogus\": true\n}\n");
    const Result r = run("run --config " + bad.string() + " --out " + (bad.parent_path() / "bad_out").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.output.find("line 3"), std::string::npos) << r.output;

    const fs::path rho = write_config("rho.json", "{\"scenario\": {\"target_classes\": [1], \"rho\": 0}}");
    EXPECT_EQ(run("train --config " + rho.string()).code, 2);
    // No --config and no config.json in the output directory.
    EXPECT_EQ(run("evaluate --out " + (bad.parent_path() / "empty").string()).code, 2);
}

TEST(Cli, StagesAndMissingArtifacts) {
    const fs::path cfg = write_config("tiny.json", kTiny);
    const fs::path out = cfg.parent_path() / "tiny_out";
    fs::remove_all(out);
    EXPECT_EQ(run("train -q --config " + cfg.string() + " --out " + out.string()).code, 0);
    const Result missing = run("filter -q --out " + out.string());
    EXPECT_EQ(missing.code, 1);
    EXPECT_NE(missing.output.find("generator/weights.bin"), std::string::npos) << missing.output;

    const Result all = run("run -q --out " + out.string() + " --seed 0");
    EXPECT_EQ(all.code, 0) << all.output;
    EXPECT_NE(all.output.find("\"accuracy\""), std::string::npos) << all.output;
    EXPECT_TRUE(fs::exists(out / "report.json"));
    EXPECT_EQ(run("evaluate -q --out " + out.string()).code, 0);
    fs::remove_all(out);
}
