#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "produce/cli.hpp"
#include "produce/dataset.hpp"
#include "produce/eval.hpp"
#include "produce/model.hpp"

using namespace produce;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code = -1;
    std::string out;
    std::string err;
};

CliRun cli(std::vector<std::string> args) {
    args.insert(args.begin(), "produce");
    std::vector<const char*> argv;
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    std::ostringstream out, err;
    CliRun r;
    r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("produce_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::size_t line_count(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) {
        n += !line.empty();
    }
    return n;
}

} // namespace

TEST(Cli, HelpListsDefaults) {
    const CliRun r = cli({"--help"});
    EXPECT_EQ(r.code, kExitOk);
    for (const char* sub : {"synth", "train", "eval", "bench", "serve"}) {
        EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
    }
    const CliRun t = cli({"train", "--help"});
    EXPECT_EQ(t.code, kExitOk);
    EXPECT_NE(t.out.find("300"), std::string::npos);
    EXPECT_NE(t.out.find("0.05"), std::string::npos);
}

TEST(Cli, UsageErrors) {
    EXPECT_EQ(cli({}).code, kExitUsage);
    EXPECT_EQ(cli({"bench"}).code, kExitUsage); // missing --model
    EXPECT_EQ(cli({"synth", "--bogus", "1"}).code, kExitUsage);
    EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
    EXPECT_EQ(cli({"synth", "--per-class", "0"}).code, kExitUsage);
}

TEST(Cli, RuntimeErrors) {
    const fs::path dir = temp_dir("runtime");
    const CliRun r = cli({"bench", "--model", (dir / "missing.json").string()});
    EXPECT_EQ(r.code, kExitRuntime);
    EXPECT_NE(r.err.find("missing.json"), std::string::npos);
    EXPECT_EQ(cli({"train", "--data", (dir / "nowhere").string()}).code, kExitRuntime);
}

TEST(Cli, SynthTrainEvalBench) {
    const fs::path dir = temp_dir("e2e");
    const std::string data = (dir / "data").string();
    const std::string model = (dir / "model.json").string();
    ASSERT_EQ(cli({"synth", "--out", data, "--classes", "apple,kiwi,pear", "--per-class", "10"}).code, kExitOk);
    EXPECT_EQ(load_dataset(data).images.size(), 30u);

    const CliRun t = cli({"train", "--data", data, "--out-model", model, "--epochs", "40"});
    ASSERT_EQ(t.code, kExitOk) << t.err;
    EXPECT_TRUE(fs::exists(model + ".manifest.json"));
    const Model m = load_model(model);
    EXPECT_EQ(m.spec().class_names, (std::vector<std::string>{"apple", "kiwi", "pear"}));

    const std::string report = (dir / "report").string();
    const std::string log = (dir / "eval.jsonl").string();
    const CliRun e = cli({"eval", "--data", data, "--model", model, "--log", log, "--report", report, "--manifest",
                       model + ".manifest.json"});
    ASSERT_EQ(e.code, kExitOk) << e.err;
    EXPECT_EQ(read_log(log).size(), 6u); // 2 held out per class
    for (const char* f : {"confusion.csv", "markings.csv", "cmc.csv", "timing.json", "summary.txt"}) {
        EXPECT_TRUE(fs::exists(fs::path(report) / f)) << f;
    }
    // recomputed split with the same defaults matches the manifest
    const std::string log2 = (dir / "eval2.jsonl").string();
    ASSERT_EQ(cli({"eval", "--data", data, "--model", model, "--log", log2, "--report", report}).code, kExitOk);
    auto a = read_log(log), b = read_log(log2);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].true_class, b[i].true_class);
        EXPECT_EQ(a[i].ranking, b[i].ranking);
    }

    const std::string bench = (dir / "bench.jsonl").string();
    ASSERT_EQ(cli({"bench", "--model", model, "--runs", "5", "--images", "100", "--out", bench}).code, kExitOk);
    EXPECT_EQ(line_count(bench), 500u);
    const auto samples = read_log(bench);
    EXPECT_EQ(samples.back().run_index, 4u);
    EXPECT_EQ(timing_stats(samples).per_run_means.size(), 5u);
}

TEST(Cli, EvalRejectsMismatchedModel) {
    const fs::path dir = temp_dir("mismatch");
    const std::string data = (dir / "data").string();
    ASSERT_EQ(cli({"synth", "--out", data, "--classes", "3", "--per-class", "5"}).code, kExitOk);
    const std::string model = (dir / "model.json").string();
    save_model(build_micro_mobilenet(4, 1), model);
    EXPECT_EQ(cli({"eval", "--data", data, "--model", model, "--report", (dir / "r").string(), "--log",
                   (dir / "l.jsonl").string()})
                  .code,
              kExitRuntime);
}
