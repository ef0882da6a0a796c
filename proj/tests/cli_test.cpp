#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "shortcut_cli_test";

struct CliRun {
  int code;
  std::string out;
};

CliRun cli(const std::string& args) {
  const fs::path log = kRoot / "last.log";
  const std::string cmd = std::string(SHORTCUT_CLI) + " --project " + (kRoot / "p").string() + " " + args +
                          " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    ASSERT_EQ(cli("synth --per-class 40 --shape 1x32x32 --seed 3").code, 0);
    ASSERT_EQ(cli("inject --rate 0.5").code, 0);
    ASSERT_EQ(cli("train --epochs 2").code, 0);
  }
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("train --no-such-flag 3").code, 1);
  EXPECT_EQ(cli("mitigate").code, 1);
  EXPECT_EQ(cli("cav eval --split nowhere").code, 1);
  std::ofstream(kRoot / "bad.ini") << "[model]\nbogus = 1\n";
  EXPECT_EQ(cli("--config " + (kRoot / "bad.ini").string() + " train").code, 1);
}

TEST_F(Cli, RuntimeFailuresExitTwo) {
  CliRun r = cli("train --dataset " + (kRoot / "missing").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("error:"), std::string::npos);
  EXPECT_EQ(cli("mitigate pclarc --cav " + (kRoot / "missing.json").string()).code, 2);
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  std::ofstream(kRoot / "c.ini") << "[model]\nepochs = 11\nlr = 0.2\n";
  CliRun r = cli("--config " + (kRoot / "c.ini").string() + " --print-config train --epochs 4");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("epochs = 4"), std::string::npos);
  EXPECT_NE(r.out.find("lr = 0.2"), std::string::npos);
}

TEST_F(Cli, CavFitIsByteIdentical) {
  ASSERT_EQ(cli("cav fit --method pattern --layer pool3 --out " + (kRoot / "a.json").string()).code, 0);
  ASSERT_EQ(cli("cav fit --method pattern --layer pool3 --out " + (kRoot / "b.json").string()).code, 0);
  EXPECT_EQ(slurp(kRoot / "a.json"), slurp(kRoot / "b.json"));
  EXPECT_FALSE(slurp(kRoot / "a.json").empty());
}

TEST_F(Cli, ReportsShareFields) {
  ASSERT_EQ(cli("cav fit --method pattern --layer pool3").code, 0);
  ASSERT_EQ(cli("evaluate").code, 0);
  ASSERT_EQ(cli("mitigate pclarc").code, 0);
  ASSERT_EQ(cli("evaluate --model pclarc").code, 0);
  json a = json::parse(slurp(kRoot / "p/reports/vanilla.json"));
  json b = json::parse(slurp(kRoot / "p/reports/pclarc.json"));
  for (const auto& [key, value] : a.items()) EXPECT_TRUE(b.contains(key)) << key;
  EXPECT_EQ(a.size(), b.size());
  EXPECT_EQ(b["method"], "pclarc");
  EXPECT_TRUE(b["artifact_relevance"].is_null());
}

TEST_F(Cli, RankAndLocalizeWriteOutputs) {
  ASSERT_EQ(cli("cav fit --layer pool3").code, 0);
  ASSERT_EQ(cli("rank").code, 0);
  EXPECT_TRUE(fs::exists(kRoot / "p/scores/artifact.csv"));
  json q = json::parse(slurp(kRoot / "p/scores/artifact_queue.json"));
  EXPECT_EQ(q["order"].size(), 64u);
  ASSERT_EQ(cli("localize").code, 0);
  json l = json::parse(slurp(kRoot / "p/localization/artifact.json"));
  EXPECT_FALSE(l["samples"].empty());
  EXPECT_TRUE(fs::exists(kRoot / "p/localization/masks"));
}

TEST_F(Cli, RevealWritesJsonAndScatter) {
  for (const std::string cmd : {"spray", "concepts", "pcx"}) {
    ASSERT_EQ(cli("reveal " + cmd + " --k 2").code, 0) << cmd;
    EXPECT_TRUE(fs::exists(kRoot / "p/reveal" / (cmd + ".json"))) << cmd;
    EXPECT_EQ(slurp(kRoot / "p/reveal" / (cmd + ".png")).substr(1, 3), "PNG") << cmd;
  }
}
