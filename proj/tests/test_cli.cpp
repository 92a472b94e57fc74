#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(VIGOR_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) return {};
  RunResult r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("vigor_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, SynthThenVerifyAcrossSeeds) {
  for (int seed = 0; seed < 10; ++seed) {
    const std::string style = seed % 2 == 0 ? "warmup" : "natural";
    const std::string relation = seed % 3 == 0 ? "nearest" : "farthest";
    const std::string file = path("d" + std::to_string(seed) + ".jsonl");
    ASSERT_EQ(run("synth --scenes 100 --seed " + std::to_string(seed) + " --style " + style + " --relation " +
                  relation + " --out " + file)
                  .code,
              0);
    const auto v = run("verify --data " + file);
    EXPECT_EQ(v.code, 0) << v.out;
    EXPECT_NE(v.out.find("verified 100/100 records"), std::string::npos) << v.out;
  }
}

TEST_F(Cli, SynthIsDeterministic) {
  ASSERT_EQ(run("synth --scenes 20 --seed 4 --out " + path("a.jsonl")).code, 0);
  ASSERT_EQ(run("synth --scenes 20 --seed 4 --out " + path("b.jsonl")).code, 0);
  ASSERT_EQ(run("synth --scenes 20 --seed 5 --out " + path("c.jsonl")).code, 0);
  EXPECT_EQ(slurp(path("a.jsonl")), slurp(path("b.jsonl")));
  EXPECT_NE(slurp(path("a.jsonl")), slurp(path("c.jsonl")));
}

TEST_F(Cli, ZeroScenesWritesEmptyFile) {
  ASSERT_EQ(run("synth --scenes 0 --out " + path("e.jsonl")).code, 0);
  EXPECT_TRUE(slurp(path("e.jsonl")).empty());
  const auto v = run("verify --data " + path("e.jsonl"));
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find("verified 0/0"), std::string::npos);
}

TEST_F(Cli, SynthRecordFields) {
  ASSERT_EQ(run("synth --scenes 3 --order-len 3 --proposals 4:6 --out " + path("r.jsonl")).code, 0);
  std::ifstream in(path("r.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("order").size(), 3u);
    EXPECT_GE(j.at("proposals").size(), 4u);
    EXPECT_LE(j.at("proposals").size(), 6u);
    EXPECT_EQ(j.at("anchor_ids").back(), j.at("target_id"));
    ++n;
  }
  EXPECT_EQ(n, 3);
}

TEST_F(Cli, VerifyFlagsTamperedRecord) {
  ASSERT_EQ(run("synth --scenes 2 --out " + path("t.jsonl")).code, 0);
  std::ifstream in(path("t.jsonl"));
  std::string first, second;
  std::getline(in, first);
  std::getline(in, second);
  auto j = nlohmann::json::parse(first);
  const int wrong = (j["target_id"].get<int>() + 1) % static_cast<int>(j["proposals"].size());
  j["target_id"] = wrong;
  j["anchor_ids"].back() = wrong;
  std::ofstream(path("t2.jsonl")) << j.dump() << '\n' << second << '\n';
  const auto v = run("verify --data " + path("t2.jsonl"));
  EXPECT_EQ(v.code, 1);
  EXPECT_NE(v.out.find("verified 1/2"), std::string::npos) << v.out;
}

TEST_F(Cli, ParsePrintsArrowOrder) {
  const auto r = run(
      "parse --desc \"There is a door in the room, find the table farthest to it, finally you can see the chair "
      "farthest to that table.\"");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "door\xE2\x86\x92table\xE2\x86\x92" "chair\n");
}

TEST_F(Cli, ParseWithCannedTranscript) {
  const auto r = run("parse --parser llm --transcript " VIGOR_TEST_DATA
                     "/parse_examples.jsonl --desc \"The pillow closest to the foot of the bed.\"");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "bed\xE2\x86\x92pillow\n");
}

TEST_F(Cli, ParseWithCustomVocab) {
  std::ofstream(path("v.txt")) << "# classes\nmug\ncoffee table\n";
  const auto r = run("parse --vocab " + path("v.txt") + " --desc \"the mug on the coffee table\"");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "mug\xE2\x86\x92" "coffee table\n");
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("synth").code, 2);
  EXPECT_EQ(run("synth --proposals 3:x --out " + path("x.jsonl")).code, 2);
  EXPECT_EQ(run("synth --proposals 6:3 --out " + path("x.jsonl")).code, 2);
  EXPECT_EQ(run("synth --relation left --out " + path("x.jsonl")).code, 2);
  EXPECT_EQ(run("synth --out /nonexistent_dir/x.jsonl").code, 3);
  EXPECT_EQ(run("verify --data " + path("missing.jsonl")).code, 3);
  EXPECT_EQ(run("eval --data " + path("missing.jsonl") + " --ckpt " + path("missing.ckpt")).code, 3);
  EXPECT_EQ(run("parse --desc \"nothing to see\"").code, 1);
  EXPECT_EQ(run("train --main-steps 3 --out " + path("m.ckpt")).code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, LlmParserWithoutEndpointIsUsageError) {
  ::unsetenv("VIGOR_LLM_ENDPOINT");
  EXPECT_EQ(run("parse --parser llm --desc \"the lamp\"").code, 2);
}

TEST_F(Cli, TrainEvalAndResume) {
  ASSERT_EQ(run("synth --scenes 12 --style natural --order-len 3 --seed 2 --out " + path("n.jsonl")).code, 0);
  const std::string common = " --d 8 --batch-size 2 --log-every 0 --main-data " + path("n.jsonl");
  ASSERT_EQ(run("train --warmup-steps 3 --main-steps 2" + common + " --out " + path("a.ckpt")).code, 0);
  ASSERT_EQ(run("train --warmup-steps 3 --main-steps 2" + common + " --out " + path("b.ckpt")).code, 0);
  EXPECT_EQ(slurp(path("a.ckpt")), slurp(path("b.ckpt")));

  ASSERT_EQ(run("train --warmup-steps 3 --main-steps 0" + common + " --out " + path("half.ckpt")).code, 0);
  ASSERT_EQ(run("train --warmup-steps 3 --main-steps 2" + common + " --resume " + path("half.ckpt") + " --out " +
                path("c.ckpt"))
                .code,
            0);
  EXPECT_EQ(slurp(path("a.ckpt")), slurp(path("c.ckpt")));

  const auto e = run("eval --data " + path("n.jsonl") + " --ckpt " + path("a.ckpt") +
                     " --breakdown order_length,distractors --threads 2 --dump-responses " + path("resp.jsonl"));
  ASSERT_EQ(e.code, 0);
  const auto report = nlohmann::json::parse(e.out);
  EXPECT_EQ(report.at("count"), 12);
  EXPECT_GE(report.at("accuracy").get<double>(), 0.0);
  EXPECT_TRUE(report.at("subsets").contains("order_length"));
  std::ifstream resp(path("resp.jsonl"));
  std::string line;
  std::getline(resp, line);
  EXPECT_EQ(nlohmann::json::parse(line).at("responses").size(), 5u);

  ASSERT_EQ(run("eval --parser stored --data " + path("n.jsonl") + " --ckpt " + path("a.ckpt") + " --report " +
                path("rep.json"))
                .code,
            0);
  EXPECT_EQ(nlohmann::json::parse(slurp(path("rep.json"))).at("accuracy"), report.at("accuracy"));
  EXPECT_EQ(run("eval --breakdown colour --data " + path("n.jsonl") + " --ckpt " + path("a.ckpt")).code, 2);

  std::ofstream(path("cfg.json")) << R"({"model": {"d": 16}})";
  ASSERT_EQ(run("train --warmup-steps 1 --config " + path("cfg.json") + " --log-every 0 --out " + path("w.ckpt")).code,
            0);
  std::ofstream(path("bad.ckpt")) << "garbage";
  EXPECT_EQ(run("eval --data " + path("n.jsonl") + " --ckpt " + path("bad.ckpt")).code, 3);
}

TEST_F(Cli, GradcheckPasses) {
  const auto r = run("gradcheck --seed 0");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("max_rel_err"), std::string::npos);
}
