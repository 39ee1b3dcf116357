#include "huproso3/binary_io.hpp"
#include "huproso3/checkpoint.hpp"
#include "huproso3/kinematics.hpp"
#include "huproso3/synthetic.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace huproso3;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("huproso3_cli_" + std::string(info->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  int run(const std::string& args, const std::string& env = "") const {
    const std::string cmd = env + " " + HUPROSO3_CLI + " " + args + " > " + path("stdout.txt") + " 2> " + path("stderr.txt");
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string slurp(const std::string& name) const { return io::read_file(path(name)); }
  json read_json(const std::string& name) const { return json::parse(slurp(name)); }

  std::vector<std::string> lines(const std::string& name) const {
    std::istringstream in(slurp(name));
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
  }

  /// Small N = 3 dataset and a 10-step checkpoint in `sub`.
  void make_model(const std::string& sub) const {
    ASSERT_EQ(run("gen-data --n 500 --seed 1 --out-dir " + path(sub)), 0);
    ASSERT_EQ(run("train --data " + path(sub + "/data.bin") +
                  " --steps 10 --batch-size 32 --blocks 2 --out-dir " + path(sub)),
              0);
  }

  fs::path dir_;
};

TEST_F(Cli, GenDataWritesReadableDeterministicFile) {
  ASSERT_EQ(run("gen-data --n 200 --seed 3 --out-dir " + path("a")), 0);
  ASSERT_EQ(run("gen-data --n 200 --seed 3 --out-dir " + path("b")), 0);
  const json summary = json::parse(slurp("stdout.txt"));
  EXPECT_EQ(summary["n"], 200);
  EXPECT_EQ(summary["N"], 3);
  const PoseDataset ds = read_dataset(path("a/data.bin"));
  EXPECT_EQ(ds.size(), 200u);
  EXPECT_EQ(slurp("a/data.bin"), slurp("b/data.bin"));
  EXPECT_EQ(slurp("a/gen-data_config.json"), slurp("b/gen-data_config.json"));
}

TEST_F(Cli, GenDataFailsClosed) {
  EXPECT_EQ(run("gen-data --n 0 --out-dir " + path("z")), 1);
  EXPECT_FALSE(fs::exists(path("z/data.bin")));
  std::ofstream(path("bad.json")) << R"({"num_joints": 2})";
  EXPECT_EQ(run("gen-data --spec " + path("bad.json") + " --out-dir " + path("z")), 1);
  EXPECT_FALSE(fs::exists(path("z/data.bin")));
  EXPECT_EQ(run("gen-data --no-such-flag"), 1);
}

TEST_F(Cli, GenDataFromSpecFileAndKeypoints) {
  ASSERT_EQ(run("gen-data --joints 19 --n 5 --out-dir " + path("r")), 0);
  ASSERT_EQ(run("gen-data --spec " + path("r/spec.json") +
                " --n 5 --skeleton humanoid-19 --keypoint-dim 2 --out-dir " + path("s")),
            0);
  const PoseDataset a = read_dataset(path("r/data.bin"));
  const PoseDataset b = read_dataset(path("s/data.bin"));
  EXPECT_EQ(a.spec_digest, b.spec_digest);
  ASSERT_EQ(b.keypoints.size(), 5u);
  EXPECT_EQ(b.keypoints[0].rows(), 25);
  EXPECT_EQ(b.keypoints[0].cols(), 2);
}

TEST_F(Cli, TrainSmokeRun) {
  make_model("m");
  EXPECT_EQ(lines("m/trace.csv").size(), 11u);
  const LoadedCheckpoint ck = load_checkpoint(path("m/model.ckpt"));
  EXPECT_EQ(ck.model.num_manifolds(), 3);
  EXPECT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.meta["modality"], "prior");
  const json cfg = read_json("m/train_config.json");
  EXPECT_EQ(cfg["steps"], 10);
  EXPECT_EQ(cfg["command"], "train");
}

TEST_F(Cli, PriorTrainingIgnoresKeypoints) {
  ASSERT_EQ(run("gen-data --joints 19 --n 100 --skeleton humanoid-19 --keypoint-dim 3 --out-dir " + path("k")), 0);
  EXPECT_EQ(run("train --data " + path("k/data.bin") + " --steps 2 --batch-size 8 --blocks 1 --out-dir " + path("k")), 0);
}

TEST_F(Cli, ResumeContinuesStepCounterAndSchedule) {
  ASSERT_EQ(run("gen-data --n 300 --seed 2 --out-dir " + path("d")), 0);
  const std::string common = " --data " + path("d/data.bin") + " --batch-size 16 --blocks 2 --decay-every 4";
  ASSERT_EQ(run("train" + common + " --steps 12 --out-dir " + path("full")), 0);
  ASSERT_EQ(run("train" + common + " --steps 6 --out-dir " + path("half")), 0);
  ASSERT_EQ(run("train" + common + " --steps 12 --resume " + path("half/model.ckpt") + " --out-dir " + path("rest")), 0);
  const auto full = lines("full/trace.csv");
  const auto rest = lines("rest/trace.csv");
  ASSERT_EQ(rest.size(), 7u);
  for (std::size_t i = 1; i < rest.size(); ++i) EXPECT_EQ(rest[i], full[i + 6]);
  EXPECT_EQ(slurp("full/model.ckpt"), slurp("rest/model.ckpt"));
}

TEST_F(Cli, DivergenceExitsWithRuntimeCode) {
  ASSERT_EQ(run("gen-data --n 100 --out-dir " + path("d")), 0);
  const std::string args = "train --data " + path("d/data.bin") + " --batch-size 16 --blocks 2 --steps 5 --out-dir " + path("d");
  EXPECT_EQ(run(args + " --learning-rate 1e300"), 2);
  EXPECT_EQ(run(args + " --learning-rate -1"), 1);
  EXPECT_EQ(run(args + " --modality pose"), 1);
}

TEST_F(Cli, ConfigFileMergesUnderFlags) {
  ASSERT_EQ(run("gen-data --n 100 --out-dir " + path("d")), 0);
  std::ofstream(path("cfg.json")) << json{{"data", path("d/data.bin")}, {"steps", 5}, {"batch_size", 8}, {"blocks", 1}}.dump();
  ASSERT_EQ(run("train --config " + path("cfg.json") + " --steps 3 --out-dir " + path("o")), 0);
  EXPECT_EQ(lines("o/trace.csv").size(), 4u);
  const json echoed = read_json("o/train_config.json");
  EXPECT_EQ(echoed["steps"], 3);
  EXPECT_EQ(echoed["batch_size"], 8);

  std::ofstream(path("unknown.json")) << R"({"stepz": 3})";
  EXPECT_EQ(run("train --config " + path("unknown.json") + " --out-dir " + path("o")), 1);
  std::ofstream(path("broken.json")) << "{";
  EXPECT_EQ(run("train --config " + path("broken.json") + " --out-dir " + path("o")), 1);
}

TEST_F(Cli, OutputDirectoryFromEnvironment) {
  ASSERT_EQ(run("gen-data --n 10", "HUPROSO3_OUT_DIR=" + path("env")), 0);
  EXPECT_TRUE(fs::exists(path("env/data.bin")));
  ASSERT_EQ(run("gen-data --n 10 --out-dir " + path("flag"), "HUPROSO3_OUT_DIR=" + path("env2")), 0);
  EXPECT_TRUE(fs::exists(path("flag/data.bin")));
  EXPECT_FALSE(fs::exists(path("env2")));
}

TEST_F(Cli, SampleFromIdentityCheckpointHasZeroLogProb) {
  ASSERT_EQ(run("gen-data --n 50 --out-dir " + path("d")), 0);
  ASSERT_EQ(run("train --data " + path("d/data.bin") + " --steps 0 --blocks 2 --out-dir " + path("d")), 0);
  ASSERT_EQ(run("sample --checkpoint " + path("d/model.ckpt") + " --n 20 --out-dir " + path("d")), 0);
  const PoseDataset s = read_dataset(path("d/samples.bin"));
  ASSERT_EQ(s.log_density.size(), 20u);
  for (double v : s.log_density) EXPECT_EQ(v, 0.0);
}

TEST_F(Cli, SampleAndLogprobAgree) {
  make_model("m");
  ASSERT_EQ(run("sample --checkpoint " + path("m/model.ckpt") + " --n 50 --seed 4 --out-dir " + path("a")), 0);
  ASSERT_EQ(run("sample --checkpoint " + path("m/model.ckpt") + " --n 50 --seed 4 --out-dir " + path("b")), 0);
  EXPECT_EQ(slurp("a/samples.bin"), slurp("b/samples.bin"));
  ASSERT_EQ(run("logprob --checkpoint " + path("m/model.ckpt") + " --data " + path("a/samples.bin") + " --out-dir " + path("a")), 0);
  const PoseDataset s = read_dataset(path("a/samples.bin"));
  const auto rows = lines("a/logprob.csv");
  ASSERT_EQ(rows.size(), 51u);
  EXPECT_EQ(rows[0], "index,log_prob");
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double v = std::stod(rows[i + 1].substr(rows[i + 1].find(',') + 1));
    EXPECT_NEAR(v, s.log_density[i], 1e-8);
  }
  EXPECT_EQ(run("sample --checkpoint " + path("m/model.ckpt") + " --ctx " + path("a/samples.bin") + " --out-dir " + path("a")), 1);
}

TEST_F(Cli, ConditionalSampleNeedsContext) {
  ASSERT_EQ(run("gen-data --joints 19 --n 40 --skeleton humanoid-19 --keypoint-dim 3 --out-dir " + path("d")), 0);
  ASSERT_EQ(run("train --data " + path("d/data.bin") +
                " --modality ik --steps 2 --batch-size 4 --blocks 1 --mask-probability 0.3 --out-dir " + path("d")),
            0);
  EXPECT_EQ(run("sample --checkpoint " + path("d/model.ckpt") + " --n 3 --out-dir " + path("d")), 1);
  json ctx = {{"keypoints", json::array()}};
  for (int j = 0; j < 25; ++j) ctx["keypoints"].push_back({0.1 * j, 0.0, 0.0});
  std::ofstream(path("ctx.json")) << ctx.dump();
  ASSERT_EQ(run("sample --checkpoint " + path("d/model.ckpt") + " --n 3 --ctx " + path("ctx.json") + " --out-dir " + path("d")), 0);
  EXPECT_EQ(read_dataset(path("d/samples.bin")).size(), 3u);
  ASSERT_EQ(run("logprob --checkpoint " + path("d/model.ckpt") + " --data " + path("d/data.bin") + " --out-dir " + path("d")), 0);
  EXPECT_EQ(lines("d/logprob.csv").size(), 41u);

  // Protocol and modality must agree.
  EXPECT_EQ(run("eval --checkpoint " + path("d/model.ckpt") + " --data " + path("d/data.bin") + " --protocol uplift --out-dir " + path("d")), 1);
  EXPECT_EQ(run("eval --checkpoint " + path("d/model.ckpt") + " --data " + path("d/data.bin") + " --protocol prior --out-dir " + path("d")), 1);
}

TEST_F(Cli, FivePointEchoesOccludedJoints) {
  ASSERT_EQ(run("gen-data --joints 19 --n 6 --skeleton humanoid-19 --keypoint-dim 3 --out-dir " + path("d")), 0);
  ASSERT_EQ(run("train --data " + path("d/data.bin") + " --modality ik --steps 0 --blocks 1 --out-dir " + path("d")), 0);
  const std::string args = "eval --checkpoint " + path("d/model.ckpt") + " --data " + path("d/data.bin") +
                           " --protocol five-point --diversity-samples 2 --out-dir ";
  ASSERT_EQ(run(args + path("e1")), 0);
  ASSERT_EQ(run(args + path("e2")), 0);
  const Skeleton skel = humanoid_skeleton();
  std::vector<std::string> expected;
  for (int j = 0; j < skel.num_joints(); ++j) {
    if (std::find(skel.leaf_set.begin(), skel.leaf_set.end(), j) == skel.leaf_set.end()) expected.push_back(skel.names[static_cast<std::size_t>(j)]);
  }
  const json summary = read_json("e1/summary.json");
  EXPECT_EQ(summary["occluded_joints"].get<std::vector<std::string>>(), expected);
  EXPECT_EQ(slurp("e1/summary.json"), slurp("e2/summary.json"));
  EXPECT_EQ(slurp("e1/reports.csv"), slurp("e2/reports.csv"));
}

TEST_F(Cli, PriorEvalOnIdenticalSetsIsZero) {
  make_model("m");
  ASSERT_EQ(run("sample --checkpoint " + path("m/model.ckpt") + " --n 40 --seed 9 --out-dir " + path("m")), 0);
  ASSERT_EQ(run("eval --checkpoint " + path("m/model.ckpt") + " --data " + path("m/samples.bin") +
                " --model-samples 40 --seed 9 --out-dir " + path("e")),
            0);
  const json summary = read_json("e/summary.json");
  for (const auto& r : summary["reports"]) {
    EXPECT_EQ(r["mean"], 0.0);
    EXPECT_EQ(r["median"], 0.0);
  }
  EXPECT_TRUE(fs::exists(path("e/precision_curve.csv")));
  EXPECT_TRUE(fs::exists(path("e/recall_curve.csv")));
}

TEST_F(Cli, CheckFreshModelPasses) {
  ASSERT_EQ(run("check --mc-samples 20000 --out-dir " + path("c")), 0);
  const json report = read_json("c/check_report.json");
  EXPECT_TRUE(report["pass"].get<bool>());
  ASSERT_EQ(report["checks"].size(), 4u);
  EXPECT_EQ(report["checks"][3]["value"], 1.0);
}

TEST_F(Cli, CheckReportsPerCheckResults) {
  make_model("m");
  LoadedCheckpoint ck = load_checkpoint(path("m/model.ckpt"));
  ad::ParamStore& params = ck.model.params();
  params.mutable_value(params.size() - 1)(0, 0) += 3.0;
  save_checkpoint(path("m/corrupt.ckpt"), ck.model, ck.meta);
  const int rc = run("check --checkpoint " + path("m/corrupt.ckpt") + " --mc-samples 20000 --out-dir " + path("c"));
  const json report = read_json("c/check_report.json");
  ASSERT_EQ(report["checks"].size(), 4u);
  bool all = true;
  for (const auto& c : report["checks"]) {
    all = all && c["pass"].get<bool>();
    if (c["check"] == "roundtrip" || c["check"] == "logdet_sum") EXPECT_TRUE(c["pass"].get<bool>()) << c.dump();
  }
  EXPECT_EQ(report["pass"].get<bool>(), all);
  EXPECT_EQ(rc, all ? 0 : 3);
  EXPECT_EQ(run("check --checkpoint " + path("missing.ckpt") + " --out-dir " + path("c")), 2);
}

}  // namespace
