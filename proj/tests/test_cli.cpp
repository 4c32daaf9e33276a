#include "support.hpp"

#include "reusegate/checkpoint.hpp"
#include "reusegate/commands.hpp"
#include "reusegate/format.hpp"
#include "reusegate/io.hpp"

#include <gtest/gtest.h>

#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace rgtest;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream o, e;
  const int code = run_cli(args, o, e);
  return {code, o.str(), e.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("reusegate_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& leaf) const { return (dir_ / leaf).string(); }

  std::string write_config(long steps, std::uint64_t seed, double lr = 5e-4) const {
    ExperimentConfig c;
    c.model = tiny_config();
    c.train.steps = steps;
    c.train.batch = 2;
    c.train.seq_len = 3;
    c.train.seed = seed;
    c.train.lr = lr;
    const std::string p = path("config_" + std::to_string(steps) + "_" + std::to_string(seed) + ".json");
    write_text_file(p, experiment_config_json(c));
    return p;
  }

  std::string train_checkpoint() {
    const std::string ck = path("model.ckpt");
    const CliRun r = cli({"train", "--config", write_config(3, 5), "--out", ck});
    EXPECT_EQ(r.code, 0) << r.err;
    return ck;
  }

  std::vector<std::string> synth_videos(int count, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"synth", "--out", path("videos"), "--count", std::to_string(count), "--seq-len", "4"};
    args.insert(args.end(), extra.begin(), extra.end());
    const CliRun r = cli(args);
    EXPECT_EQ(r.code, 0) << r.err;
    std::vector<std::string> dirs;
    for (int i = 0; i < count; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "video_%04d", i);
      dirs.push_back(path("videos/" + std::string(name)));
    }
    return dirs;
  }

  fs::path dir_;
};

TEST_F(CliTest, MissingConfigIsAnInputError) {
  const CliRun r = cli({"train", "--config", path("nope.json"), "--out", path("m.ckpt")});
  EXPECT_EQ(r.code, kExitInput);
  EXPECT_NE(r.err.find("not found"), std::string::npos);
  EXPECT_EQ(cli({"train", "--out", path("m.ckpt")}).code, kExitInput);
  EXPECT_EQ(cli({"bogus"}).code, kExitInput);
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST_F(CliTest, TrainWritesLoadableCheckpointAndLog) {
  const std::string ck = train_checkpoint();
  const Model<float> m = Model<float>::from_checkpoint(load_checkpoint(ck));
  EXPECT_EQ(m.config(), tiny_config());
  std::ifstream log(ck + ".log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(std::isfinite(j.at("loss").get<double>()));
    ++lines;
  }
  EXPECT_EQ(lines, 3);
}

TEST_F(CliTest, SameSeedGivesByteIdenticalCheckpoints) {
  const std::string cfg = write_config(2, 9);
  ASSERT_EQ(cli({"train", "--config", cfg, "--out", path("a.ckpt")}).code, 0);
  ASSERT_EQ(cli({"train", "--config", cfg, "--out", path("b.ckpt")}).code, 0);
  ASSERT_EQ(cli({"train", "--config", cfg, "--out", path("c.ckpt"), "--seed", "10"}).code, 0);
  EXPECT_EQ(read_text_file(path("a.ckpt")), read_text_file(path("b.ckpt")));
  EXPECT_NE(read_text_file(path("a.ckpt")), read_text_file(path("c.ckpt")));
}

TEST_F(CliTest, DivergentTrainingExitsWithNumericError) {
  const CliRun r = cli({"train", "--config", write_config(20, 1, 1e12), "--out", path("x.ckpt")});
  EXPECT_EQ(r.code, kExitNumeric) << r.err;
}

TEST_F(CliTest, EvalWritesReportsAndAlwaysFullNeverReuses) {
  const std::string ck = train_checkpoint();
  const auto videos = synth_videos(2);
  std::vector<std::string> args{"eval", "--checkpoint", ck, "--mode", "always_full", "--out", path("eval")};
  args.insert(args.end(), videos.begin(), videos.end());
  const CliRun r = cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"report.json", "decisions.jsonl", "reuse.csv", "flops.csv"})
    EXPECT_TRUE(fs::exists(path(std::string("eval/") + f))) << f;
  const auto report = nlohmann::json::parse(read_text_file(path("eval/report.json")));
  EXPECT_EQ(report.at("aggregate").at("reuse_rate").get<double>(), 0.0);
  EXPECT_EQ(report.at("aggregate").at("flop_ratio").get<double>(), 1.0);

  std::istringstream dec(read_text_file(path("eval/decisions.jsonl")));
  std::string line;
  int n = 0;
  while (std::getline(dec, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("decision").get<std::string>(), "Full");
    const double p = j.at("p_gate").get<double>();
    EXPECT_TRUE(p > 0 && p < 1);
    ++n;
  }
  EXPECT_EQ(n, 2 * 3);  // frames 1..3 of two single-object videos

  std::istringstream csv(read_text_file(path("eval/reuse.csv")));
  std::getline(csv, line);
  EXPECT_EQ(line, "video,object,frames,reuse_rate,flop_ratio");
}

TEST_F(CliTest, EvalRejectsVideoWithoutFirstMask) {
  const std::string ck = train_checkpoint();
  const auto videos = synth_videos(1);
  fs::remove(fs::path(videos[0]) / mask_file_name(0));
  const CliRun r = cli({"eval", "--checkpoint", ck, videos[0], "--out", path("eval")});
  EXPECT_EQ(r.code, kExitInput);
  EXPECT_FALSE(r.err.empty());
}

TEST_F(CliTest, EvalRejectsBadFlags) {
  const std::string ck = train_checkpoint();
  const auto videos = synth_videos(1);
  EXPECT_EQ(cli({"eval", "--checkpoint", ck, videos[0], "--tau", "1.5"}).code, kExitInput);
  EXPECT_EQ(cli({"eval", "--checkpoint", ck, videos[0], "--mode", "fusion", "--tau", "0.8", "--tau2", "0.5"}).code,
            kExitInput);
  EXPECT_EQ(cli({"eval", "--checkpoint", path("missing.ckpt"), videos[0]}).code, kExitInput);
}

TEST_F(CliTest, AblateWritesOneRowPerSetting) {
  const std::string ck = train_checkpoint();
  const auto videos = synth_videos(1);
  const CliRun r = cli({"ablate", "--checkpoint", ck, videos[0], "--taus", "0.5,1.0", "--modes", "dynamic,copy,fusion",
                        "--out", path("abl")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(read_text_file(path("abl/ablation.csv")));
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(csv, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 1u + 2 * 3);
  EXPECT_EQ(rows[0], "tau,mode,J,F,JF,reuse_rate,flop_ratio");
  for (std::size_t i = 4; i < rows.size(); ++i) {  // tau = 1 collapses to the full path
    EXPECT_NE(rows[i].find(",0,1"), std::string::npos) << rows[i];
  }
  EXPECT_TRUE(fs::exists(path("abl/ablation.svg")));
}

TEST_F(CliTest, HistogramOfStaticVideosIsAllInTopBin) {
  const auto videos = synth_videos(3, {"--static-probability", "1"});
  std::vector<std::string> args{"histogram", "--out", path("hist")};
  args.insert(args.end(), videos.begin(), videos.end());
  const CliRun r = cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("pairs 9"), std::string::npos);
  EXPECT_NE(r.out.find("fraction_iou_above_0.7 1\n"), std::string::npos) << r.out;
  std::ifstream in(path("hist/histogram.csv"));
  const IoUHistogram h = read_histogram_csv(in);
  EXPECT_EQ(h.counts.back(), 9u);
}

TEST_F(CliTest, HistogramOfFastSquaresIsAllBelowThreshold) {
  const auto videos = synth_videos(3, {"--shapes", "square", "--size-min", "10", "--size-max", "10", "--velocity-min",
                                       "4", "--velocity-max", "4", "--static-probability", "0", "--axis-aligned"});
  std::vector<std::string> args{"histogram", "--out", path("hist"), "--bin-width", "0.05"};
  args.insert(args.end(), videos.begin(), videos.end());
  const CliRun r = cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("fraction_iou_above_0.7 0\n"), std::string::npos) << r.out;
  std::ifstream in(path("hist/histogram.csv"));
  const IoUHistogram h = read_histogram_csv(in);
  EXPECT_EQ(h.bins(), 20u);
  EXPECT_EQ(h.counts[8], 9u);  // IoU 60/140 ~ 0.43
  std::stringstream again;
  write_histogram_csv(again, h);
  EXPECT_EQ(again.str(), read_text_file(path("hist/histogram.csv")));
}

TEST_F(CliTest, HistogramRejectsBadBinWidth) {
  const auto videos = synth_videos(1);
  EXPECT_EQ(cli({"histogram", videos[0], "--bin-width", "0", "--out", path("h")}).code, kExitInput);
}

TEST_F(CliTest, SynthVideosRoundTripThroughDisk) {
  const auto videos = synth_videos(1, {"--seed", "77"});
  const VideoOnDisk v = load_video(videos[0]);
  SynthConfig sc;
  sc.seq_len = 4;
  const SynthSequence seq = synth_sequence(sc, mix_seed(77, 0));
  EXPECT_EQ(v.frames, seq.frames);
  ASSERT_EQ(v.labels.size(), seq.masks.size());
  for (std::size_t i = 0; i < seq.masks.size(); ++i) EXPECT_EQ(v.labels[i].object_mask(1), seq.masks[i]);
}

TEST_F(CliTest, ExecutableReportsExitCodes) {
  const std::string exe = REUSEGATE_CLI_PATH;
  EXPECT_EQ(std::system((exe + " --help > /dev/null").c_str()), 0);
  const int status = std::system((exe + " train --config " + path("none.json") + " --out x 2> /dev/null").c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), kExitInput);
}

}  // namespace
