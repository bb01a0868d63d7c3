#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "support.hpp"

using namespace t2t;
using namespace t2t::testing;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("t2t-cli-" + std::to_string(::getpid()) + "-" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliResult run(const std::string& args) {
    const std::string cmd =
        "cd '" + dir_.string() + "' && unset T2T_VLM_API_KEY; '" T2T_CLI_PATH "' " + args + " 2>stderr.txt";
    FILE* pipe = popen(cmd.c_str(), "r");
    std::string out;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
    const int status = pclose(pipe);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
  }

  std::vector<std::string> lines(const fs::path& p) {
    std::ifstream in(dir_ / p);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
  }

  void write(const fs::path& p, const std::string& text) { std::ofstream(dir_ / p) << text; }

  void write_pcap(const fs::path& p) {
    PcapWriter w;
    for (int i = 0; i < 40; ++i) {
      const double t = i < 20 ? 0.5 * i : 20.0 + 0.5 * i;
      const bool up = i % 3 == 0;
      const auto port = static_cast<std::uint16_t>(40000 + i % 2 + (i < 20 ? 0 : 2));
      w.frame(t, up ? ipv4_frame({10, 0, 0, 2}, {1, 2, 3, 4}, port, 443, true, 0x18, 100)
                    : ipv4_frame({1, 2, 3, 4}, {10, 0, 0, 2}, 443, port, true, 0x10, 900));
    }
    w.save(dir_ / p);
  }

  static constexpr const char* kTinyModel =
      "--set hidden_dim=16 --set pattern_dim=8 --set embed_dim=8 --set transformer_layers=1 "
      "--set attention_heads=2 --set prototypes_per_type=2 --set max_flows=8 --set min_token_freq=1 "
      "--set sentence_dim=32 --set learning_rate=3e-3 --set batch_size=8";

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, HelpExitsZeroForEveryCommand) {
  EXPECT_EQ(run("--help").code, 0);
  for (const char* c : {"extract", "annotate", "dataset", "synth", "train", "caption", "evaluate"}) {
    const auto r = run(std::string(c) + " --help");
    EXPECT_EQ(r.code, 0) << c;
    EXPECT_NE(r.out.find("Usage"), std::string::npos) << c;
  }
}

TEST_F(Cli, UsageAndConfigErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("extract").code, 2);
  write_pcap("in.pcap");
  EXPECT_EQ(run("extract in.pcap --segment-secs 0 -o seg.jsonl").code, 2);
  EXPECT_EQ(run("--set not_a_key=1 synth --n-per-type 1 -o s.jsonl").code, 2);
  write("bad.cfg", "hidden_dim = 64\nnonsense\n");
  EXPECT_EQ(run("--config bad.cfg synth --n-per-type 1 -o s.jsonl").code, 2);
}

TEST_F(Cli, ExtractWritesSegments) {
  write_pcap("in.pcap");
  const auto r = run("extract in.pcap -o seg.jsonl");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("packets 40"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("flows 4"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("segments 2"), std::string::npos) << r.out;
  std::ifstream in(dir_ / "seg.jsonl");
  const auto segs = read_segments_jsonl(in);
  ASSERT_EQ(segs.size(), 2u);
  EXPECT_EQ(segs[0].features.size(), 50u);
  EXPECT_EQ(segs[0].features[0].size(), 123u);
}

TEST_F(Cli, MissingOrMalformedCaptureExitsOne) {
  EXPECT_EQ(run("extract missing.pcap -o seg.jsonl").code, 1);
  write("junk.pcap", "definitely not a capture file");
  EXPECT_EQ(run("extract --pcap junk.pcap -o seg.jsonl").code, 1);
}

TEST_F(Cli, MockAnnotateThenDataset) {
  fs::create_directories(dir_ / "clips");
  write("clips/c0.json", R"({"app_type": "video", "start": 0, "end": 15, "verb": "scrolls", "noun": "comments section"})");
  write("clips/c1.json", R"({"app_type": "music", "start": 17, "end": 32, "verb": "skips", "noun": "track"})");
  write("clips/c2.json", R"({"app_type": 3, "start": 30, "end": 45, "verb": "sends", "noun": "text message"})");
  const auto first = run("--set captions_per_clip=4 annotate clips --provider mock --cache-dir cache -o caps.jsonl");
  ASSERT_EQ(first.code, 0);
  EXPECT_NE(first.out.find("remote_calls 3"), std::string::npos) << first.out;
  const auto second = run("--set captions_per_clip=4 annotate clips --provider mock --cache-dir cache -o caps.jsonl");
  EXPECT_NE(second.out.find("remote_calls 0"), std::string::npos) << second.out;
  ASSERT_EQ(lines("caps.jsonl").size(), 3u);

  std::vector<FlowFeatureSequence> segs;
  for (int i = 0; i < 3; ++i) {
    FlowFeatureSequence s;
    s.segment_id = "seg" + std::to_string(i);
    s.segment_start = 15.0 * i;
    s.features.assign(50, std::vector<double>(123, 0.0));
    s.mask.assign(50, false);
    s.mask[0] = true;
    segs.push_back(s);
  }
  {
    std::ofstream out(dir_ / "seg.jsonl");
    write_segments_jsonl(out, segs);
  }
  const auto ds = run("dataset --segments seg.jsonl --captions caps.jsonl --split 0.34,0.33,0.33 -o data");
  ASSERT_EQ(ds.code, 0) << ds.out;
  EXPECT_NE(ds.out.find("aligned 3"), std::string::npos) << ds.out;
  EXPECT_EQ(lines("data/train.jsonl").size() + lines("data/val.jsonl").size() + lines("data/test.jsonl").size(), 12u);

  segs[2].segment_id = "seg0";
  {
    std::ofstream out(dir_ / "dup.jsonl");
    write_segments_jsonl(out, segs);
  }
  EXPECT_EQ(run("dataset --segments dup.jsonl --captions caps.jsonl -o leak").code, 2);
  EXPECT_EQ(run("dataset --segments seg.jsonl --captions caps.jsonl --split 0.5,0.5,0.5 -o bad").code, 2);
}

TEST_F(Cli, VlmWithoutKeyExitsTwo) {
  fs::create_directories(dir_ / "clips");
  write("clips/c0.json", R"({"app_type": "video"})");
  EXPECT_EQ(run("annotate clips --provider vlm -o caps.jsonl").code, 2);
}

TEST_F(Cli, SynthTrainCaptionEvaluate) {
  const std::string model = kTinyModel;
  ASSERT_EQ(run(model + " synth --n-per-type 13 -o all.jsonl --split-dir sp --split 1,0,0").code, 0);
  ASSERT_EQ(lines("all.jsonl").size(), 65u);
  const auto train = run(model + " --set epochs=3 train --train sp/train.jsonl -o ck");
  ASSERT_EQ(train.code, 0) << train.out;
  EXPECT_TRUE(fs::exists(dir_ / "ck" / "manifest.json"));
  EXPECT_EQ(lines("ck/metrics.jsonl").size(), 3u);

  std::ofstream(dir_ / "first64.jsonl") << [&] {
    std::string s;
    const auto all = lines("all.jsonl");
    for (int i = 0; i < 64; ++i) s += all[i] + '\n';
    return s;
  }();
  const auto caps = run("caption --checkpoint ck --segments first64.jsonl");
  ASSERT_EQ(caps.code, 0);
  std::istringstream in(caps.out);
  int count = 0;
  for (std::string l; std::getline(in, l); ++count) EXPECT_FALSE(l.empty());
  EXPECT_EQ(count, 64);

  const auto eval = run("evaluate --checkpoint ck --dataset first64.jsonl");
  ASSERT_EQ(eval.code, 0);
  const auto report = nlohmann::json::parse(eval.out);
  for (const char* k : {"bleu4", "meteor", "rouge_l", "cider"}) EXPECT_TRUE(report.contains(k)) << k;

  EXPECT_EQ(run("caption --checkpoint missing --segments first64.jsonl").code, 1);
  std::vector<FlowFeatureSequence> wide(1);
  wide[0].features.assign(8, std::vector<double>(200, 0.0));
  wide[0].mask.assign(8, true);
  {
    std::ofstream out(dir_ / "wide.jsonl");
    write_segments_jsonl(out, wide);
  }
  EXPECT_EQ(run("caption --checkpoint ck --segments wide.jsonl").code, 1);
}

TEST_F(Cli, EvaluateIdenticalFiles) {
  write("c.txt", "the user plays a song\nsomeone scrolls the feed\n");
  const auto r = run("evaluate --candidates c.txt --references c.txt");
  ASSERT_EQ(r.code, 0);
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_DOUBLE_EQ(j.at("bleu4").get<double>(), 1.0);
  EXPECT_DOUBLE_EQ(j.at("rouge_l").get<double>(), 1.0);
  write("short.txt", "one line\n");
  EXPECT_EQ(run("evaluate --candidates c.txt --references short.txt").code, 1);
  EXPECT_EQ(run("evaluate --candidates c.txt --references c.txt --metrics bleu9").code, 2);
}

TEST_F(Cli, EmptyTrainingFileIsAnError) {
  write("empty.jsonl", "");
  EXPECT_EQ(run("train --train empty.jsonl -o ck").code, 1);
  EXPECT_EQ(run("train --train nothere.jsonl -o ck").code, 1);
}
