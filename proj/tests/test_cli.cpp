#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <json.hpp>

#include "ddanet/data.hpp"
#include "ddanet/loss.hpp"
#include "ddanet/trainer.hpp"

using namespace ddanet;
namespace fs = std::filesystem;

namespace {

// Scratch directory private to the running test, so tests may run in parallel.
const fs::path& work() {
  static const fs::path p = [] {
    auto d = fs::temp_directory_path() /
             ("ddanet_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(DDANET_CLI_PATH) + " " + args + " > " + (work() / "last.out").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(f, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

std::string w(const std::string& name) { return (work() / name).string(); }

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli(""), 2);
  EXPECT_EQ(cli("train --synthetic 4 --size 32 --epochs 1"), 2);  // no --out
  EXPECT_EQ(cli("train --synthetic 4 --size 40 --out " + w("x.ddan")), 2);
  EXPECT_EQ(cli("train --out " + w("x.ddan")), 2);  // no data source
  EXPECT_EQ(cli("train --synthetic 4 --widths 4,8,16 --out " + w("x.ddan")), 2);
  EXPECT_EQ(cli("bench --n 0 --tiny --size 16"), 2);
  EXPECT_EQ(cli("synth --n 2 --size 30 --out " + w("bad")), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
  EXPECT_FALSE(fs::exists(w("x.ddan")));
  EXPECT_EQ(cli("--help"), 0);
}

TEST(Cli, TrainWritesCheckpointAndLogDeterministically) {
  const std::string flags = "train --synthetic 8 --size 32 --epochs 5 --batch 4 --seed 7 --lr 1e-3 ";
  ASSERT_EQ(cli(flags + "--out " + w("a.ddan")), 0) << slurp(work() / "last.out");
  ASSERT_EQ(cli(flags + "--out " + w("b.ddan")), 0);
  ASSERT_TRUE(fs::exists(w("a.ddan")));
  EXPECT_EQ(slurp(w("a.ddan")), slurp(w("b.ddan")));
  const auto log = lines(w("a.ddan.log.jsonl"));
  ASSERT_EQ(log.size(), 5u);
  EXPECT_EQ(log, lines(w("b.ddan.log.jsonl")));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(nlohmann::json::parse(log[i]).at("epoch"), i + 1);
  EXPECT_EQ(load_checkpoint(w("a.ddan")).epoch, 5u);

  ASSERT_EQ(cli("train --synthetic 8 --size 32 --epochs 5 --batch 4 --seed 8 --lr 1e-3 --out " + w("c.ddan")), 0);
  EXPECT_NE(slurp(w("a.ddan")), slurp(w("c.ddan")));
}

TEST(Cli, ResumeThroughFilesMatchesStraightRun) {
  const std::string flags = "train --synthetic 6 --size 16 --batch 4 --seed 3 --lr 1e-3 ";
  ASSERT_EQ(cli(flags + "--epochs 4 --out " + w("s.ddan")), 0);
  ASSERT_EQ(cli(flags + "--epochs 2 --out " + w("h.ddan")), 0);
  ASSERT_EQ(cli(flags + "--epochs 4 --resume " + w("h.ddan") + " --out " + w("r.ddan")), 0)
      << slurp(work() / "last.out");
  EXPECT_EQ(slurp(w("s.ddan")), slurp(w("r.ddan")));
}

TEST(Cli, SynthInferEvalBench) {
  ASSERT_EQ(cli("synth --n 4 --size 32 --seed 1 --out " + w("d1")), 0);
  ASSERT_EQ(cli("synth --n 4 --size 32 --seed 1 --out " + w("d2")), 0);
  for (const char* sub : {"images", "masks"})
    for (const auto& e : fs::directory_iterator(work() / "d1" / sub))
      EXPECT_EQ(slurp(e.path()), slurp(work() / "d2" / sub / e.path().filename()));
  const Dataset d = load_directory(w("d1"));
  ASSERT_EQ(d.size(), 4u);

  ASSERT_EQ(cli("train --data " + w("d1") + " --val-fraction 0 --size 32 --epochs 2 --out " + w("m.ddan")), 0);
  ASSERT_EQ(cli("infer --model " + w("m.ddan") + " --input " + w("d1/images") + " --outdir " + w("pred") +
                " --gray --attn"),
            0)
      << slurp(work() / "last.out");
  const Image raw = load_image(work() / "pred" / "synth_00000_mask.png");
  EXPECT_EQ(raw.shape(), (Shape{1, 3, 32, 32}));
  for (float v : raw.data()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  EXPECT_TRUE(fs::exists(work() / "pred" / "synth_00003_gray.png"));
  EXPECT_TRUE(fs::exists(work() / "pred" / "synth_00003_attn3.png"));

  // Scoring the model against its own predictions is perfect.
  fs::create_directories(work() / "self" / "masks");
  fs::copy(work() / "d1" / "images", work() / "self" / "images");
  for (const auto& it : d.items)
    fs::copy_file(work() / "pred" / (it.stem + "_mask.png"), work() / "self" / "masks" / (it.stem + ".png"));
  ASSERT_EQ(cli("eval --model " + w("m.ddan") + " --data " + w("self") + " --report " + w("self.json")), 0);
  const auto self = nlohmann::json::parse(slurp(w("self.json")));
  EXPECT_EQ(self.at("dsc").get<double>(), 1.0);

  ASSERT_EQ(cli("eval --model " + w("m.ddan") + " --data " + w("d1") + " --report " + w("r.json")), 0);
  const auto rep = nlohmann::json::parse(slurp(w("r.json")));
  EXPECT_EQ(rep.size(), 6u);
  EXPECT_LE(rep.at("miou").get<double>(), rep.at("dsc").get<double>());
  EXPECT_EQ(rep.at("n_images").get<int>(), 4);

  ASSERT_EQ(cli("bench --model " + w("m.ddan") + " --size 32 --n 3 --warmup 1 --report " + w("b.json")), 0);
  const auto b = nlohmann::json::parse(slurp(w("b.json")));
  EXPECT_GT(b.at("fps").get<double>(), 0.0);

  fs::remove(work() / "d1" / "masks" / "synth_00002.png");
  EXPECT_EQ(cli("eval --model " + w("m.ddan") + " --data " + w("d1")), 1);
  EXPECT_NE(slurp(work() / "last.out").find("synth_00002"), std::string::npos);
}

TEST(Cli, InferFailsWhenNoInputIsReadable) {
  ASSERT_EQ(cli("train --synthetic 2 --size 16 --epochs 1 --out " + w("n.ddan")), 0);
  fs::create_directories(work() / "junk");
  std::ofstream(work() / "junk" / "a.png") << "nope";
  EXPECT_EQ(cli("infer --model " + w("n.ddan") + " --input " + w("junk") + " --outdir " + w("jout")), 1);
  EXPECT_NE(slurp(work() / "last.out").find("warning"), std::string::npos);
}
