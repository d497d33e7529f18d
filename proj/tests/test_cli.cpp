#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "alignvar/pipeline.hpp"

namespace fs = std::filesystem;
using namespace avar;

namespace {

const fs::path kWork = fs::temp_directory_path() / "alignvar_cli_test";

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome cli(const std::string& args) {
  const fs::path log = kWork / "last.log";
  const std::string cmd = std::string(ALIGNVAR_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Outcome r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string path(const std::string& name) { return (kWork / name).string(); }

void write_config(const std::string& name, std::size_t image_size, std::size_t patch) {
  std::ofstream out(kWork / name);
  out << "data.toy_count = 2\n"
      << "data.image_size = " << image_size << "\n"
      << "codec.patch = " << patch << "\n"
      << "codebook.refine_rounds = 10\ncodebook.restarts = 1\n"
      << "model.depth = 1\nmodel.heads = 2\nmodel.width = 16\nmodel.vocab = 8\nmodel.embed_dim = 4\n"
      << "model.mask_hidden = 4\nmodel.schedule = 1,2,4\ntrain.steps = 6\ntrain.batch = 2\n";
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    write_config("tiny.cfg", 16, 4);
    write_config("wide.cfg", 64, 16);
  }
};

}  // namespace

TEST_F(Cli, BenchPrintsTotalCost) {
  const Outcome r = cli("bench --a 2 --k 3");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("total cost 467"), std::string::npos) << r.out;
  const Outcome e = cli("bench --a 2 --k 4 --empirical");
  EXPECT_EQ(e.code, 0) << e.out;
  EXPECT_NE(e.out.find("matches"), std::string::npos);
  EXPECT_NE(cli("bench --a 1 --k 3").code, 0);
}

TEST_F(Cli, UnknownVerbAndMissingSeed) {
  const Outcome r = cli("frobnicate");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.out.find("unknown verb"), std::string::npos);
  EXPECT_NE(r.out.find("make-toyset"), std::string::npos);
  EXPECT_NE(cli("train --out " + path("noseed")).code, 0);
  EXPECT_NE(cli("make-toyset --out " + path("noseed")).code, 0);
}

TEST_F(Cli, HelpForEveryVerbAndSchema) {
  for (const char* verb : {"make-toyset", "train", "infer", "eval", "probe", "bench", "dump-guidance"}) {
    EXPECT_EQ(cli(std::string(verb) + " --help").code, 0) << verb;
  }
  const Outcome r = cli("train --help");
  for (const auto& k : config_schema()) EXPECT_NE(r.out.find(k.name), std::string::npos) << k.name;
}

TEST_F(Cli, MakeToysetContracts) {
  ASSERT_EQ(cli("make-toyset --n 0 --seed 1 --out " + path("empty")).code, 0);
  EXPECT_EQ(slurp(kWork / "empty" / "manifest.csv"), "file,kind\n");
  EXPECT_EQ(std::distance(fs::directory_iterator(kWork / "empty"), fs::directory_iterator{}), 1);
  ASSERT_EQ(cli("make-toyset --n 64 --size 64 --seed 9 --out " + path("t1")).code, 0);
  ASSERT_EQ(cli("make-toyset --n 64 --size 64 --seed 9 --out " + path("t2")).code, 0);
  const auto files = list_images(kWork / "t1");
  ASSERT_EQ(files.size(), 64u);
  for (const auto& f : files) {
    EXPECT_EQ(slurp(f), slurp(kWork / "t2" / f.filename()));
    const Image im = read_image(f);
    EXPECT_EQ(im.height, 64u);
    EXPECT_EQ(im.width, 64u);
  }
  EXPECT_EQ(slurp(kWork / "t1" / "manifest.csv"), slurp(kWork / "t2" / "manifest.csv"));
  ASSERT_EQ(cli("make-toyset --n 2 --size 16 --seed 9 --format pgm --out " + path("pgm")).code, 0);
  EXPECT_TRUE(fs::exists(kWork / "pgm" / "toy_0000.pgm"));
  EXPECT_NE(cli("make-toyset --n 1 --seed 1 --out /proc/forbidden").code, 0);
}

TEST_F(Cli, TrainIsReproducible) {
  ASSERT_EQ(cli("train --config " + path("tiny.cfg") + " --seed 5 --out " + path("a")).code, 0);
  ASSERT_EQ(cli("train --config " + path("tiny.cfg") + " --seed 5 --threads 1 --out " + path("b")).code, 0);
  EXPECT_EQ(slurp(kWork / "a" / "metrics.csv"), slurp(kWork / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(kWork / "a" / "model.avar"), slurp(kWork / "b" / "model.avar"));
  const Outcome bad = cli("train --config " + path("tiny.cfg") + " --seed 5 --set model.vocab=x --out " + path("c"));
  EXPECT_NE(bad.code, 0);
  EXPECT_EQ(std::count(bad.out.begin(), bad.out.end(), '\n'), 1) << bad.out;
}

TEST_F(Cli, InferWritesFourTimesLargerImages) {
  ASSERT_EQ(cli("train --config " + path("wide.cfg") + " --seed 1 --out " + path("wide")).code, 0);
  ASSERT_EQ(cli("make-toyset --n 2 --size 16 --seed 4 --out " + path("lr")).code, 0);
  const std::string base = "infer --checkpoint " + path("wide/model.avar") + " --input " + path("lr");
  const Outcome r = cli(base + " --out " + path("sr1"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("scale 3 (4x4)"), std::string::npos);
  const Image sr = read_image(kWork / "sr1" / "toy_0000_sr.png");
  EXPECT_EQ(sr.height, 64u);
  EXPECT_EQ(sr.width, 64u);
  ASSERT_EQ(cli(base + " --out " + path("sr2")).code, 0);
  EXPECT_EQ(slurp(kWork / "sr1" / "toy_0000_sr.png"), slurp(kWork / "sr2" / "toy_0000_sr.png"));
  EXPECT_EQ(slurp(kWork / "sr1" / "toy_0001_tokens.csv"), slurp(kWork / "sr2" / "toy_0001_tokens.csv"));
  EXPECT_NE(cli(base + " --out " + path("sr3") + " --top-k 3").code, 0);
  EXPECT_EQ(cli(base + " --out " + path("sr3") + " --top-k 3 --seed 2").code, 0);
  ASSERT_EQ(cli("make-toyset --n 1 --size 8 --seed 4 --out " + path("lr8")).code, 0);
  EXPECT_NE(cli("infer --checkpoint " + path("wide/model.avar") + " --input " + path("lr8") + " --out " + path("sr4")).code, 0);
  EXPECT_NE(cli("infer --checkpoint " + path("missing.avar") + " --input " + path("lr") + " --out " + path("sr4")).code, 0);
}

TEST_F(Cli, EvalEdgeIouOnIdenticalFolders) {
  ASSERT_EQ(cli("make-toyset --n 3 --size 32 --seed 2 --out " + path("same")).code, 0);
  const Outcome r = cli("eval --edge-iou --pred " + path("same") + " --gt " + path("same") + " --out " + path("ev"));
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("edge IoU over 3 images: 1.000000"), std::string::npos) << r.out;
}

TEST_F(Cli, EvalProbeAndGuidanceReports) {
  ASSERT_EQ(cli("train --config " + path("tiny.cfg") + " --seed 5 --out " + path("m")).code, 0);
  const std::string ck = " --checkpoint " + path("m/model.avar");
  ASSERT_EQ(cli("eval" + ck + " --out " + path("e1")).code, 0);
  EXPECT_EQ(slurp(kWork / "e1" / "profile.csv").substr(0, 18), "scale,mse,samples\n");
  EXPECT_EQ(cli("eval" + ck + " --toy-seed 99 --toy-count 2 --out " + path("e2")).code, 0);
  ASSERT_EQ(cli("probe" + ck + " --seed 3 --scales 1,2 --sigmas 0,1 --joint --out " + path("p1")).code, 0);
  ASSERT_EQ(cli("probe" + ck + " --seed 3 --scales 1,2 --sigmas 0,1 --joint --out " + path("p2")).code, 0);
  const std::string csv = slurp(kWork / "p1" / "perturbation.csv");
  EXPECT_EQ(csv, slurp(kWork / "p2" / "perturbation.csv"));
  EXPECT_NE(csv.find("1 2,1,"), std::string::npos) << csv;
  EXPECT_NE(csv.find("1,0,0,inf"), std::string::npos) << csv;
  EXPECT_NE(cli("probe" + ck + " --scales 1").code, 0);
  EXPECT_NE(cli("probe" + ck + " --seed 1 --scales 4").code, 0);
  ASSERT_EQ(cli("probe" + ck + " --attention --out " + path("p3")).code, 0);
  EXPECT_TRUE(fs::exists(kWork / "p3" / "locality.csv"));
  ASSERT_EQ(cli("make-toyset --n 1 --size 4 --seed 8 --out " + path("glr")).code, 0);
  ASSERT_EQ(cli("dump-guidance --input " + path("glr/toy_0000.png") + " --schedule 1,2,4 --out " + path("g")).code, 0);
  EXPECT_TRUE(fs::exists(kWork / "g" / "guidance_3.png"));
  EXPECT_TRUE(fs::exists(kWork / "g" / "guidance.csv"));
}
