#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  fs::path root;

  void SetUp() override {
    root = fs::temp_directory_path() /
           ("transmil_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root);
    fs::create_directories(root);
  }
  void TearDown() override { fs::remove_all(root); }

  RunResult run(const std::string& args) const {
    const fs::path out = root / "stdout.txt", err = root / "stderr.txt";
    const std::string cmd =
        std::string(TRANSMIL_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  /// A small dataset so train/eval stay fast.
  fs::path small_dataset() const {
    const fs::path data = root / "data";
    const RunResult r = run("gen --bags 24 --min-instances 6 --max-instances 12 --feature-dim 8 --separation 3 "
                            "--seed 3 --out " + data.string());
    EXPECT_EQ(r.code, 0) << r.err;
    return data;
  }

  fs::path small_checkpoint(const fs::path& data) const {
    const fs::path ckpt = root / "ckpt";
    const RunResult r = run("train --data " + data.string() + " --out " + ckpt.string() +
                            " --epochs 2 --dim 8 --heads 2 --landmarks 4 --seed 1");
    EXPECT_EQ(r.code, 0) << r.err;
    return ckpt;
  }
};

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

}  // namespace

TEST_F(CliTest, GenWritesBagsAndManifestDeterministically) {
  const fs::path a = root / "a", b = root / "b";
  const RunResult ra = run("gen --preset camelyon-like --bags 200 --seed 7 --out " + a.string());
  ASSERT_EQ(ra.code, 0) << ra.err;
  EXPECT_NE(ra.out.find("bags=200"), std::string::npos);
  ASSERT_EQ(run("gen --preset camelyon-like --bags 200 --seed 7 --out " + b.string()).code, 0);

  std::size_t bag_files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().extension() == ".milb") ++bag_files;
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
  }
  EXPECT_EQ(bag_files, 200u);
  EXPECT_EQ(count_lines(slurp(a / "manifest.csv")), 201u);
}

TEST_F(CliTest, GenRejectsInvalidWitnessRate) {
  const RunResult r = run("gen --witness-rate 1.5 --out " + (root / "x").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("witness_rate"), std::string::npos) << r.err;
}

TEST_F(CliTest, SettingsAreEchoedToStderr) {
  const RunResult r = run("entropy-check --trials 5");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("trials=5"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("seed=0"), std::string::npos) << r.err;
}

TEST_F(CliTest, TrainEvalAttendRoundTrip) {
  const fs::path data = small_dataset();
  const fs::path ckpt = small_checkpoint(data);
  ASSERT_TRUE(fs::exists(ckpt / "model.tmil"));
  const std::string log = slurp(ckpt / "log.csv");
  EXPECT_EQ(log.rfind("epoch,train_loss,val_auc,val_acc,seconds\n", 0), 0u);
  EXPECT_EQ(count_lines(log), 4u);  // header + epochs 0..2

  const RunResult ev = run("eval --data " + data.string() + " --ckpt " + (ckpt / "model.tmil").string());
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(ev.out.rfind("accuracy=", 0), 0u) << ev.out;
  EXPECT_NE(ev.out.find(" auc="), std::string::npos);
  const auto report = nlohmann::json::parse(slurp(ckpt / "eval.json"));
  EXPECT_EQ(report["split"], "test");
  EXPECT_GE(report["auc"].get<double>(), 0.0);

  const fs::path bag = data / "bag_00.milb";
  ASSERT_TRUE(fs::exists(bag));
  const fs::path maps = root / "maps";
  const RunResult at = run("attend --ckpt " + (ckpt / "model.tmil").string() + " --bag " + bag.string() +
                           " --out " + maps.string());
  ASSERT_EQ(at.code, 0) << at.err;
  const std::string csv = slurp(maps / "bag_00.heatmap.csv");
  EXPECT_EQ(csv.rfind("instance,row,col,score\n", 0), 0u);
  EXPECT_EQ(slurp(maps / "bag_00.pgm").rfind("P2\n", 0), 0u);
}

TEST_F(CliTest, EvalRejectsDimensionMismatch) {
  const fs::path data = small_dataset();
  const fs::path ckpt = small_checkpoint(data);
  const fs::path other = root / "other";
  ASSERT_EQ(run("gen --bags 8 --min-instances 4 --max-instances 6 --feature-dim 5 --out " + other.string()).code, 0);
  const RunResult r = run("eval --data " + other.string() + " --ckpt " + (ckpt / "model.tmil").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("feature dim"), std::string::npos) << r.err;
}

TEST_F(CliTest, MissingFilesFail) {
  EXPECT_NE(run("train --data " + (root / "nowhere").string() + " --out " + (root / "c").string()).code, 0);
  EXPECT_NE(run("eval --data " + (root / "nowhere").string() + " --ckpt x.tmil").code, 0);
  EXPECT_NE(run("attend --ckpt missing.tmil --bag missing.milb").code, 0);
}

TEST_F(CliTest, BenchWritesCsv) {
  const fs::path csv = root / "bench.csv";
  const RunResult r = run("bench --lengths 64,128 --dim 8 --landmarks 8 --repeats 1 --out " + csv.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string text = slurp(csv);
  EXPECT_EQ(text.rfind("n,mode,millis\n", 0), 0u);
  EXPECT_EQ(count_lines(text), 5u);
  EXPECT_NE(r.out.find("nystrom_growth="), std::string::npos);
}

TEST_F(CliTest, EntropyCheckExitCodes) {
  const RunResult ok = run("entropy-check");
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("tables=3000"), std::string::npos);
  EXPECT_EQ(run("entropy-check --trials 0").code, 2);
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run("entropy-check --no-such-flag").code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("gen").code, 2);  // --out is required
  EXPECT_EQ(run("--help").code, 0);
}
