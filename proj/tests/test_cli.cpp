#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "fieldprobe/cli.hpp"
#include "test_util.hpp"

using namespace fieldprobe;
using fieldprobe::testing::TempDir;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fieldprobe");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// gen + train + fim on a tiny street ensemble, shared by the tests below.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("fp_cli");
    const auto d = dir_->path().string();
    ASSERT_EQ(cli({"gen", "--family", "vortex-street-toy", "--train", "10", "--test", "5", "--resolution",
                   "3,12,12", "--seed", "7", "--out", d + "/data"})
                  .code,
              0);
    ASSERT_EQ(cli({"train", "--data", d + "/data/train", "--out", d + "/m.bin", "--hidden", "16,16", "--steps",
                   "200", "--batch", "512", "--seed", "1"})
                  .code,
              0);
    ASSERT_EQ(cli({"fim", "--model", d + "/m.bin", "--data", d + "/data/train", "--samples", "1024", "--out",
                   d + "/f.bin"})
                  .code,
              0);
    std::ofstream(d + "/feat.json") << R"({"center":[0.1,0.0],"radius":0.25,"time":0,"z_ref":[0.1,0.2],"label":0})";
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string path(const std::string& rel) { return (dir_->path() / rel).string(); }

  static TempDir* dir_;
};

TempDir* CliPipeline::dir_ = nullptr;

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"bogus"}).code, 1);
  const auto r = cli({"gen", "--out", "x"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--family"), std::string::npos);
  EXPECT_EQ(cli({"train", "--data", "d", "--out", "m", "--no-such-flag"}).code, 1);
  EXPECT_EQ(cli({"--help"}).code, 0);
}

TEST(Cli, RuntimeErrorsExitTwo) {
  TempDir dir;
  EXPECT_EQ(cli({"train", "--data", (dir.path() / "missing").string(), "--out", "m.bin"}).code, 2);
}

TEST(Cli, UnknownFamilyIsValidationError) {
  TempDir dir;
  EXPECT_EQ(cli({"gen", "--family", "nope", "--out", dir.path().string()}).code, 1);
}

TEST(Cli, GenWritesTwoDatasets) {
  TempDir dir;
  const auto r = cli({"gen", "--family", "viscosity-decay-toy", "--train", "6", "--test", "4", "--seed", "7",
                      "--resolution", "2,8,8", "--out", dir.path().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(EnsembleDataset::load_manifest(dir.path() / "train").count(), 6u);
  EXPECT_EQ(EnsembleDataset::load_manifest(dir.path() / "test").count(), 4u);
}

TEST_F(CliPipeline, SampleWritesCsvAndHeatmaps) {
  const auto r = cli({"sample", "--model", path("m.bin"), "--fim", path("f.bin"), "--feature", path("feat.json"),
                      "--out", path("run"), "--chains", "32", "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = slurp(path("run/samples.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "chain,step,z0,z1,log_post");
  const auto samples = read_samples_csv(path("run/samples.csv"));
  ASSERT_FALSE(samples.empty());
  const auto heat = nlohmann::json::parse(slurp(path("run/heatmaps.json")));
  ASSERT_EQ(heat["grids"].size(), 1u);
  std::int64_t total = 0;
  for (const auto& c : heat["grids"][0]["counts"]) total += c.get<std::int64_t>();
  EXPECT_EQ(static_cast<std::size_t>(total), samples.size());
  EXPECT_EQ(nlohmann::json::parse(slurp(path("run/summary.json")))["emissions"], 20);
}

TEST_F(CliPipeline, SampleIsReproducibleGivenSeed) {
  for (const char* out : {"rep_a", "rep_b"})
    ASSERT_EQ(cli({"sample", "--model", path("m.bin"), "--fim", path("f.bin"), "--feature", path("feat.json"),
                   "--out", path(out), "--chains", "16", "--post-steps", "20", "--seed", "9"})
                  .code,
              0);
  EXPECT_EQ(slurp(path("rep_a/samples.csv")), slurp(path("rep_b/samples.csv")));
}

TEST_F(CliPipeline, InvalidFeatureExitsOne) {
  std::ofstream(path("bad.json")) << R"({"center":[9,9],"radius":0.1,"z_ref":[0.1,0.2]})";
  const auto r = cli({"sample", "--model", path("m.bin"), "--fim", path("f.bin"), "--feature", path("bad.json"),
                      "--out", path("bad_run")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("radius"), std::string::npos);
}

TEST_F(CliPipeline, DiagnoseReports) {
  EXPECT_EQ(cli({"diagnose", "psnr-hist", "--model", path("m.bin"), "--data", path("data/test"), "--out",
                 path("rep")})
                .code,
            0);
  for (const char* s : {"fim-kde", "kde", "oracle"})
    EXPECT_EQ(cli({"diagnose", "sparsify", "--model", path("m.bin"), "--fim", path("f.bin"), "--data",
                   path("data/test"), "--scorer", s, "--out", path("rep")})
                  .code,
              0);
  EXPECT_EQ(cli({"diagnose", "sparsify", "--model", path("m.bin"), "--fim", path("f.bin"), "--data",
                 path("data/test"), "--scorer", "ensemble", "--out", path("rep")})
                .code,
            1);
  ASSERT_EQ(cli({"sample", "--model", path("m.bin"), "--fim", path("f.bin"), "--feature", path("feat.json"),
                 "--out", path("nllrun"), "--chains", "16", "--post-steps", "20"})
                .code,
            0);
  EXPECT_EQ(cli({"diagnose", "nll", "--model", path("m.bin"), "--data", path("data/test"), "--samples",
                 path("nllrun/samples.csv"), "--feature", path("feat.json"), "--out", path("rep")})
                .code,
            0);
  const auto m = cli({"diagnose", "mmd", "--a", path("nllrun/samples.csv"), "--b", path("nllrun/samples.csv"),
                      "--out", path("rep")});
  EXPECT_EQ(m.code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(path("rep/mmd.json")))["mmd"], 0.0);
  EXPECT_EQ(cli({"diagnose", "rhat", "--model", path("m.bin"), "--fim", path("f.bin"), "--data", path("data/test"),
                 "--features", "1", "--chains", "8", "--burn-in", "5", "--post-steps", "12", "--out", path("rep")})
                .code,
            0);
  for (const char* f : {"psnr.json", "psnr.csv", "sparsify_fim-kde.csv", "sparsify_kde.json", "sparsify_oracle.json",
                        "nll.json", "nll.csv", "mmd.json", "rhat.json", "rhat.csv"})
    EXPECT_TRUE(fs::exists(path(std::string("rep/") + f))) << f;
  const auto oracle = nlohmann::json::parse(slurp(path("rep/sparsify_oracle.json")));
  const auto curve = oracle["mean_psnr"].get<std::vector<double>>();
  for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_GE(curve[i], curve[i - 1]);
}

TEST_F(CliPipeline, ConfigFileFillsOptionsAndFlagsWin) {
  std::ofstream(path("cfg.json")) << R"({"steps": 30, "hidden": [8, 8], "batch": 64, "loss-out": ")"
                                  << path("loss.csv") << R"("})";
  ASSERT_EQ(cli({"train", "--data", path("data/train"), "--out", path("m_cfg.bin"), "--config", path("cfg.json")}).code,
            0);
  EXPECT_EQ(load_model(path("m_cfg.bin")).hidden, (std::vector<std::size_t>{8, 8}));
  std::string loss = slurp(path("loss.csv"));
  EXPECT_NE(loss.find("\n30,"), std::string::npos);
  ASSERT_EQ(cli({"train", "--data", path("data/train"), "--out", path("m_cfg.bin"), "--config", path("cfg.json"),
                 "--steps", "40"})
                .code,
            0);
  loss = slurp(path("loss.csv"));
  EXPECT_NE(loss.find("\n40,"), std::string::npos);
  EXPECT_EQ(cli({"train", "--data", path("data/train"), "--out", path("m_cfg.bin"), "--config", path("nope.json")}).code,
            1);
}

TEST(SamplesCsv, RoundTripAndErrors) {
  TempDir dir;
  std::vector<Sample> s{{Vec{{0.125, -3.5}}, 2, 55, -1.25}, {Vec{{1e-17, 2.0 / 3.0}}, 7, 60, -0.5}};
  write_samples_csv(s, 2, dir.path() / "s.csv");
  const auto back = read_samples_csv(dir.path() / "s.csv");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].z, s[i].z);
    EXPECT_EQ(back[i].chain, s[i].chain);
    EXPECT_EQ(back[i].step, s[i].step);
    EXPECT_EQ(back[i].log_posterior, s[i].log_posterior);
  }
  std::ofstream(dir.path() / "bad.csv") << "a,b\n1,2\n";
  EXPECT_THROW(read_samples_csv(dir.path() / "bad.csv"), FormatError);
  EXPECT_THROW(read_samples_csv(dir.path() / "none.csv"), NotFound);
}
