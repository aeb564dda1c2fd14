#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "json.hpp"

#include "cbre/data.hpp"
#include "cbre/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("cbre_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Outcome run(const std::string& args) const {
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = std::string("\"") + CBRE_CLI + "\" " + args + " >\"" + out.string() +
                            "\" 2>\"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    Outcome o;
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.out = slurp(out);
    o.err = slurp(err);
    return o;
  }

  // A small synthetic experiment that trains in a few seconds.
  fs::path write_config(const std::string& name, int reps = 1) const {
    json j = {{"seed", 3},
              {"dataset", {{"name", "synthetic"}, {"reps", "1.." + std::to_string(reps)},
                           {"synthetic", {{"n", 150}, {"p", 4}}}}},
              {"model",
               {{"rep_dim", 8},
                {"noise_dim", 4},
                {"encoder", {{"depth", 2}, {"hidden", 12}}},
                {"critic", {{"depth", 2}, {"hidden", 12}}},
                {"decoder_t", {{"depth", 2}, {"hidden", 12}}},
                {"decoder_c", {{"depth", 2}, {"hidden", 12}}},
                {"predictor", {{"depth", 2}, {"hidden", 12}}}}},
              {"trainer", {{"max_iterations", 20}, {"eval_every", 10}, {"batch_size", 30}}}};
    const fs::path p = dir_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, MakeSyntheticRequiresSeed) {
  Outcome o = run("make-synthetic --out \"" + (dir_ / "syn").string() + "\"");
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("--seed is required"), std::string::npos);
}

TEST_F(Cli, MakeSyntheticWritesDataAndSidecar) {
  const fs::path out = dir_ / "syn";
  Outcome o = run("make-synthetic --seed 8 --n 60 --p 3 --out \"" + out.string() + "\"");
  ASSERT_EQ(o.code, 0) << o.err;
  cbre::ObservationalDataset d = cbre::load_csv(out / "synthetic.csv");
  EXPECT_EQ(d.size(), 60);
  EXPECT_EQ(d.dim(), 3);
  json side = json::parse(slurp(out / "synthetic.json"));
  EXPECT_EQ(side["seed"], 8);
  EXPECT_EQ(side["n"], 60);
  const std::string first = slurp(out / "synthetic.csv");
  ASSERT_EQ(run("make-synthetic --seed 8 --n 60 --p 3 --out \"" + out.string() + "\"").code, 0);
  EXPECT_EQ(slurp(out / "synthetic.csv"), first);
}

TEST_F(Cli, TrainWritesArtifactsAndIsReproducible) {
  const fs::path cfg = write_config("cfg.json");
  const fs::path a = dir_ / "a", b = dir_ / "b";
  Outcome oa = run("train --config \"" + cfg.string() + "\" --out \"" + a.string() + "\"");
  ASSERT_EQ(oa.code, 0) << oa.err;
  EXPECT_NE(oa.out.find("in_sample pehe"), std::string::npos);
  for (const char* f : {"config.effective.json", "report.json", "rep_1/trainlog.csv",
                        "rep_1/model.bin", "rep_1/model.json", "rep_1/report.json"}) {
    EXPECT_TRUE(fs::exists(a / f)) << f;
  }
  ASSERT_EQ(run("train --config \"" + cfg.string() + "\" --out \"" + b.string() + "\"").code, 0);
  EXPECT_EQ(slurp(a / "report.json"), slurp(b / "report.json"));
  EXPECT_EQ(slurp(a / "rep_1/model.bin"), slurp(b / "rep_1/model.bin"));
  EXPECT_EQ(slurp(a / "rep_1/trainlog.csv"), slurp(b / "rep_1/trainlog.csv"));
}

TEST_F(Cli, EvaluateReproducesTrainingReport) {
  const fs::path cfg = write_config("cfg.json");
  const fs::path run_dir = dir_ / "run", eval_dir = dir_ / "eval";
  ASSERT_EQ(run("train --config \"" + cfg.string() + "\" --out \"" + run_dir.string() + "\"").code, 0);
  Outcome o = run("evaluate --run \"" + run_dir.string() + "\" --out \"" + eval_dir.string() + "\"");
  ASSERT_EQ(o.code, 0) << o.err;
  json trained = json::parse(slurp(run_dir / "report.json"));
  json evaluated = json::parse(slurp(eval_dir / "report.json"));
  EXPECT_EQ(trained["aggregate"], evaluated["aggregate"]);
}

TEST_F(Cli, ExportRepresentations) {
  const fs::path cfg = write_config("cfg.json");
  const fs::path run_dir = dir_ / "run", syn = dir_ / "syn";
  ASSERT_EQ(run("train --config \"" + cfg.string() + "\" --out \"" + run_dir.string() + "\"").code, 0);
  ASSERT_EQ(run("make-synthetic --seed 1 --n 25 --p 4 --out \"" + syn.string() + "\"").code, 0);
  Outcome o = run("export-repr --checkpoint \"" + (run_dir / "rep_1/model").string() + "\" --data \"" +
                  (syn / "synthetic.csv").string() + "\" --out \"" + dir_.string() + "\"");
  ASSERT_EQ(o.code, 0) << o.err;
  std::istringstream lines(slurp(dir_ / "repr.csv"));
  std::string header, line;
  std::getline(lines, header);
  EXPECT_EQ(header.rfind("z0,", 0), 0u);
  EXPECT_NE(header.find("z7,t"), std::string::npos);
  int rows = 0;
  while (std::getline(lines, line)) ++rows;
  EXPECT_EQ(rows, 25);

  ASSERT_EQ(run("make-synthetic --seed 1 --n 25 --p 5 --out \"" + syn.string() + "\"").code, 0);
  Outcome bad = run("export-repr --checkpoint \"" + (run_dir / "rep_1/model").string() + "\" --data \"" +
                    (syn / "synthetic.csv").string() + "\" --out \"" + dir_.string() + "\"");
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("checkpoint expects 4 covariates"), std::string::npos);
}

TEST_F(Cli, AblateWritesComparisonTable) {
  const fs::path cfg = write_config("cfg.json");
  const fs::path out = dir_ / "ablate";
  Outcome o = run("ablate --config \"" + cfg.string() + "\" --variants total,lp_only --out \"" +
                  out.string() + "\"");
  ASSERT_EQ(o.code, 0) << o.err;
  const std::string csv = slurp(out / "ablation.csv");
  EXPECT_EQ(csv.rfind("variant,regime,", 0), 0u);
  EXPECT_NE(csv.find("\ntotal,in_sample,"), std::string::npos);
  EXPECT_NE(csv.find("\nlp_only,out_sample,"), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "ablation.md"));
  EXPECT_TRUE(fs::exists(out / "lp_only" / "rep_1" / "model.bin"));
}

TEST_F(Cli, SweepOverSingleGridPoint) {
  const fs::path cfg = write_config("cfg.json");
  const fs::path out = dir_ / "sweep";
  Outcome o = run("sweep --config \"" + cfg.string() + "\" --budget 0 --out \"" + out.string() +
                  "\" --set sweep.learning_rates=[0.001] --set sweep.depths=[2] --set sweep.dims=[8]"
                  " --set sweep.batch_sizes=[30] --set sweep.alphas=[1] --set sweep.betas=[1]"
                  " --set sweep.gammas=[1]");
  ASSERT_EQ(o.code, 0) << o.err;
  std::istringstream lines(slurp(out / "leaderboard.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(lines, line)) ++rows;
  EXPECT_EQ(rows, 2);
  EXPECT_TRUE(fs::exists(out / "best_config.json"));
}

TEST_F(Cli, SimulateTwinsFromSource) {
  cbre::Rng rng(4);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> normal;
  std::ofstream src(dir_ / "source.csv");
  for (int j = 0; j < 30; ++j) src << 'x' << j << ',';
  src << "y0,y1\n";
  for (int i = 0; i < 300; ++i) {
    for (int j = 0; j < 30; ++j) src << normal(rng) << ',';
    src << coin(rng) << ',' << coin(rng) << '\n';
  }
  src.close();
  const fs::path a = dir_ / "a", b = dir_ / "b";
  Outcome o = run("simulate-twins --seed 2 --source \"" + (dir_ / "source.csv").string() +
                  "\" --out \"" + a.string() + "\"");
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("wrote 300 rows"), std::string::npos);
  cbre::ObservationalDataset d = cbre::load_csv(a / "twins.csv");
  EXPECT_EQ(d.size(), 300);
  EXPECT_TRUE(d.ycf.has_value());
  json side = json::parse(slurp(a / "twins.json"));
  EXPECT_EQ(side["w"].size(), 30u);
  ASSERT_EQ(run("simulate-twins --seed 2 --source \"" + (dir_ / "source.csv").string() +
                "\" --out \"" + b.string() + "\"")
                .code,
            0);
  EXPECT_EQ(slurp(a / "twins.csv"), slurp(b / "twins.csv"));
  EXPECT_EQ(run("simulate-twins --source \"" + (dir_ / "source.csv").string() + "\"").code, 1);
}

TEST_F(Cli, ConfigErrorsAreReported) {
  std::ofstream(dir_ / "bad.json") << R"({"dataset": {"path": "x"}, "modle": {}})";
  Outcome o = run("train --config \"" + (dir_ / "bad.json").string() + "\"");
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("unknown config key 'modle'"), std::string::npos);
  Outcome missing = run("train --config \"" + (dir_ / "nope.json").string() + "\"");
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("error:"), std::string::npos);
  Outcome usage = run("");
  EXPECT_NE(usage.code, 0);
}
