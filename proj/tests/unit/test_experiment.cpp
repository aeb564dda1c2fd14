#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <numeric>
#include <set>

#include "cbre/experiment.hpp"

using namespace cbre;
using namespace cbre::experiment;

namespace {

ExperimentConfig tiny_synthetic_config() {
  ExperimentConfig c;
  c.seed = 5;
  SyntheticConfig s;
  s.n = 200;
  s.p = 4;
  c.synthetic = s;
  c.model.rep_dim = 8;
  c.model.noise_dim = 4;
  for (NetShape* shape :
       {&c.model.encoder, &c.model.critic, &c.model.decoder_t, &c.model.decoder_c, &c.model.predictor}) {
    *shape = NetShape{2, 10};
  }
  c.trainer.max_iterations = 30;
  c.trainer.eval_every = 10;
  c.trainer.batch_size = 32;
  return c;
}

std::string config_error(const std::string& text) {
  try {
    from_json(load_config_json(text, "cfg"));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, RepsParsing) {
  EXPECT_EQ(parse_reps("1..3").list(), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(parse_reps("7").list(), std::vector<int>{7});
  EXPECT_THROW(parse_reps("3..1"), ConfigError);
  EXPECT_THROW(parse_reps("a..b"), ConfigError);
  EXPECT_THROW(parse_reps("0"), ConfigError);
}

TEST(Config, Variants) {
  CbreConfig c;
  CbreConfig lp = apply_variant(c, Variant::lp_only);
  EXPECT_EQ(lp.alpha + lp.beta + lp.gamma, 0.0);
  EXPECT_EQ(lp.lambda, c.lambda);
  CbreConfig ld = apply_variant(c, Variant::lp_ld);
  EXPECT_EQ(ld.alpha, c.alpha);
  EXPECT_EQ(ld.beta + ld.gamma, 0.0);
  CbreConfig rc = apply_variant(c, Variant::lp_rec_cyc);
  EXPECT_EQ(rc.alpha, 0.0);
  EXPECT_EQ(rc.beta, c.beta);
  EXPECT_EQ(parse_variant("lp_rec_cyc"), Variant::lp_rec_cyc);
  EXPECT_THROW(parse_variant("everything"), ConfigError);
}

TEST(Config, DefaultsMatchPublishedSettings) {
  ExperimentConfig c;
  EXPECT_EQ(c.model.alpha, 0.5);
  EXPECT_EQ(c.model.beta, 1.0);
  EXPECT_EQ(c.model.gamma, 1.0);
  EXPECT_EQ(c.model.lambda, 1e-4);
  EXPECT_EQ(c.model.delta, 10.0);
  EXPECT_EQ(c.model.encoder.depth, 5);
  EXPECT_EQ(c.model.encoder.hidden, 200);
  EXPECT_EQ(c.model.critic.depth, 3);
  EXPECT_EQ(c.model.predictor.hidden, 100);
  EXPECT_EQ(c.trainer.batch_size, 80);
  EXPECT_EQ(c.trainer.learning_rate, 1e-3);
  EXPECT_EQ(c.split.train, 0.6);
}

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = tiny_synthetic_config();
  c.variant = Variant::lp_ld;
  c.output = OutputSetting::binary;
  c.model.predictor_kind = PredictorKind::single_head;
  json j = to_json(c);
  ExperimentConfig back = from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(back.synthetic->n, 200);
  EXPECT_EQ(back.variant, Variant::lp_ld);
}

TEST(Config, PartialDocumentMergesOverDefaults) {
  json j = load_config_json(R"({"seed": 9, "dataset": {"path": "x.csv"}, "model": {"encoder": {"depth": 2}}})",
                            "cfg");
  ExperimentConfig c = from_json(j);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.model.encoder.depth, 2);
  EXPECT_EQ(c.model.encoder.hidden, 200);
  EXPECT_FALSE(c.synthetic.has_value());
}

TEST(Config, NullSyntheticSurvivesReload) {
  ExperimentConfig c;
  c.dataset_path = "data.csv";
  json j = load_config_json(to_json(c).dump(), "snapshot");
  EXPECT_TRUE(j["dataset"]["synthetic"].is_null());
  EXPECT_NO_THROW(from_json(j));
}

TEST(Config, Errors) {
  EXPECT_NE(config_error(R"({"sede": 1})").find("unknown config key 'sede'"), std::string::npos);
  EXPECT_NE(config_error(R"({"model": {"alpah": 1}})").find("model.alpah"), std::string::npos);
  EXPECT_NE(config_error("{\n\"seed\": }").find("line 2"), std::string::npos);
  EXPECT_NE(config_error(R"({"seed": 1})").find("dataset.path is required"), std::string::npos);
  EXPECT_NE(config_error(R"({"dataset": {"path": "a"}, "model": {"alpha": -1}})").find("loss weights"),
            std::string::npos);
  EXPECT_NE(config_error(R"({"dataset": {"path": "a"}, "variant": "all"})").find("variant"),
            std::string::npos);
}

TEST(Config, Overrides) {
  json j = to_json(ExperimentConfig{});
  apply_override(j, "model.alpha=0.25");
  apply_override(j, "dataset.path=some/file.csv");
  apply_override(j, "dataset.synthetic={\"n\": 300}");
  ExperimentConfig c = from_json(j);
  EXPECT_EQ(c.model.alpha, 0.25);
  EXPECT_EQ(c.dataset_path, "some/file.csv");
  EXPECT_EQ(c.synthetic->n, 300);
  EXPECT_EQ(c.synthetic->p, 10);
  EXPECT_THROW(apply_override(j, "model.nope=1"), ConfigError);
  EXPECT_THROW(apply_override(j, "novalue"), ConfigError);
}

TEST(Seeds, StreamsAreDistinct) {
  std::set<std::uint64_t> seen;
  for (int rep = 1; rep <= 20; ++rep) {
    ReplicationSeeds s = replication_seeds(42, rep);
    for (std::uint64_t v : {s.data, s.split, s.model, s.trainer}) seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 80u);
  EXPECT_EQ(replication_seeds(42, 3).model, replication_seeds(42, 3).model);
}

TEST(Score, DispatchesOnGroundTruth) {
  ObservationalDataset d;
  d.name = "d";
  d.x = Tensor::Zero(4, 1);
  d.t = {1, 0, 1, 0};
  d.yf = {3, 1, 2, 0};
  d.mu1 = std::vector<double>{3, 2, 2, 1};
  d.mu0 = std::vector<double>{1, 1, 0, 0};
  // A constant predictor has zero estimated effect.
  Predictions constant{{5, 5, 5, 5}, {5, 5, 5, 5}};
  metrics::MetricRow row = score(d, constant, EvalOptions{});
  EXPECT_NEAR(row.at("ate_error"), 1.5, 1e-12);
  EXPECT_TRUE(row.count("pehe"));

  ObservationalDataset jobs = d;
  jobs.e = std::vector<int>{1, 1, 0, 0};
  EXPECT_TRUE(score(jobs, constant, EvalOptions{}).count("policy_risk"));

  ObservationalDataset twins = d;
  twins.mu0.reset();
  twins.mu1.reset();
  twins.yf = {1, 0, 1, 0};
  twins.ycf = std::vector<double>{0, 1, 1, 0};
  Predictions p{{0.9, 0.8, 0.7, 0.1}, {0.2, 0.3, 0.6, 0.4}};
  metrics::MetricRow auc = score(twins, p, EvalOptions{});
  EXPECT_TRUE(auc.count("auc"));
  EXPECT_FALSE(auc.count("pehe"));
}

TEST(Checkpoint, RoundTripPredictsIdentically) {
  ExperimentConfig c = tiny_synthetic_config();
  ObservationalDataset d = load_replication(c, 1);
  RunResult r = run_replication(c, d, 1);
  const auto stem = std::filesystem::temp_directory_path() / "cbre_ckpt_test" / "model";
  std::filesystem::create_directories(stem.parent_path());
  save_checkpoint(stem, r.model, r.prep);
  Checkpoint ck = load_checkpoint(stem);
  Predictions a = predict(r.model, r.prep, d.x, d.t);
  Predictions b = predict(ck.model, ck.prep, d.x, d.t);
  EXPECT_EQ(a.y1, b.y1);
  EXPECT_EQ(a.y0, b.y0);
  std::filesystem::remove_all(stem.parent_path());
}

TEST(Run, DeterministicAndReportsBothRegimes) {
  ExperimentConfig c = tiny_synthetic_config();
  ObservationalDataset d = load_replication(c, 2);
  RunResult a = run_replication(c, d, 2);
  RunResult b = run_replication(c, d, 2);
  EXPECT_EQ(a.report.regimes, b.report.regimes);
  EXPECT_TRUE(a.report.regimes.at("in_sample").count("pehe"));
  EXPECT_TRUE(a.report.regimes.at("out_sample").count("ate_error"));
  EXPECT_EQ(a.report.extra["train_size"], 120);
  EXPECT_EQ(a.report.extra["test_size"], 20);
}

TEST(Run, LoadsReplicationDirectory) {
  ExperimentConfig c;
  c.dataset_path = CBRE_TEST_DATA "/ihdp";
  ObservationalDataset d = load_replication(c, 2);
  EXPECT_EQ(d.size(), 747);
  EXPECT_EQ(d.dim(), 25);
  EXPECT_EQ(d.replication, 2);
  EXPECT_EQ(std::accumulate(d.t.begin(), d.t.end(), 0), 139);
}

TEST(Parallel, RunsEveryIndexAndPropagatesFailure) {
  std::vector<std::atomic<int>> hits(25);
  parallel_for(25, 4, [&](std::size_t i) { hits[i]++; });
  for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 6) throw std::runtime_error("boom");
                            }),
               std::runtime_error);
}

TEST(Sweep, GridAndSampledTrials) {
  SweepSpec s;
  EXPECT_EQ(s.grid_size(), 3u * 4 * 4 * 16 * 11 * 11 * 11);
  s.budget = 20;
  auto trials = sweep_trials(s, 1);
  EXPECT_EQ(trials.size(), 20u);
  auto again = sweep_trials(s, 1);
  EXPECT_EQ(trials[7].dim, again[7].dim);
  EXPECT_EQ(trials[7].alpha, again[7].alpha);

  SweepSpec one;
  one.learning_rates = {1e-3};
  one.depths = {2};
  one.dims = {16};
  one.batch_sizes = {40};
  one.alphas = one.betas = one.gammas = {1.0};
  one.budget = 0;
  auto single = sweep_trials(one, 1);
  ASSERT_EQ(single.size(), 1u);
  ExperimentConfig applied = apply_trial(ExperimentConfig{}, single[0]);
  EXPECT_EQ(applied.model.critic.depth, 2);
  EXPECT_EQ(applied.model.rep_dim, 16);
  EXPECT_EQ(applied.trainer.batch_size, 40);
}
