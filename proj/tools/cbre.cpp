#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cbre/data.hpp"
#include "cbre/experiment.hpp"
#include "cbre/gradcheck.hpp"
#include "cbre/metrics.hpp"
#include "cbre/runtime.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cbre;
using namespace cbre::experiment;

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::string reps;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> workers;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON config file");
  cmd->add_option("--set", f.overrides, "dotted-path override key=value (repeatable)");
  cmd->add_option("--reps", f.reps, "replication range a..b");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--workers", f.workers, "parallel training runs");
}

json effective_json(const CommonFlags& f) {
  json j = f.config.empty() ? to_json(ExperimentConfig{}) : load_config_file(f.config);
  for (const auto& o : f.overrides) apply_override(j, o);
  if (!f.reps.empty()) j["dataset"]["reps"] = f.reps;
  if (f.seed) j["seed"] = *f.seed;
  if (!f.out.empty()) j["out"] = f.out;
  if (f.workers) j["workers"] = *f.workers;
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path rep_dir(const fs::path& out, int rep) { return out / ("rep_" + std::to_string(rep)); }

int workers_for(const ExperimentConfig& c, std::size_t jobs) {
  return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(c.workers), jobs));
}

// Trains every replication of `c` into c.out and returns the report.
metrics::EvaluationReport train_all(const ExperimentConfig& c, bool verbose) {
  const fs::path out(c.out);
  fs::create_directories(out);
  write_json(out / "config.effective.json", to_json(c));
  const std::vector<int> reps = c.reps.list();
  std::vector<metrics::ReplicationResult> results(reps.size());
  std::mutex log_mutex;
  parallel_for(reps.size(), workers_for(c, reps.size()), [&](std::size_t k) {
    const int rep = reps[k];
    const ObservationalDataset data = load_replication(c, rep);
    RunResult r = run_replication(c, data, rep);
    const fs::path dir = rep_dir(out, rep);
    fs::create_directories(dir);
    std::ostringstream logcsv;
    r.log.write_csv(logcsv);
    write_text(dir / "trainlog.csv", logcsv.str());
    save_checkpoint(dir / "model", r.model, r.prep);
    metrics::EvaluationReport single{c.dataset_name, {r.report}};
    write_json(dir / "report.json", single.to_json());
    if (verbose) {
      std::lock_guard<std::mutex> lock(log_mutex);
      std::cerr << "replication " << rep << ": " << r.log.entries.size() << " iterations, best "
                << r.log.best_iteration << '\n';
    }
    results[k] = std::move(r.report);
  });
  metrics::EvaluationReport report{c.dataset_name, std::move(results)};
  write_json(out / "report.json", report.to_json());
  return report;
}

void print_aggregate(const metrics::EvaluationReport& report) {
  for (const auto& [regime, metrics] : report.aggregate()) {
    for (const auto& [metric, s] : metrics) {
      std::cout << regime << ' ' << metric << ' ' << s.mean << " +- " << s.stderr_ << '\n';
    }
  }
}

int cmd_train(const CommonFlags& f) {
  const ExperimentConfig c = from_json(effective_json(f));
  print_aggregate(train_all(c, true));
  return 0;
}

int cmd_evaluate(const CommonFlags& f, const std::string& run) {
  json j = effective_json(f);
  const fs::path run_dir(run);
  if (f.config.empty()) {
    // Reuse the training snapshot so the splits match.
    json snapshot = load_config_file(run_dir / "config.effective.json");
    for (const auto& o : f.overrides) apply_override(snapshot, o);
    if (!f.reps.empty()) snapshot["dataset"]["reps"] = f.reps;
    if (f.seed) snapshot["seed"] = *f.seed;
    snapshot["out"] = j["out"];
    j = snapshot;
  }
  const ExperimentConfig c = from_json(j);
  std::vector<metrics::ReplicationResult> results;
  for (int rep : c.reps.list()) {
    ObservationalDataset data = load_replication(c, rep);
    data.validate();
    Checkpoint ck = load_checkpoint(rep_dir(run_dir, rep) / "model");
    if (ck.model.input_dim != data.dim()) {
      throw ShapeError("checkpoint expects " + std::to_string(ck.model.input_dim) +
                       " covariates, dataset has " + std::to_string(data.dim()));
    }
    SplitSpec spec = c.split;
    spec.seed = replication_seeds(c.seed, rep).split;
    DatasetSplits parts = split(data, spec);
    const ObservationalDataset in_sample = c.evaluation.in_sample == InSample::train_validation
                                               ? concat(parts.train, parts.validation)
                                               : parts.train;
    metrics::ReplicationResult r;
    r.replication = rep;
    r.regimes[metrics::regime_name(metrics::Regime::in_sample)] =
        evaluate(ck.model, ck.prep, in_sample, c.evaluation);
    r.regimes[metrics::regime_name(metrics::Regime::out_sample)] =
        evaluate(ck.model, ck.prep, parts.test, c.evaluation);
    results.push_back(std::move(r));
  }
  metrics::EvaluationReport report{c.dataset_name, std::move(results)};
  fs::create_directories(c.out);
  write_json(fs::path(c.out) / "report.json", report.to_json());
  print_aggregate(report);
  return 0;
}

std::string format_summary(const metrics::Summary& s) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << s.mean << " +- " << s.stderr_;
  return os.str();
}

int cmd_ablate(const CommonFlags& f, const std::vector<std::string>& names) {
  if (names.size() < 2) throw ConfigError("ablate needs at least two variants");
  const json base = effective_json(f);
  const fs::path out(base.at("out").get<std::string>());
  std::vector<std::pair<std::string, metrics::EvaluationReport>> runs;
  for (const auto& name : names) {
    json j = base;
    j["variant"] = variant_name(parse_variant(name));
    j["out"] = (out / name).string();
    runs.emplace_back(name, train_all(from_json(j), true));
  }
  std::vector<std::string> columns;
  for (const auto& [name, report] : runs) {
    for (const auto& [regime, metrics] : report.aggregate()) {
      for (const auto& [metric, s] : metrics) {
        if (std::find(columns.begin(), columns.end(), metric) == columns.end()) {
          columns.push_back(metric);
        }
      }
    }
  }
  std::ostringstream csv, md;
  csv << "variant,regime";
  md << "| variant | regime |";
  for (const auto& m : columns) {
    csv << ',' << m << "_mean," << m << "_stderr";
    md << ' ' << m << " |";
  }
  csv << '\n';
  md << "\n|---|---|";
  for (std::size_t i = 0; i < columns.size(); ++i) md << "---|";
  md << '\n';
  csv.precision(17);
  for (const auto& [name, report] : runs) {
    for (const auto& [regime, metrics] : report.aggregate()) {
      csv << name << ',' << regime;
      md << "| " << name << " | " << regime << " |";
      for (const auto& m : columns) {
        auto it = metrics.find(m);
        if (it == metrics.end()) {
          csv << ",,";
          md << "  |";
        } else {
          csv << ',' << it->second.mean << ',' << it->second.stderr_;
          md << ' ' << format_summary(it->second) << " |";
        }
      }
      csv << '\n';
      md << '\n';
    }
  }
  write_text(out / "ablation.csv", csv.str());
  write_text(out / "ablation.md", md.str());
  std::cout << md.str();
  return 0;
}

std::uint64_t require_seed(const std::optional<std::uint64_t>& seed) {
  if (!seed) {
    throw ConfigError("--seed is required: simulated datasets must be reproducible");
  }
  return *seed;
}

struct TwinsFlags {
  std::string source;
  double w_low = -0.1;
  double w_high = 0.1;
  double noise_std = 0.1;
  std::optional<double> fixed_w;
};

int cmd_simulate_twins(const CommonFlags& f, const TwinsFlags& tf) {
  TwinsSimConfig cfg;
  cfg.seed = require_seed(f.seed);
  cfg.w_low = tf.w_low;
  cfg.w_high = tf.w_high;
  cfg.noise_std = tf.noise_std;
  if (tf.fixed_w) cfg.fixed_w = std::vector<double>(TwinsSimConfig::kCovariates, *tf.fixed_w);
  if (tf.source.empty()) throw ConfigError("--source is required");
  const TwinsSource src = load_twins_source(tf.source);
  TwinsAssignment a;
  const ObservationalDataset d = simulate_twins(src, cfg, &a);
  const fs::path out(f.out.empty() ? "twins" : f.out);
  fs::create_directories(out);
  std::ostringstream csv;
  write_csv(csv, d);
  write_text(out / "twins.csv", csv.str());
  std::size_t treated = std::count(a.t.begin(), a.t.end(), 1);
  json side = {{"generator", "twins"},
               {"source", tf.source},
               {"seed", cfg.seed},
               {"w_low", cfg.w_low},
               {"w_high", cfg.w_high},
               {"noise_std", cfg.noise_std},
               {"fixed_w", tf.fixed_w ? json(*tf.fixed_w) : json(nullptr)},
               {"w", a.w},
               {"n", d.size()},
               {"treated", treated}};
  write_json(out / "twins.json", side);
  std::cout << "wrote " << d.size() << " rows, " << treated << " treated\n";
  return 0;
}

int cmd_make_synthetic(const CommonFlags& f, SyntheticConfig cfg) {
  const std::uint64_t master = require_seed(f.seed);
  const fs::path out(f.out.empty() ? "synthetic" : f.out);
  fs::create_directories(out);
  std::vector<int> reps{0};
  if (!f.reps.empty()) reps = parse_reps(f.reps).list();
  for (int rep : reps) {
    SyntheticConfig s = cfg;
    s.seed = rep == 0 ? master : replication_seeds(master, rep).data;
    const ObservationalDataset d = make_synthetic(s);
    const std::string stem = rep == 0 ? "synthetic" : "rep_" + std::to_string(rep);
    std::ostringstream csv;
    write_csv(csv, d);
    write_text(out / (stem + ".csv"), csv.str());
    json side = experiment::detail::synthetic_json(s);
    side["generator"] = "synthetic";
    side["seed"] = s.seed;
    side["master_seed"] = master;
    side["replication"] = rep;
    write_json(out / (stem + ".json"), side);
  }
  std::cout << "wrote " << reps.size() << " dataset(s) to " << out.string() << '\n';
  return 0;
}

int cmd_export_repr(const CommonFlags& f, const std::string& checkpoint, const std::string& data_path) {
  Checkpoint ck = load_checkpoint(checkpoint);
  ObservationalDataset d = load_csv(data_path);
  d.validate();
  if (d.dim() != ck.model.input_dim) {
    throw ShapeError("checkpoint expects " + std::to_string(ck.model.input_dim) +
                     " covariates, dataset has " + std::to_string(d.dim()));
  }
  const Tensor z = representations(ck.model, ck.prep.standardizer.transform_x(d.x));
  std::ostringstream csv;
  csv.precision(17);
  for (Index j = 0; j < z.cols(); ++j) csv << 'z' << j << ',';
  csv << "t\n";
  for (Index i = 0; i < z.rows(); ++i) {
    for (Index j = 0; j < z.cols(); ++j) csv << z(i, j) << ',';
    csv << d.t[static_cast<std::size_t>(i)] << '\n';
  }
  const fs::path out(f.out.empty() ? "." : f.out);
  write_text(out / "repr.csv", csv.str());
  std::cout << "wrote " << z.rows() << " representations of dimension " << z.cols() << '\n';
  return 0;
}

struct LeaderboardRow {
  std::size_t trial = 0;
  Trial params{};
  double criterion = 0.0;
};

std::string leaderboard_csv(std::vector<LeaderboardRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.criterion < b.criterion;
  });
  std::ostringstream os;
  os.precision(17);
  os << "rank,trial,learning_rate,depth,dim,batch_size,alpha,beta,gamma,val_loss\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& p = rows[r].params;
    os << r + 1 << ',' << rows[r].trial << ',' << p.learning_rate << ',' << p.depth << ','
       << p.dim << ',' << p.batch_size << ',' << p.alpha << ',' << p.beta << ',' << p.gamma
       << ',' << rows[r].criterion << '\n';
  }
  return os.str();
}

int cmd_sweep(const CommonFlags& f, std::optional<int> budget) {
  json j = effective_json(f);
  if (budget) j["sweep"]["budget"] = *budget;
  const ExperimentConfig base = from_json(j);
  const fs::path out(base.out);
  fs::create_directories(out);
  write_json(out / "config.effective.json", to_json(base));
  const std::vector<Trial> trials = sweep_trials(base.sweep, base.seed);
  const std::vector<int> reps = base.reps.list();
  std::vector<LeaderboardRow> done;
  std::mutex done_mutex;
  parallel_for(trials.size(), workers_for(base, trials.size()), [&](std::size_t k) {
    ExperimentConfig c = apply_trial(base, trials[k]);
    double total = 0.0;
    for (int rep : reps) {
      RunResult r = run_replication(c, load_replication(c, rep), rep);
      total += r.log.best_val_loss;
    }
    std::lock_guard<std::mutex> lock(done_mutex);
    done.push_back({k, trials[k], total / static_cast<double>(reps.size())});
    write_text(out / "leaderboard.csv", leaderboard_csv(done));
    std::cerr << "trial " << done.size() << '/' << trials.size() << " done\n";
  });
  std::sort(done.begin(), done.end(), [](const auto& a, const auto& b) {
    return a.criterion < b.criterion || (a.criterion == b.criterion && a.trial < b.trial);
  });
  write_text(out / "leaderboard.csv", leaderboard_csv(done));
  ExperimentConfig best = apply_trial(base, done.front().params);
  best.out = (out / "best").string();
  write_json(out / "best_config.json", to_json(best));
  std::cout << "best trial " << done.front().trial << " val_loss " << done.front().criterion
            << '\n';
  return 0;
}

int cmd_gradcheck(const CommonFlags& f, int cases, int penalty_cases) {
  const std::uint64_t seed = f.seed.value_or(1);
  const gradcheck::SuiteResult losses = gradcheck::run_loss_suite(cases, seed);
  const gradcheck::SuiteResult penalty = gradcheck::run_penalty_suite(penalty_cases, seed);
  bool ok = true;
  for (const auto& [name, e] : losses.max_rel_error) {
    const bool pass = e <= 1e-5;
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << name << " max_rel_error " << e << '\n';
  }
  for (const auto& [name, e] : penalty.max_rel_error) {
    const bool pass = e <= 1e-4;
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << name << " max_rel_error " << e << '\n';
  }
  std::cout << "cases " << cases << " + " << penalty_cases << ", "
            << losses.coordinates + penalty.coordinates << " coordinates ("
            << losses.kinks + penalty.kinks << " at ReLU kinks skipped) in "
            << losses.seconds + penalty.seconds << " s\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Counterfactual representation learning experiments"};
  app.require_subcommand(1);
  CommonFlags flags;

  auto* train = app.add_subcommand("train", "train and evaluate every replication");
  add_common(train, flags);

  std::string run;
  auto* eval = app.add_subcommand("evaluate", "re-evaluate the checkpoints of a training run");
  add_common(eval, flags);
  eval->add_option("--run", run, "output directory of a train run")->required();

  std::vector<std::string> variants{"total", "lp_only", "lp_ld", "lp_rec_cyc"};
  auto* ablate = app.add_subcommand("ablate", "train several loss variants on the same splits");
  add_common(ablate, flags);
  ablate->add_option("--variants", variants, "variants to compare")->delimiter(',');

  TwinsFlags twins;
  auto* sim = app.add_subcommand("simulate-twins", "simulate biased treatment on twin pairs");
  add_common(sim, flags);
  sim->add_option("--source", twins.source, "CSV with x0..x29, y0, y1");
  sim->add_option("--w-low", twins.w_low);
  sim->add_option("--w-high", twins.w_high);
  sim->add_option("--noise-std", twins.noise_std);
  sim->add_option("--fixed-w", twins.fixed_w, "use this value for every entry of w");

  SyntheticConfig syn;
  auto* make = app.add_subcommand("make-synthetic", "generate data with known effects");
  add_common(make, flags);
  make->add_option("--n", syn.n);
  make->add_option("--p", syn.p);
  make->add_option("--bias", syn.bias);
  make->add_option("--tau-const", syn.tau_const);
  make->add_option("--tau-slope", syn.tau_slope);
  make->add_option("--noise-std", syn.noise_std);
  make->add_option("--confounding", syn.confounding);

  std::string checkpoint, data_path;
  auto* repr = app.add_subcommand("export-repr", "write eval-mode representations");
  add_common(repr, flags);
  repr->add_option("--checkpoint", checkpoint, "checkpoint stem (without .bin/.json)")->required();
  repr->add_option("--data", data_path, "dataset CSV")->required();

  std::optional<int> budget;
  auto* sweep = app.add_subcommand("sweep", "hyperparameter search on validation loss");
  add_common(sweep, flags);
  sweep->add_option("--budget", budget, "number of random grid points, 0 for the full grid");

  int cases = 100, penalty_cases = 50;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference checks of the losses");
  add_common(grad, flags);
  grad->add_option("--cases", cases);
  grad->add_option("--penalty-cases", penalty_cases);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(flags);
    if (*eval) return cmd_evaluate(flags, run);
    if (*ablate) return cmd_ablate(flags, variants);
    if (*sim) return cmd_simulate_twins(flags, twins);
    if (*make) return cmd_make_synthetic(flags, syn);
    if (*repr) return cmd_export_repr(flags, checkpoint, data_path);
    if (*sweep) return cmd_sweep(flags, budget);
    if (*grad) return cmd_gradcheck(flags, cases, penalty_cases);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
