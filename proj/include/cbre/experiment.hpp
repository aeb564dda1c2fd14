// Experiment configuration, preprocessing, evaluation, checkpoints and the
// per-replication runner shared by the CLI and the acceptance suite.
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "cbre/data.hpp"
#include "cbre/metrics.hpp"
#include "cbre/model.hpp"
#include "cbre/random.hpp"
#include "cbre/trainer.hpp"

namespace cbre::experiment {

using json = nlohmann::json;
namespace fs = std::filesystem;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Variant { total, lp_only, lp_ld, lp_rec_cyc };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::total: return "total";
    case Variant::lp_only: return "lp_only";
    case Variant::lp_ld: return "lp_ld";
    case Variant::lp_rec_cyc: return "lp_rec_cyc";
  }
  return "total";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::total, Variant::lp_only, Variant::lp_ld, Variant::lp_rec_cyc}) {
    if (s == variant_name(v)) return v;
  }
  throw ConfigError("unknown ablation variant '" + s +
                    "' (expected total, lp_only, lp_ld or lp_rec_cyc)");
}

// Zeroes the coefficients of the loss terms the variant leaves out.
inline CbreConfig apply_variant(CbreConfig c, Variant v) {
  switch (v) {
    case Variant::total: break;
    case Variant::lp_only: c.alpha = c.beta = c.gamma = 0.0; break;
    case Variant::lp_ld: c.beta = c.gamma = 0.0; break;
    case Variant::lp_rec_cyc: c.alpha = 0.0; break;
  }
  return c;
}

struct RepRange {
  int first = 1;
  int last = 1;

  std::vector<int> list() const {
    std::vector<int> out;
    for (int r = first; r <= last; ++r) out.push_back(r);
    return out;
  }
  std::string str() const { return std::to_string(first) + ".." + std::to_string(last); }
};

// "a..b" or a single integer.
inline RepRange parse_reps(const std::string& s) {
  RepRange r;
  try {
    const auto dots = s.find("..");
    std::size_t used = 0;
    if (dots == std::string::npos) {
      r.first = r.last = std::stoi(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
    } else {
      const std::string a = s.substr(0, dots), b = s.substr(dots + 2);
      r.first = std::stoi(a, &used);
      if (used != a.size()) throw std::invalid_argument(s);
      r.last = std::stoi(b, &used);
      if (used != b.size()) throw std::invalid_argument(s);
    }
  } catch (const std::exception&) {
    throw ConfigError("invalid replication range '" + s + "' (expected a..b)");
  }
  if (r.first < 1 || r.last < r.first) {
    throw ConfigError("invalid replication range '" + s + "'");
  }
  return r;
}

enum class InSample { train_validation, train };
enum class PolicyPopulation { randomized, all };
enum class OutputSetting { automatic, continuous, binary };

struct EvalOptions {
  InSample in_sample = InSample::train_validation;
  PolicyPopulation policy_population = PolicyPopulation::randomized;
};

struct SweepSpec {
  std::vector<double> learning_rates{1e-2, 1e-3, 1e-4};
  std::vector<int> depths{3, 4, 5, 6};
  std::vector<int> dims{50, 100, 200, 300};
  std::vector<int> batch_sizes;  // 50..200 step 10
  std::vector<double> alphas;    // 0.5..1.5 step 0.1
  std::vector<double> betas;
  std::vector<double> gammas;
  int budget = 20;  // random trials; 0 runs the full grid

  SweepSpec() {
    for (int b = 50; b <= 200; b += 10) batch_sizes.push_back(b);
    for (int k = 5; k <= 15; ++k) {
      alphas.push_back(k / 10.0);
      betas.push_back(k / 10.0);
      gammas.push_back(k / 10.0);
    }
  }

  std::size_t grid_size() const {
    return learning_rates.size() * depths.size() * dims.size() * batch_sizes.size() *
           alphas.size() * betas.size() * gammas.size();
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string dataset_name = "dataset";
  std::string dataset_path;  // CSV file or replication directory
  RepRange reps;
  std::optional<SyntheticConfig> synthetic;  // generate instead of loading
  CbreConfig model;
  OutputSetting output = OutputSetting::automatic;
  TrainConfig trainer;
  SplitSpec split;
  EvalOptions evaluation;
  bool standardize_covariates = true;
  bool standardize_outcome = true;  // continuous outcomes only
  Variant variant = Variant::total;
  std::string out = "runs/out";
  int workers = 1;
  SweepSpec sweep;
};

// ---------------------------------------------------------------------------
// JSON mapping. The effective configuration is always written in full.

namespace detail {

inline json shape_json(const NetShape& s) { return {{"depth", s.depth}, {"hidden", s.hidden}}; }

inline NetShape shape_from(const json& j) {
  return NetShape{j.at("depth").get<int>(), j.at("hidden").get<int>()};
}

inline const char* output_name(OutputSetting o) {
  switch (o) {
    case OutputSetting::automatic: return "auto";
    case OutputSetting::continuous: return "continuous";
    case OutputSetting::binary: return "binary";
  }
  return "auto";
}

inline OutputSetting parse_output(const std::string& s) {
  if (s == "auto") return OutputSetting::automatic;
  if (s == "continuous") return OutputSetting::continuous;
  if (s == "binary") return OutputSetting::binary;
  throw ConfigError("model.output must be auto, continuous or binary, got '" + s + "'");
}

inline json synthetic_json(const SyntheticConfig& s) {
  return {{"n", s.n},
          {"p", s.p},
          {"bias", s.bias},
          {"tau_const", s.tau_const},
          {"tau_slope", s.tau_slope},
          {"noise_std", s.noise_std},
          {"confounding", s.confounding}};
}

inline SyntheticConfig synthetic_from(const json& j) {
  SyntheticConfig s;
  s.n = j.at("n").get<int>();
  s.p = j.at("p").get<int>();
  s.bias = j.at("bias").get<double>();
  s.tau_const = j.at("tau_const").get<double>();
  s.tau_slope = j.at("tau_slope").get<double>();
  s.noise_std = j.at("noise_std").get<double>();
  s.confounding = j.at("confounding").get<double>();
  return s;
}

// Every key of `in` must exist in `schema`, recursively through objects.
inline void check_keys(const json& in, const json& schema, const std::string& prefix) {
  for (auto it = in.begin(); it != in.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    const json& s = schema.at(it.key());
    if (s.is_object() && it.value().is_object()) check_keys(it.value(), s, key);
  }
}

}  // namespace detail

namespace detail {

// Recursive object merge; unlike a JSON merge patch, null is kept as a value.
inline void merge_into(json& base, const json& given) {
  for (auto it = given.begin(); it != given.end(); ++it) {
    if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object()) {
      merge_into(base[it.key()], *it);
    } else {
      base[it.key()] = *it;
    }
  }
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  const CbreConfig& m = c.model;
  json synthetic = c.synthetic ? detail::synthetic_json(*c.synthetic) : json(nullptr);
  return {
      {"seed", c.seed},
      {"dataset",
       {{"name", c.dataset_name},
        {"path", c.dataset_path},
        {"reps", c.reps.str()},
        {"synthetic", synthetic}}},
      {"model",
       {{"alpha", m.alpha},
        {"beta", m.beta},
        {"gamma", m.gamma},
        {"lambda", m.lambda},
        {"delta", m.delta},
        {"rep_dim", m.rep_dim},
        {"noise_dim", m.noise_dim},
        {"encoder", detail::shape_json(m.encoder)},
        {"critic", detail::shape_json(m.critic)},
        {"decoder_t", detail::shape_json(m.decoder_t)},
        {"decoder_c", detail::shape_json(m.decoder_c)},
        {"predictor", detail::shape_json(m.predictor)},
        {"dropout_rate", m.dropout_rate},
        {"batchnorm", m.batchnorm},
        {"output", detail::output_name(c.output)},
        {"predictor_kind", m.predictor_kind == PredictorKind::two_heads ? "two_heads" : "single_head"},
        {"l2_squared", m.l2_squared}}},
      {"trainer",
       {{"batch_size", c.trainer.batch_size},
        {"learning_rate", c.trainer.learning_rate},
        {"max_iterations", c.trainer.max_iterations},
        {"patience", c.trainer.patience},
        {"eval_every", c.trainer.eval_every},
        {"adam",
         {{"beta1", c.trainer.adam.beta1},
          {"beta2", c.trainer.adam.beta2},
          {"epsilon", c.trainer.adam.epsilon}}}}},
      {"split",
       {{"train", c.split.train}, {"validation", c.split.validation}, {"test", c.split.test}}},
      {"evaluation",
       {{"in_sample", c.evaluation.in_sample == InSample::train_validation ? "train_validation" : "train"},
        {"policy_population",
         c.evaluation.policy_population == PolicyPopulation::randomized ? "randomized" : "all"},
        {"standardize_covariates", c.standardize_covariates},
        {"standardize_outcome", c.standardize_outcome}}},
      {"variant", variant_name(c.variant)},
      {"out", c.out},
      {"workers", c.workers},
      {"sweep",
       {{"learning_rates", c.sweep.learning_rates},
        {"depths", c.sweep.depths},
        {"dims", c.sweep.dims},
        {"batch_sizes", c.sweep.batch_sizes},
        {"alphas", c.sweep.alphas},
        {"betas", c.sweep.betas},
        {"gammas", c.sweep.gammas},
        {"budget", c.sweep.budget}}},
  };
}

inline ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  try {
    detail::check_keys(j, to_json(ExperimentConfig{}), "");
    c.seed = j.at("seed").get<std::uint64_t>();
    const json& d = j.at("dataset");
    c.dataset_name = d.at("name").get<std::string>();
    c.dataset_path = d.at("path").get<std::string>();
    c.reps = parse_reps(d.at("reps").is_number() ? std::to_string(d.at("reps").get<int>())
                                                 : d.at("reps").get<std::string>());
    if (!d.at("synthetic").is_null()) {
      json base = detail::synthetic_json(SyntheticConfig{});
      json given = d.at("synthetic");
      detail::check_keys(given, base, "dataset.synthetic");
      base.update(given);
      c.synthetic = detail::synthetic_from(base);
    }
    const json& m = j.at("model");
    c.model.alpha = m.at("alpha").get<double>();
    c.model.beta = m.at("beta").get<double>();
    c.model.gamma = m.at("gamma").get<double>();
    c.model.lambda = m.at("lambda").get<double>();
    c.model.delta = m.at("delta").get<double>();
    c.model.rep_dim = m.at("rep_dim").get<int>();
    c.model.noise_dim = m.at("noise_dim").get<int>();
    c.model.encoder = detail::shape_from(m.at("encoder"));
    c.model.critic = detail::shape_from(m.at("critic"));
    c.model.decoder_t = detail::shape_from(m.at("decoder_t"));
    c.model.decoder_c = detail::shape_from(m.at("decoder_c"));
    c.model.predictor = detail::shape_from(m.at("predictor"));
    c.model.dropout_rate = m.at("dropout_rate").get<double>();
    c.model.batchnorm = m.at("batchnorm").get<bool>();
    c.output = detail::parse_output(m.at("output").get<std::string>());
    const std::string kind = m.at("predictor_kind").get<std::string>();
    if (kind == "two_heads") {
      c.model.predictor_kind = PredictorKind::two_heads;
    } else if (kind == "single_head") {
      c.model.predictor_kind = PredictorKind::single_head;
    } else {
      throw ConfigError("model.predictor_kind must be two_heads or single_head");
    }
    c.model.l2_squared = m.at("l2_squared").get<bool>();
    const json& t = j.at("trainer");
    c.trainer.batch_size = t.at("batch_size").get<int>();
    c.trainer.learning_rate = t.at("learning_rate").get<double>();
    c.trainer.max_iterations = t.at("max_iterations").get<int>();
    c.trainer.patience = t.at("patience").get<int>();
    c.trainer.eval_every = t.at("eval_every").get<int>();
    c.trainer.adam.beta1 = t.at("adam").at("beta1").get<double>();
    c.trainer.adam.beta2 = t.at("adam").at("beta2").get<double>();
    c.trainer.adam.epsilon = t.at("adam").at("epsilon").get<double>();
    const json& s = j.at("split");
    c.split.train = s.at("train").get<double>();
    c.split.validation = s.at("validation").get<double>();
    c.split.test = s.at("test").get<double>();
    const json& e = j.at("evaluation");
    const std::string in = e.at("in_sample").get<std::string>();
    if (in != "train_validation" && in != "train") {
      throw ConfigError("evaluation.in_sample must be train_validation or train");
    }
    c.evaluation.in_sample = in == "train" ? InSample::train : InSample::train_validation;
    const std::string pop = e.at("policy_population").get<std::string>();
    if (pop != "randomized" && pop != "all") {
      throw ConfigError("evaluation.policy_population must be randomized or all");
    }
    c.evaluation.policy_population =
        pop == "all" ? PolicyPopulation::all : PolicyPopulation::randomized;
    c.standardize_covariates = e.at("standardize_covariates").get<bool>();
    c.standardize_outcome = e.at("standardize_outcome").get<bool>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.out = j.at("out").get<std::string>();
    c.workers = j.at("workers").get<int>();
    const json& w = j.at("sweep");
    c.sweep.learning_rates = w.at("learning_rates").get<std::vector<double>>();
    c.sweep.depths = w.at("depths").get<std::vector<int>>();
    c.sweep.dims = w.at("dims").get<std::vector<int>>();
    c.sweep.batch_sizes = w.at("batch_sizes").get<std::vector<int>>();
    c.sweep.alphas = w.at("alphas").get<std::vector<double>>();
    c.sweep.betas = w.at("betas").get<std::vector<double>>();
    c.sweep.gammas = w.at("gammas").get<std::vector<double>>();
    c.sweep.budget = w.at("budget").get<int>();
  } catch (const json::exception& err) {
    throw ConfigError(std::string("invalid config: ") + err.what());
  }
  try {
    c.model.validate();
    c.trainer.validate();
    c.split.validate();
  } catch (const std::invalid_argument& err) {
    throw ConfigError(std::string("invalid config: ") + err.what());
  }
  if (c.workers < 1) throw ConfigError("workers must be >= 1");
  if (c.dataset_path.empty() && !c.synthetic) {
    throw ConfigError("dataset.path is required unless dataset.synthetic is set");
  }
  return c;
}

// Applies "a.b.c=value". The value is parsed as JSON, falling back to a
// plain string. The key must already exist.
inline void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw;
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) {
      throw ConfigError("unknown config key '" + path + "'");
    }
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (path == "dataset.synthetic" && value.is_object()) {
    json base = detail::synthetic_json(SyntheticConfig{});
    detail::check_keys(value, base, path);
    base.update(value);
    value = base;
  } else if (node->is_null() && path.rfind("dataset.synthetic", 0) != 0) {
    // Nullable leaves accept any value.
  }
  *node = std::move(value);
}

// Parses a config document merged over the defaults. Parse errors carry the
// line and column reported by the JSON reader.
inline json load_config_json(const std::string& text, const std::string& origin) {
  json given;
  try {
    given = json::parse(text);
  } catch (const json::parse_error& err) {
    throw ConfigError(origin + ": " + err.what());
  }
  if (!given.is_object()) throw ConfigError(origin + ": top level must be an object");
  json base = to_json(ExperimentConfig{});
  detail::check_keys(given, base, "");
  if (given.contains("dataset") && given["dataset"].contains("synthetic") &&
      given["dataset"]["synthetic"].is_object()) {
    json syn = detail::synthetic_json(SyntheticConfig{});
    detail::check_keys(given["dataset"]["synthetic"], syn, "dataset.synthetic");
    syn.update(given["dataset"]["synthetic"]);
    given["dataset"]["synthetic"] = syn;
  }
  detail::merge_into(base, given);
  return base;
}

inline json load_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return load_config_json(ss.str(), path.string());
}

// ---------------------------------------------------------------------------
// Seeds. Every replication derives its streams from (master seed, index).

struct ReplicationSeeds {
  std::uint64_t data;
  std::uint64_t split;
  std::uint64_t model;
  std::uint64_t trainer;
};

inline ReplicationSeeds replication_seeds(std::uint64_t master, int rep) {
  const std::uint64_t base = mix_seed(master, static_cast<std::uint64_t>(rep));
  return {mix_seed(base, 1), mix_seed(base, 2), mix_seed(base, 3), mix_seed(base, 4)};
}

// ---------------------------------------------------------------------------
// Data access and preprocessing.

inline ObservationalDataset load_replication(const ExperimentConfig& c, int rep) {
  ObservationalDataset d;
  if (c.synthetic) {
    SyntheticConfig s = *c.synthetic;
    s.seed = replication_seeds(c.seed, rep).data;
    d = make_synthetic(s);
  } else {
    const fs::path p(c.dataset_path);
    d = fs::is_directory(p) ? load_csv(replication_path(p, rep)) : load_csv(p);
  }
  d.name = c.dataset_name;
  d.replication = rep;
  return d;
}

struct Preprocessing {
  Standardizer standardizer;
  bool outcome_scaled = false;

  Batch batch(const ObservationalDataset& d, const SampleWeights& w) const {
    Batch b;
    b.x = standardizer.transform_x(d.x);
    b.t = d.t;
    b.y.resize(d.size(), 1);
    for (Index i = 0; i < d.size(); ++i) {
      const double y = d.yf[static_cast<std::size_t>(i)];
      b.y(i, 0) = outcome_scaled ? standardizer.transform_y(y) : y;
    }
    b.weights = w.column(d.t);
    return b;
  }

  double outcome(double y_model) const {
    return outcome_scaled ? standardizer.inverse_y(y_model) : y_model;
  }
};

inline Preprocessing fit_preprocessing(const ObservationalDataset& train, bool covariates,
                                       bool outcome) {
  Preprocessing p;
  p.outcome_scaled = outcome;
  p.standardizer = Standardizer::fit(train, outcome);
  if (!covariates) {
    std::fill(p.standardizer.x_mean.begin(), p.standardizer.x_mean.end(), 0.0);
    std::fill(p.standardizer.x_scale.begin(), p.standardizer.x_scale.end(), 1.0);
  }
  return p;
}

inline OutputMode resolve_output(OutputSetting s, const ObservationalDataset& d) {
  if (s == OutputSetting::continuous) return OutputMode::continuous;
  if (s == OutputSetting::binary) return OutputMode::binary;
  return d.binary_outcome() ? OutputMode::binary : OutputMode::continuous;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct Predictions {
  std::vector<double> y1;
  std::vector<double> y0;
};

inline Predictions predict(CbreModel& model, const Preprocessing& prep, const Tensor& x,
                           std::span<const int> t) {
  const PotentialOutcomes po = predict_outcomes(model, prep.standardizer.transform_x(x), t);
  Predictions p;
  for (std::size_t i = 0; i < po.treated.size(); ++i) {
    p.y1.push_back(prep.outcome(po.treated[i]));
    p.y0.push_back(prep.outcome(po.control[i]));
  }
  return p;
}

// Metrics the dataset's ground truth supports: randomized subsample -> policy
// risk; binary outcomes with both recorded outcomes -> AUC; otherwise both
// potential outcomes -> sqrt(PEHE) and ATE error.
inline metrics::MetricRow score(const ObservationalDataset& d, const Predictions& p,
                                const EvalOptions& opt) {
  metrics::MetricRow row;
  if (d.e) {
    std::vector<double> ite(p.y1.size());
    for (std::size_t i = 0; i < ite.size(); ++i) ite[i] = p.y1[i] - p.y0[i];
    std::span<const int> mask;
    if (opt.policy_population == PolicyPopulation::randomized) mask = *d.e;
    row["policy_risk"] = metrics::policy_risk(d.yf, d.t, ite, mask);
    return row;
  }
  if (d.binary_outcome() && d.ycf) {
    auto [y1, y0] = d.recorded_outcomes();
    std::vector<int> labels;
    std::vector<double> scores;
    for (std::size_t i = 0; i < y1.size(); ++i) {
      labels.push_back(static_cast<int>(y1[i]));
      scores.push_back(p.y1[i]);
    }
    for (std::size_t i = 0; i < y0.size(); ++i) {
      labels.push_back(static_cast<int>(y0[i]));
      scores.push_back(p.y0[i]);
    }
    row["auc"] = metrics::auc(labels, scores);
    return row;
  }
  if (!d.has_potential_outcomes()) {
    throw std::invalid_argument(d.name + ": no ground truth for any metric");
  }
  auto [y1, y0] = d.potential_outcomes();
  row["pehe"] = metrics::pehe(y1, y0, p.y1, p.y0);
  row["ate_error"] = metrics::ate_error(y1, y0, p.y1, p.y0);
  return row;
}

inline metrics::MetricRow evaluate(CbreModel& model, const Preprocessing& prep,
                                   const ObservationalDataset& d, const EvalOptions& opt) {
  return score(d, predict(model, prep, d.x, d.t), opt);
}

inline ObservationalDataset concat(const ObservationalDataset& a, const ObservationalDataset& b) {
  std::vector<Index> rows;
  ObservationalDataset both = a;
  both.x.resize(a.size() + b.size(), a.dim());
  both.x << a.x, b.x;
  both.t.insert(both.t.end(), b.t.begin(), b.t.end());
  both.yf.insert(both.yf.end(), b.yf.begin(), b.yf.end());
  auto join = [](auto& dst, const auto& src) {
    if (dst && src) dst->insert(dst->end(), src->begin(), src->end());
  };
  join(both.ycf, b.ycf);
  join(both.mu0, b.mu0);
  join(both.mu1, b.mu1);
  join(both.e, b.e);
  return both;
}

// ---------------------------------------------------------------------------
// Checkpoints: six network blocks in a fixed order plus a JSON sidecar with
// the configuration and preprocessing statistics.

inline json checkpoint_metadata(const CbreModel& model, const Preprocessing& prep) {
  ExperimentConfig holder;
  holder.model = model.config;
  holder.output = model.config.output == OutputMode::binary ? OutputSetting::binary
                                                            : OutputSetting::continuous;
  json model_json = to_json(holder)["model"];
  return {{"format", "cbre-checkpoint"},
          {"version", 1},
          {"input_dim", model.input_dim},
          {"networks", {"encoder", "critic", "decoder_t", "decoder_c", "head_t", "head_c"}},
          {"model", model_json},
          {"preprocessing",
           {{"x_mean", prep.standardizer.x_mean},
            {"x_scale", prep.standardizer.x_scale},
            {"y_mean", prep.standardizer.y_mean},
            {"y_scale", prep.standardizer.y_scale},
            {"outcome_scaled", prep.outcome_scaled}}}};
}

inline void save_checkpoint(const fs::path& stem, CbreModel& model, const Preprocessing& prep) {
  std::ofstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + stem.string() + ".bin");
  for (nn::Mlp* net : model.networks()) net->write(bin);
  std::ofstream meta(stem.string() + ".json");
  meta << checkpoint_metadata(model, prep).dump(2) << '\n';
  if (!bin || !meta) throw std::runtime_error("cannot write checkpoint " + stem.string());
}

struct Checkpoint {
  CbreModel model;
  Preprocessing prep;
};

inline Checkpoint load_checkpoint(const fs::path& stem) {
  std::ifstream meta_in(stem.string() + ".json");
  if (!meta_in) throw std::runtime_error("cannot open " + stem.string() + ".json");
  json meta = json::parse(meta_in);
  if (meta.value("format", "") != "cbre-checkpoint") {
    throw std::runtime_error(stem.string() + ".json is not a checkpoint sidecar");
  }
  json full = to_json(ExperimentConfig{});
  full["model"] = meta.at("model");
  full["dataset"]["path"] = "unused";
  ExperimentConfig holder = from_json(full);
  CbreConfig config = holder.model;
  config.output = holder.output == OutputSetting::binary ? OutputMode::binary
                                                         : OutputMode::continuous;
  Checkpoint ck;
  ck.model = CbreModel::init(config, meta.at("input_dim").get<int>(), 0);
  std::ifstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + stem.string() + ".bin");
  for (nn::Mlp* net : ck.model.networks()) *net = nn::Mlp::read(bin, net->config());
  const json& p = meta.at("preprocessing");
  ck.prep.standardizer.x_mean = p.at("x_mean").get<std::vector<double>>();
  ck.prep.standardizer.x_scale = p.at("x_scale").get<std::vector<double>>();
  ck.prep.standardizer.y_mean = p.at("y_mean").get<double>();
  ck.prep.standardizer.y_scale = p.at("y_scale").get<double>();
  ck.prep.outcome_scaled = p.at("outcome_scaled").get<bool>();
  return ck;
}

// ---------------------------------------------------------------------------
// One replication: split, preprocess, train, evaluate.

struct RunResult {
  metrics::ReplicationResult report;
  CbreModel model;
  Preprocessing prep;
  TrainLog log;
  SplitIndices split;
  double initial_gap = 0.0;  // wasserstein_gap at the first iteration
};

inline RunResult run_replication(const ExperimentConfig& c, const ObservationalDataset& data,
                                 int rep) {
  data.validate();
  const ReplicationSeeds seeds = replication_seeds(c.seed, rep);
  SplitSpec spec = c.split;
  spec.seed = seeds.split;
  DatasetSplits parts = split(data, spec);

  CbreConfig mc = apply_variant(c.model, c.variant);
  mc.output = resolve_output(c.output, data);
  const bool scale_y = c.standardize_outcome && mc.output == OutputMode::continuous;

  RunResult r;
  r.split = parts.indices;
  r.prep = fit_preprocessing(parts.train, c.standardize_covariates, scale_y);
  const SampleWeights w = compute_weights(parts.train.t);
  const Batch train = r.prep.batch(parts.train, w);
  const Batch validation = r.prep.batch(parts.validation, w);

  TrainConfig tc = c.trainer;
  tc.seed = seeds.trainer;
  FitResult fitted = fit(CbreModel::init(mc, static_cast<int>(data.dim()), seeds.model), train,
                         validation, tc);
  r.model = std::move(fitted.model);
  r.log = std::move(fitted.log);
  r.initial_gap = r.log.entries.empty() ? 0.0 : r.log.initial.wasserstein_gap;

  const ObservationalDataset in_sample = c.evaluation.in_sample == InSample::train_validation
                                             ? concat(parts.train, parts.validation)
                                             : parts.train;
  r.report.replication = rep;
  r.report.regimes[metrics::regime_name(metrics::Regime::in_sample)] =
      evaluate(r.model, r.prep, in_sample, c.evaluation);
  r.report.regimes[metrics::regime_name(metrics::Regime::out_sample)] =
      evaluate(r.model, r.prep, parts.test, c.evaluation);
  r.report.extra = {{"variant", variant_name(c.variant)},
                    {"iterations", r.log.entries.size()},
                    {"best_iteration", r.log.best_iteration},
                    {"best_val_loss", r.log.best_val_loss},
                    {"train_size", parts.train.size()},
                    {"validation_size", parts.validation.size()},
                    {"test_size", parts.test.size()}};
  return r;
}

// Runs fn(index) for index in [0, count) on up to `workers` threads and
// rethrows the first failure after all threads finish.
inline void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < threads; ++k) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Sweeps.

struct Trial {
  double learning_rate;
  int depth;
  int dim;
  int batch_size;
  double alpha, beta, gamma;
};

// Applies one grid point: depth to every network, width to every hidden layer
// and to the representation.
inline ExperimentConfig apply_trial(ExperimentConfig c, const Trial& t) {
  c.trainer.learning_rate = t.learning_rate;
  c.trainer.batch_size = t.batch_size;
  for (NetShape* s : {&c.model.encoder, &c.model.critic, &c.model.decoder_t, &c.model.decoder_c,
                      &c.model.predictor}) {
    s->depth = t.depth;
    s->hidden = t.dim;
  }
  c.model.rep_dim = t.dim;
  c.model.alpha = t.alpha;
  c.model.beta = t.beta;
  c.model.gamma = t.gamma;
  return c;
}

inline Trial trial_at(const SweepSpec& s, std::size_t index) {
  Trial t{};
  auto pick = [&index](const auto& v) {
    const auto& value = v[index % v.size()];
    index /= v.size();
    return value;
  };
  t.gamma = pick(s.gammas);
  t.beta = pick(s.betas);
  t.alpha = pick(s.alphas);
  t.batch_size = pick(s.batch_sizes);
  t.dim = pick(s.dims);
  t.depth = pick(s.depths);
  t.learning_rate = pick(s.learning_rates);
  return t;
}

// The full grid when budget is 0 or covers it, otherwise `budget` distinct
// grid points drawn with the given seed.
inline std::vector<Trial> sweep_trials(const SweepSpec& s, std::uint64_t seed) {
  const std::size_t size = s.grid_size();
  if (size == 0) throw ConfigError("sweep grid is empty");
  std::vector<std::size_t> indices;
  if (s.budget <= 0 || static_cast<std::size_t>(s.budget) >= size) {
    for (std::size_t i = 0; i < size; ++i) indices.push_back(i);
  } else {
    Rng rng(mix_seed(seed, 51));
    std::uniform_int_distribution<std::size_t> dist(0, size - 1);
    while (indices.size() < static_cast<std::size_t>(s.budget)) {
      const std::size_t i = dist(rng);
      if (std::find(indices.begin(), indices.end(), i) == indices.end()) indices.push_back(i);
    }
  }
  std::vector<Trial> out;
  for (std::size_t i : indices) out.push_back(trial_at(s, i));
  return out;
}

}  // namespace cbre::experiment
