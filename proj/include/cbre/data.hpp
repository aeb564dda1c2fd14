// Observational datasets: CSV schema, validation, splitting, and the
// selection-bias simulators.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbre/autodiff.hpp"
#include "cbre/random.hpp"

namespace cbre {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ObservationalDataset {
  Tensor x;  // n x p
  std::vector<int> t;
  std::vector<double> yf;
  std::optional<std::vector<double>> ycf;
  std::optional<std::vector<double>> mu0;
  std::optional<std::vector<double>> mu1;
  std::optional<std::vector<int>> e;  // randomized-trial membership
  std::string name;
  int replication = 0;

  Index size() const { return x.rows(); }
  Index dim() const { return x.cols(); }

  // Throws DataError on any violated invariant.
  void validate() const {
    const auto n = static_cast<std::size_t>(x.rows());
    if (x.cols() < 1) throw DataError(name + ": dataset needs at least one covariate");
    if (t.size() != n || yf.size() != n) throw DataError(name + ": column lengths differ");
    auto check_len = [&](const auto& col, const char* what) {
      if (col && col->size() != n) throw DataError(name + ": column " + what + " has wrong length");
    };
    check_len(ycf, "ycf");
    check_len(mu0, "mu0");
    check_len(mu1, "mu1");
    check_len(e, "e");
    if (!x.allFinite()) throw DataError(name + ": non-finite covariate");
    std::size_t treated = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (t[i] != 0 && t[i] != 1) {
        throw DataError(name + ": row " + std::to_string(i) + " column t is not binary");
      }
      treated += static_cast<std::size_t>(t[i]);
      if (!std::isfinite(yf[i])) throw DataError(name + ": row " + std::to_string(i) + " column yf is NaN");
    }
    if (treated == 0 || treated == n) {
      throw DataError(name + ": degenerate treatment assignment violates overlap");
    }
    if (e) {
      for (std::size_t i = 0; i < n; ++i) {
        if ((*e)[i] != 0 && (*e)[i] != 1) {
          throw DataError(name + ": row " + std::to_string(i) + " column e is not binary");
        }
      }
    }
  }

  // Potential outcomes under treatment/control: noiseless mu columns when
  // present, otherwise the factual/counterfactual pair.
  bool has_potential_outcomes() const { return (mu0 && mu1) || ycf.has_value(); }

  std::pair<std::vector<double>, std::vector<double>> potential_outcomes() const {
    if (mu0 && mu1) return {*mu1, *mu0};
    if (!ycf) throw DataError("PEHE requires both potential outcomes");
    std::vector<double> y1(yf.size()), y0(yf.size());
    for (std::size_t i = 0; i < yf.size(); ++i) {
      y1[i] = t[i] == 1 ? yf[i] : (*ycf)[i];
      y0[i] = t[i] == 1 ? (*ycf)[i] : yf[i];
    }
    return {y1, y0};
  }

  // Recorded (noisy) outcomes under treatment/control; requires ycf.
  std::pair<std::vector<double>, std::vector<double>> recorded_outcomes() const {
    if (!ycf) throw DataError(name + ": counterfactual outcomes are not recorded");
    std::vector<double> y1(yf.size()), y0(yf.size());
    for (std::size_t i = 0; i < yf.size(); ++i) {
      y1[i] = t[i] == 1 ? yf[i] : (*ycf)[i];
      y0[i] = t[i] == 1 ? (*ycf)[i] : yf[i];
    }
    return {y1, y0};
  }

  ObservationalDataset subset(std::span<const Index> rows) const {
    ObservationalDataset out;
    out.name = name;
    out.replication = replication;
    const Index m = static_cast<Index>(rows.size());
    out.x.resize(m, x.cols());
    auto pick = [&](const auto& src) {
      std::remove_cvref_t<decltype(src)> dst;
      dst.reserve(rows.size());
      for (Index r : rows) dst.push_back(src[static_cast<std::size_t>(r)]);
      return dst;
    };
    for (Index i = 0; i < m; ++i) out.x.row(i) = x.row(rows[static_cast<std::size_t>(i)]);
    out.t = pick(t);
    out.yf = pick(yf);
    if (ycf) out.ycf = pick(*ycf);
    if (mu0) out.mu0 = pick(*mu0);
    if (mu1) out.mu1 = pick(*mu1);
    if (e) out.e = pick(*e);
    return out;
  }

  bool binary_outcome() const {
    auto is01 = [](double v) { return v == 0.0 || v == 1.0; };
    if (!std::all_of(yf.begin(), yf.end(), is01)) return false;
    return !ycf || std::all_of(ycf->begin(), ycf->end(), is01);
  }
};

// ---------------------------------------------------------------------------
// CSV: header x0,...,x{p-1},t,yf[,ycf][,mu0][,mu1][,e].

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_cell(const std::string& s, std::size_t row, const std::string& col) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    if (!std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("row " + std::to_string(row) + " column " + col +
                    ": invalid or NaN value '" + s + "'");
  }
}

}  // namespace detail

inline ObservationalDataset read_csv(std::istream& in, const std::string& name = "dataset") {
  std::string line;
  if (!std::getline(in, line)) throw DataError(name + ": missing header row");
  const auto header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  int p = 0;
  while (col.count("x" + std::to_string(p))) ++p;
  if (p == 0) throw DataError(name + ": missing mandatory column x0");
  for (const char* required : {"t", "yf"}) {
    if (!col.count(required)) throw DataError(name + ": missing mandatory column " + required);
  }
  auto opt = [&](const char* c) -> std::optional<std::size_t> {
    if (auto it = col.find(c); it != col.end()) return it->second;
    return std::nullopt;
  };
  const auto ycf_c = opt("ycf"), mu0_c = opt("mu0"), mu1_c = opt("mu1"), e_c = opt("e");

  ObservationalDataset d;
  d.name = name;
  std::vector<std::vector<double>> rows;
  std::vector<double> ycf, mu0, mu1;
  std::vector<int> e;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError(name + ": row " + std::to_string(row) + " has " +
                      std::to_string(cells.size()) + " cells, header has " +
                      std::to_string(header.size()));
    }
    std::vector<double> xr(static_cast<std::size_t>(p));
    for (int j = 0; j < p; ++j) {
      const std::string c = "x" + std::to_string(j);
      xr[static_cast<std::size_t>(j)] = detail::parse_cell(cells[col[c]], row, c);
    }
    rows.push_back(std::move(xr));
    const double tv = detail::parse_cell(cells[col["t"]], row, "t");
    if (tv != 0.0 && tv != 1.0) {
      throw DataError(name + ": row " + std::to_string(row) + " column t is not binary");
    }
    d.t.push_back(static_cast<int>(tv));
    d.yf.push_back(detail::parse_cell(cells[col["yf"]], row, "yf"));
    if (ycf_c) ycf.push_back(detail::parse_cell(cells[*ycf_c], row, "ycf"));
    if (mu0_c) mu0.push_back(detail::parse_cell(cells[*mu0_c], row, "mu0"));
    if (mu1_c) mu1.push_back(detail::parse_cell(cells[*mu1_c], row, "mu1"));
    if (e_c) {
      const double ev = detail::parse_cell(cells[*e_c], row, "e");
      if (ev != 0.0 && ev != 1.0) {
        throw DataError(name + ": row " + std::to_string(row) + " column e is not binary");
      }
      e.push_back(static_cast<int>(ev));
    }
  }
  d.x.resize(static_cast<Index>(rows.size()), p);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int j = 0; j < p; ++j) d.x(static_cast<Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
  }
  if (ycf_c) d.ycf = std::move(ycf);
  if (mu0_c) d.mu0 = std::move(mu0);
  if (mu1_c) d.mu1 = std::move(mu1);
  if (e_c) d.e = std::move(e);
  try {
    d.validate();
  } catch (const DataError& err) {
    throw DataError(std::string(err.what()));
  }
  return d;
}

inline ObservationalDataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_csv(in, path.string());
}

inline void write_csv(std::ostream& os, const ObservationalDataset& d) {
  for (Index j = 0; j < d.dim(); ++j) os << 'x' << j << ',';
  os << "t,yf";
  if (d.ycf) os << ",ycf";
  if (d.mu0) os << ",mu0";
  if (d.mu1) os << ",mu1";
  if (d.e) os << ",e";
  os << '\n';
  os << std::setprecision(17);
  for (Index i = 0; i < d.size(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    for (Index j = 0; j < d.dim(); ++j) os << d.x(i, j) << ',';
    os << d.t[k] << ',' << d.yf[k];
    if (d.ycf) os << ',' << (*d.ycf)[k];
    if (d.mu0) os << ',' << (*d.mu0)[k];
    if (d.mu1) os << ',' << (*d.mu1)[k];
    if (d.e) os << ',' << (*d.e)[k];
    os << '\n';
  }
}

inline void save_csv(const std::filesystem::path& path, const ObservationalDataset& d) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_csv(out, d);
}

// Replication files live at <dir>/rep_<k>.csv.
inline std::filesystem::path replication_path(const std::filesystem::path& dir, int rep) {
  return dir / ("rep_" + std::to_string(rep) + ".csv");
}

// ---------------------------------------------------------------------------
// Splits.

struct SplitSpec {
  double train = 0.6;
  double validation = 0.3;
  double test = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(train > 0.0 && validation > 0.0 && test > 0.0)) {
      throw std::invalid_argument("SplitSpec: fractions must be positive");
    }
    if (std::abs(train + validation + test - 1.0) > 1e-9) {
      throw std::invalid_argument("SplitSpec: fractions must sum to 1");
    }
  }
};

struct SplitIndices {
  std::vector<Index> train;
  std::vector<Index> validation;
  std::vector<Index> test;
};

// Stratified by treatment. Train and validation get floor(n * fraction)
// units, the remainder goes to test. Train and validation must contain both
// groups.
inline SplitIndices split_indices(std::span<const int> t, const SplitSpec& spec) {
  spec.validate();
  const Index n = static_cast<Index>(t.size());
  if (n < 10) throw std::invalid_argument("split: need at least 10 units");
  std::vector<Index> treated, control;
  for (Index i = 0; i < n; ++i) (t[static_cast<std::size_t>(i)] == 1 ? treated : control).push_back(i);
  Rng rng(mix_seed(spec.seed, 21));
  std::shuffle(treated.begin(), treated.end(), rng);
  std::shuffle(control.begin(), control.end(), rng);

  const Index n_train = static_cast<Index>(std::floor(static_cast<double>(n) * spec.train + 1e-9));
  const Index n_val = static_cast<Index>(std::floor(static_cast<double>(n) * spec.validation + 1e-9));
  const double u = static_cast<double>(treated.size()) / static_cast<double>(n);
  const Index nt = static_cast<Index>(treated.size());
  const Index nc = static_cast<Index>(control.size());

  auto treated_share = [&](Index size, Index avail_t, Index avail_c) {
    Index k = static_cast<Index>(std::llround(u * static_cast<double>(size)));
    k = std::clamp<Index>(k, std::max<Index>(0, size - avail_c), std::min(size, avail_t));
    return k;
  };
  const Index train_t = treated_share(n_train, nt, nc);
  const Index train_c = n_train - train_t;
  const Index val_t = treated_share(n_val, nt - train_t, nc - train_c);
  const Index val_c = n_val - val_t;

  SplitIndices s;
  auto take = [](const std::vector<Index>& src, Index from, Index count, std::vector<Index>& dst) {
    dst.insert(dst.end(), src.begin() + from, src.begin() + from + count);
  };
  take(treated, 0, train_t, s.train);
  take(control, 0, train_c, s.train);
  take(treated, train_t, val_t, s.validation);
  take(control, train_c, val_c, s.validation);
  take(treated, train_t + val_t, nt - train_t - val_t, s.test);
  take(control, train_c + val_c, nc - train_c - val_c, s.test);
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.test.begin(), s.test.end());
  if (train_t == 0 || train_c == 0) {
    throw std::invalid_argument("split: training split would have an empty treatment group");
  }
  if (val_t == 0 || val_c == 0) {
    throw std::invalid_argument("split: validation split would have an empty treatment group");
  }
  return s;
}

struct DatasetSplits {
  SplitIndices indices;
  ObservationalDataset train;
  ObservationalDataset validation;
  ObservationalDataset test;
};

inline DatasetSplits split(const ObservationalDataset& d, const SplitSpec& spec) {
  DatasetSplits s;
  s.indices = split_indices(d.t, spec);
  s.train = d.subset(s.indices.train);
  s.validation = d.subset(s.indices.validation);
  s.test = d.subset(s.indices.test);
  return s;
}

// ---------------------------------------------------------------------------
// Standardization of covariates and continuous outcomes from training data.

struct Standardizer {
  std::vector<double> x_mean;
  std::vector<double> x_scale;
  double y_mean = 0.0;
  double y_scale = 1.0;

  // Non-binary covariate columns are centered and scaled; binary columns are
  // left as is. Outcomes are standardized only if `outcomes` is set.
  static Standardizer fit(const ObservationalDataset& train, bool outcomes) {
    Standardizer s;
    const Index p = train.dim();
    s.x_mean.assign(static_cast<std::size_t>(p), 0.0);
    s.x_scale.assign(static_cast<std::size_t>(p), 1.0);
    for (Index j = 0; j < p; ++j) {
      const auto col = train.x.col(j);
      const bool binary = (col.array() == 0.0 || col.array() == 1.0).all();
      if (binary) continue;
      const double mean = col.mean();
      const double var = (col.array() - mean).square().mean();
      s.x_mean[static_cast<std::size_t>(j)] = mean;
      s.x_scale[static_cast<std::size_t>(j)] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    if (outcomes) {
      const double n = static_cast<double>(train.yf.size());
      const double mean = std::accumulate(train.yf.begin(), train.yf.end(), 0.0) / n;
      double var = 0.0;
      for (double y : train.yf) var += (y - mean) * (y - mean);
      var /= n;
      s.y_mean = mean;
      s.y_scale = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  Tensor transform_x(const Tensor& x) const {
    if (static_cast<std::size_t>(x.cols()) != x_mean.size()) {
      throw ShapeError("Standardizer: expected " + std::to_string(x_mean.size()) +
                       " columns, got " + shape_string(x));
    }
    Tensor out = x;
    for (Index j = 0; j < x.cols(); ++j) {
      out.col(j) = (out.col(j).array() - x_mean[static_cast<std::size_t>(j)]) /
                   x_scale[static_cast<std::size_t>(j)];
    }
    return out;
  }

  double transform_y(double y) const { return (y - y_mean) / y_scale; }
  double inverse_y(double y) const { return y * y_scale + y_mean; }
};

// ---------------------------------------------------------------------------
// Twins selection-bias simulation.

struct TwinsSimConfig {
  static constexpr int kCovariates = 30;
  double w_low = -0.1;
  double w_high = 0.1;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
  std::optional<std::vector<double>> fixed_w;  // overrides the uniform draw

  void validate() const {
    if (!(w_low < w_high)) throw std::invalid_argument("TwinsSimConfig: w_low must be < w_high");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("TwinsSimConfig: noise_std must be >= 0");
    if (fixed_w && fixed_w->size() != kCovariates) {
      throw std::invalid_argument("TwinsSimConfig: fixed_w must have 30 entries");
    }
  }
};

struct TwinsAssignment {
  std::vector<int> t;  // 1: the heavier twin is observed
  std::vector<double> propensity;
  std::vector<double> w;
};

// t_i ~ Bernoulli(sigmoid(w'x_i + n_i)), w ~ U(w_low, w_high)^30, n_i ~ N(0, noise_std^2).
inline TwinsAssignment simulate_twins_assignment(const Tensor& x, const TwinsSimConfig& cfg) {
  cfg.validate();
  if (x.cols() != TwinsSimConfig::kCovariates) {
    throw ShapeError("simulate_twins_assignment: expected 30 covariates, got " + shape_string(x));
  }
  Rng rng(mix_seed(cfg.seed, 31));
  TwinsAssignment a;
  if (cfg.fixed_w) {
    a.w = *cfg.fixed_w;
  } else {
    std::uniform_real_distribution<double> uw(cfg.w_low, cfg.w_high);
    for (int j = 0; j < TwinsSimConfig::kCovariates; ++j) a.w.push_back(uw(rng));
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const Index n = x.rows();
  a.t.resize(static_cast<std::size_t>(n));
  a.propensity.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < TwinsSimConfig::kCovariates; ++j) s += a.w[static_cast<std::size_t>(j)] * x(i, j);
    const double logit = s + cfg.noise_std * noise(rng);
    const double prob = 1.0 / (1.0 + std::exp(-logit));
    a.propensity[static_cast<std::size_t>(i)] = prob;
    a.t[static_cast<std::size_t>(i)] = coin(rng) < prob ? 1 : 0;
  }
  return a;
}

// Twins source table: x0..x29 plus the outcomes of the lighter (y0) and the
// heavier (y1) twin.
struct TwinsSource {
  Tensor x;
  std::vector<double> y0;
  std::vector<double> y1;
};

inline TwinsSource load_twins_source(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": missing header row");
  const auto header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (int j = 0; j < TwinsSimConfig::kCovariates; ++j) {
    if (!col.count("x" + std::to_string(j))) {
      throw DataError(path.string() + ": missing mandatory column x" + std::to_string(j));
    }
  }
  for (const char* c : {"y0", "y1"}) {
    if (!col.count(c)) throw DataError(path.string() + ": missing mandatory column " + c);
  }
  TwinsSource src;
  std::vector<std::vector<double>> rows;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError(path.string() + ": row " + std::to_string(row) + " has wrong cell count");
    }
    std::vector<double> xr;
    for (int j = 0; j < TwinsSimConfig::kCovariates; ++j) {
      const std::string c = "x" + std::to_string(j);
      xr.push_back(detail::parse_cell(cells[col[c]], row, c));
    }
    rows.push_back(std::move(xr));
    src.y0.push_back(detail::parse_cell(cells[col["y0"]], row, "y0"));
    src.y1.push_back(detail::parse_cell(cells[col["y1"]], row, "y1"));
  }
  src.x.resize(static_cast<Index>(rows.size()), TwinsSimConfig::kCovariates);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int j = 0; j < TwinsSimConfig::kCovariates; ++j) {
      src.x(static_cast<Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
    }
  }
  return src;
}

// Observes one twin per pair and hides the other.
inline ObservationalDataset simulate_twins(const TwinsSource& src, const TwinsSimConfig& cfg,
                                           TwinsAssignment* assignment = nullptr) {
  TwinsAssignment a = simulate_twins_assignment(src.x, cfg);
  ObservationalDataset d;
  d.name = "twins";
  d.x = src.x;
  d.t = a.t;
  std::vector<double> ycf;
  for (std::size_t i = 0; i < a.t.size(); ++i) {
    d.yf.push_back(a.t[i] == 1 ? src.y1[i] : src.y0[i]);
    ycf.push_back(a.t[i] == 1 ? src.y0[i] : src.y1[i]);
  }
  d.ycf = std::move(ycf);
  if (assignment) *assignment = std::move(a);
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// Synthetic data with known effects.

struct SyntheticConfig {
  int n = 1000;
  int p = 10;
  double bias = 1.0;        // scale of the propensity logit
  double tau_const = 2.0;   // tau(x) = tau_const + tau_slope * x0
  double tau_slope = 0.0;
  double noise_std = 1.0;
  double confounding = 0.5;  // share of the propensity direction along the outcome direction
  std::uint64_t seed = 0;

  void validate() const {
    if (!(confounding >= 0.0 && confounding <= 1.0)) {
      throw std::invalid_argument("make_synthetic: confounding must be in [0, 1]");
    }
    if (n < 20) throw std::invalid_argument("make_synthetic: n must be >= 20");
    if (p < 1) throw std::invalid_argument("make_synthetic: p must be >= 1");
    if (!(bias >= 0.0)) throw std::invalid_argument("make_synthetic: bias must be >= 0");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("make_synthetic: noise_std must be >= 0");
  }
};

// x ~ N(0, I); y0 = c'x + noise; y1 = y0 + tau(x). Treatment follows
// Bernoulli(sigmoid(bias * d'x)) for a unit direction d mixing the outcome
// direction c with a random direction orthogonal to it.
inline ObservationalDataset make_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 41));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<double> coef(static_cast<std::size_t>(cfg.p));
  for (double& c : coef) c = normal(rng);
  std::vector<double> other(static_cast<std::size_t>(cfg.p));
  for (double& w : other) w = normal(rng);
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  };
  const double coef_norm = std::sqrt(dot(coef, coef));
  const double along = dot(other, coef) / dot(coef, coef);
  for (std::size_t j = 0; j < other.size(); ++j) other[j] -= along * coef[j];
  const double other_norm = std::sqrt(dot(other, other));
  // Unit propensity direction: `confounding` of it along the outcome
  // direction, the rest along a random orthogonal direction.
  std::vector<double> dir(static_cast<std::size_t>(cfg.p));
  const double rho = other_norm > 1e-12 ? cfg.confounding : 1.0;
  for (std::size_t j = 0; j < dir.size(); ++j) {
    dir[j] = rho * coef[j] / coef_norm;
    if (rho < 1.0) dir[j] += std::sqrt(1.0 - rho * rho) * other[j] / other_norm;
  }

  ObservationalDataset d;
  d.name = "synthetic";
  d.x.resize(cfg.n, cfg.p);
  std::vector<double> ycf, mu0, mu1;
  for (int i = 0; i < cfg.n; ++i) {
    double s = 0.0, logit = 0.0;
    for (int j = 0; j < cfg.p; ++j) {
      const double v = normal(rng);
      d.x(i, j) = v;
      s += coef[static_cast<std::size_t>(j)] * v;
      logit += dir[static_cast<std::size_t>(j)] * v;
    }
    const double prob = 1.0 / (1.0 + std::exp(-cfg.bias * logit));
    const int t = coin(rng) < prob ? 1 : 0;
    const double m0 = s;
    const double m1 = s + cfg.tau_const + cfg.tau_slope * d.x(i, 0);
    const double e_f = cfg.noise_std * normal(rng);
    const double e_cf = cfg.noise_std * normal(rng);
    d.t.push_back(t);
    d.yf.push_back((t == 1 ? m1 : m0) + e_f);
    ycf.push_back((t == 1 ? m0 : m1) + e_cf);
    mu0.push_back(m0);
    mu1.push_back(m1);
  }
  d.ycf = std::move(ycf);
  d.mu0 = std::move(mu0);
  d.mu1 = std::move(mu1);
  d.validate();
  return d;
}

}  // namespace cbre
