// Treatment-effect metrics and replication aggregation.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace cbre::metrics {

namespace detail {

inline void check_lengths(std::size_t n, std::initializer_list<std::size_t> others,
                          const char* what) {
  if (n == 0) throw std::invalid_argument(std::string(what) + ": empty input");
  for (std::size_t m : others) {
    if (m != n) throw std::invalid_argument(std::string(what) + ": length mismatch");
  }
}

}  // namespace detail

// Root mean squared error between true and predicted per-unit effects.
inline double pehe(std::span<const double> y1, std::span<const double> y0,
                   std::span<const double> y1_hat, std::span<const double> y0_hat) {
  detail::check_lengths(y1.size(), {y0.size(), y1_hat.size(), y0_hat.size()}, "pehe");
  double s = 0.0;
  for (std::size_t i = 0; i < y1.size(); ++i) {
    const double d = (y1[i] - y0[i]) - (y1_hat[i] - y0_hat[i]);
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(y1.size()));
}

inline double ate_error(std::span<const double> y1, std::span<const double> y0,
                        std::span<const double> y1_hat, std::span<const double> y0_hat) {
  detail::check_lengths(y1.size(), {y0.size(), y1_hat.size(), y0_hat.size()}, "ate_error");
  double truth = 0.0, est = 0.0;
  for (std::size_t i = 0; i < y1.size(); ++i) {
    truth += y1[i] - y0[i];
    est += y1_hat[i] - y0_hat[i];
  }
  return std::abs(truth - est) / static_cast<double>(y1.size());
}

// Policy risk of treating exactly the units with positive predicted effect.
// Only units with mask = 1 are evaluated; an empty mask means all units.
inline double policy_risk(std::span<const double> yf, std::span<const int> t,
                          std::span<const double> ite_hat, std::span<const int> mask = {}) {
  detail::check_lengths(yf.size(), {t.size(), ite_hat.size()}, "policy_risk");
  if (!mask.empty() && mask.size() != yf.size()) {
    throw std::invalid_argument("policy_risk: length mismatch");
  }
  double units = 0.0, treat_policy = 0.0;
  double sum_treated = 0.0, count_treated = 0.0;
  double sum_control = 0.0, count_control = 0.0;
  for (std::size_t i = 0; i < yf.size(); ++i) {
    if (!mask.empty() && mask[i] != 1) continue;
    units += 1.0;
    const bool pi = ite_hat[i] > 0.0;
    if (pi) treat_policy += 1.0;
    if (pi && t[i] == 1) {
      sum_treated += yf[i];
      count_treated += 1.0;
    } else if (!pi && t[i] == 0) {
      sum_control += yf[i];
      count_control += 1.0;
    }
  }
  if (units == 0.0) throw std::invalid_argument("policy_risk: no units with e=1");
  const double p_treat = treat_policy / units;
  const double mean_treated = count_treated > 0.0 ? sum_treated / count_treated : 0.0;
  const double mean_control = count_control > 0.0 ? sum_control / count_control : 0.0;
  return 1.0 - (mean_treated * p_treat + mean_control * (1.0 - p_treat));
}

// Area under the ROC curve via the rank-sum statistic; ties count one half.
inline double auc(std::span<const int> labels, std::span<const double> scores) {
  detail::check_lengths(labels.size(), {scores.size()}, "auc");
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double positives = 0.0, negatives = 0.0, rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      const int label = labels[order[k]];
      if (label != 0 && label != 1) throw std::invalid_argument("auc: labels must be binary");
      if (label == 1) {
        positives += 1.0;
        rank_sum += mid_rank;
      } else {
        negatives += 1.0;
      }
    }
    i = j;
  }
  if (positives == 0.0 || negatives == 0.0) {
    throw std::invalid_argument("auc: labels must contain both classes");
  }
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

// ---------------------------------------------------------------------------
// Reports.

enum class Regime { in_sample, out_sample };

inline const char* regime_name(Regime r) {
  return r == Regime::in_sample ? "in_sample" : "out_sample";
}

struct Summary {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t count = 0;
};

// Mean and standard error of the mean (sample standard deviation / sqrt(k)).
inline Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    s.stderr_ = sd / std::sqrt(static_cast<double>(values.size()));
  }
  return s;
}

// Metric name -> value for one replication and regime.
using MetricRow = std::map<std::string, double>;

struct ReplicationResult {
  int replication = 0;
  std::map<std::string, MetricRow> regimes;  // keyed by regime_name
  nlohmann::json extra = nlohmann::json::object();
};

struct EvaluationReport {
  std::string name;
  std::vector<ReplicationResult> replications;

  // regime -> metric -> summary over replications that report it.
  std::map<std::string, std::map<std::string, Summary>> aggregate() const {
    std::map<std::string, std::map<std::string, std::vector<double>>> values;
    for (const auto& rep : replications) {
      for (const auto& [regime, row] : rep.regimes) {
        for (const auto& [metric, v] : row) values[regime][metric].push_back(v);
      }
    }
    std::map<std::string, std::map<std::string, Summary>> out;
    for (const auto& [regime, metrics] : values) {
      for (const auto& [metric, vs] : metrics) out[regime][metric] = summarize(vs);
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["replications"] = nlohmann::json::array();
    for (const auto& rep : replications) {
      nlohmann::json r;
      r["replication"] = rep.replication;
      for (const auto& [regime, row] : rep.regimes) {
        for (const auto& [metric, v] : row) r[regime][metric] = v;
      }
      if (!rep.extra.empty()) r["extra"] = rep.extra;
      j["replications"].push_back(std::move(r));
    }
    nlohmann::json agg = nlohmann::json::object();
    for (const auto& [regime, metrics] : aggregate()) {
      for (const auto& [metric, s] : metrics) {
        agg[regime][metric] = {{"mean", s.mean}, {"stderr", s.stderr_}, {"count", s.count}};
      }
    }
    j["aggregate"] = std::move(agg);
    return j;
  }
};

}  // namespace cbre::metrics
