// Finite-difference checks of the training losses on small random models.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cbre/model.hpp"
#include "cbre/random.hpp"
#include "cbre/trainer.hpp"

namespace cbre::gradcheck {

// Builds the loss on a fresh tape. The Rng is reseeded identically for every
// evaluation, so dropout masks agree between the analytic and numeric passes.
using LossFn = std::function<ad::Var(ad::Tape&, Rng&)>;

// ||a - n|| / max(||a||, ||n||, floor) over the concatenated gradient. The
// floor keeps round-off in an all-zero gradient (dead units) from counting.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                             double floor = 1e-6) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

struct Comparison {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::size_t kinks = 0;  // coordinates skipped as non-differentiable
  double rel_error = 0.0;
};

// Central differences with step h over every entry of `params`. A coordinate
// where the central differences at h and h/2 disagree by more than
// `kink_tol` has a ReLU kink within +-h and is left out of the comparison;
// away from kinks the two agree to O(h^2).
inline Comparison compare(const LossFn& fn, const std::vector<Tensor*>& params,
                          std::uint64_t rng_seed, double h = 1e-5, double kink_tol = 1e-6) {
  auto value = [&] {
    ad::Tape tape;
    Rng rng(rng_seed);
    return fn(tape, rng).item();
  };
  std::vector<double> analytic;
  {
    ad::Tape tape;
    Rng rng(rng_seed);
    ad::Var loss = fn(tape, rng);
    for (const Tensor& g : parameter_grads(tape, loss, params)) {
      analytic.insert(analytic.end(), g.data(), g.data() + g.size());
    }
  }
  Comparison out;
  std::size_t flat = 0;
  for (Tensor* p : params) {
    for (Index k = 0; k < p->size(); ++k, ++flat) {
      double& entry = p->data()[k];
      const double saved = entry;
      auto central = [&](double step) {
        entry = saved + step;
        const double up = value();
        entry = saved - step;
        const double down = value();
        entry = saved;
        return (up - down) / (2.0 * step);
      };
      const double full = central(h);
      const double half = central(0.5 * h);
      if (std::abs(full - half) > kink_tol * std::max(1.0, std::abs(full))) {
        ++out.kinks;
        continue;
      }
      out.analytic.push_back(analytic[flat]);
      out.numeric.push_back(full);
    }
  }
  out.rel_error = relative_error(out.analytic, out.numeric);
  return out;
}

// A random small model with a batch that contains both groups.
struct RandomCase {
  CbreModel model;
  Batch batch;
  CriticNoise noise;
  std::uint64_t seed = 0;
};

struct CaseOptions {
  int max_dim = 8;
  int max_depth = 5;
  bool batchnorm = false;  // train-mode batchnorm over tiny groups is badly conditioned for h = 1e-5
  bool dropout = true;
};

inline RandomCase random_case(std::uint64_t seed, const CaseOptions& opt = {}) {
  Rng rng(seed);
  auto uniform_int = [&rng](int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };
  auto shape = [&] { return NetShape{uniform_int(1, opt.max_depth), uniform_int(1, opt.max_dim)}; };
  CbreConfig c;
  c.rep_dim = uniform_int(1, opt.max_dim);
  c.noise_dim = uniform_int(1, opt.max_dim);
  c.encoder = shape();
  c.critic = shape();
  c.decoder_t = shape();
  c.decoder_c = shape();
  c.predictor = shape();
  c.batchnorm = opt.batchnorm && uniform_int(0, 1) == 1;
  c.dropout_rate = opt.dropout && uniform_int(0, 1) == 1 ? 0.2 : 0.0;
  c.output = uniform_int(0, 3) == 0 ? OutputMode::binary : OutputMode::continuous;
  c.predictor_kind = uniform_int(0, 3) == 0 ? PredictorKind::single_head : PredictorKind::two_heads;
  const int p = uniform_int(1, opt.max_dim);
  const int n = uniform_int(4, 16);

  RandomCase rc;
  rc.seed = seed;
  rc.model = CbreModel::init(c, p, mix_seed(seed, 1));
  // Zero biases put units behind a dead layer exactly on the ReLU kink.
  for (nn::Mlp* net : rc.model.networks()) {
    for (auto& layer : net->layers()) layer.bias = 0.1 * standard_normal(1, layer.bias.cols(), rng);
  }
  rc.batch.x = standard_normal(n, p, rng);
  rc.batch.t.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) rc.batch.t[static_cast<std::size_t>(i)] = i % 2 == 0 ? 1 : uniform_int(0, 1);
  rc.batch.t[1] = 0;
  rc.batch.y = standard_normal(n, 1, rng);
  if (c.output == OutputMode::binary) {
    for (Index i = 0; i < n; ++i) rc.batch.y(i, 0) = rc.batch.y(i, 0) > 0.0 ? 1.0 : 0.0;
  }
  rc.batch.weights = compute_weights(rc.batch.t).column(rc.batch.t);
  const GroupRows g = group_rows(rc.batch.t);
  rc.noise = sample_critic_noise(static_cast<Index>(g.treated.size()),
                                 static_cast<Index>(g.control.size()), c.effective_noise_dim(), rng);
  return rc;
}

inline std::vector<Tensor*> concat_params(std::initializer_list<nn::Mlp*> nets) {
  std::vector<Tensor*> out;
  for (nn::Mlp* net : nets) {
    auto p = net->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

// Named losses of one random case together with the parameters they are
// differentiated against.
struct NamedLoss {
  std::string name;
  LossFn fn;
  std::vector<Tensor*> params;
};

inline std::vector<NamedLoss> training_losses(RandomCase& rc) {
  CbreModel& m = rc.model;
  const Batch& b = rc.batch;
  std::vector<Tensor*> heads = m.two_heads() ? concat_params({&m.encoder, &m.head_t, &m.head_c})
                                             : concat_params({&m.encoder, &m.head_t});
  std::vector<NamedLoss> out;
  out.push_back({"l_p",
                 [&m, &b](ad::Tape& tape, Rng& rng) {
                   ad::Var z = encode(tape, m, tape.constant(b.x), Mode::train, rng);
                   return loss_factual(tape, m, z, b.t, b.y, b.weights, Mode::train, rng);
                 },
                 heads});
  out.push_back({"l_rec",
                 [&m, &b](ad::Tape& tape, Rng& rng) {
                   return loss_rec(tape, m, encode_groups(tape, m, b.x, b.t, Mode::train, rng),
                                   Mode::train, rng);
                 },
                 concat_params({&m.encoder, &m.decoder_t, &m.decoder_c})});
  out.push_back({"l_cyc",
                 [&m, &b](ad::Tape& tape, Rng& rng) {
                   return loss_cyc(tape, m, encode_groups(tape, m, b.x, b.t, Mode::train, rng),
                                   Mode::train, rng);
                 },
                 concat_params({&m.encoder, &m.decoder_t, &m.decoder_c})});
  out.push_back({"l_d",
                 [&m, &b, &rc](ad::Tape& tape, Rng& rng) {
                   EncodedBatch e = encode_groups(tape, m, b.x, b.t, Mode::train, rng);
                   return loss_discriminator(tape, m, e.z_t, e.z_c, rc.noise, m.config.delta,
                                             Mode::train, rng)
                       .loss;
                 },
                 concat_params({&m.critic})});
  out.push_back({"gap",
                 [&m, &b, &rc](ad::Tape& tape, Rng& rng) {
                   EncodedBatch e = encode_groups(tape, m, b.x, b.t, Mode::train, rng);
                   return adversarial_gap(tape, m, e.z_t, e.z_c, rc.noise.v_t, rc.noise.v_c,
                                          Mode::train, rng);
                 },
                 concat_params({&m.encoder, &m.critic})});
  return out;
}

// The gradient-penalty term alone, differentiated against the critic.
inline NamedLoss penalty_loss(RandomCase& rc) {
  CbreModel& m = rc.model;
  const Batch& b = rc.batch;
  return {"penalty",
          [&m, &b, &rc](ad::Tape& tape, Rng& rng) {
            EncodedBatch e = encode_groups(tape, m, b.x, b.t, Mode::train, rng);
            return gradient_penalty(tape, m, e.z_t, e.z_c, rc.noise.penalty, m.config.delta,
                                    Mode::train, rng);
          },
          concat_params({&m.critic})};
}

struct SuiteResult {
  int cases = 0;
  std::map<std::string, double> max_rel_error;  // per loss name
  std::size_t coordinates = 0;
  std::size_t kinks = 0;
  double seconds = 0.0;

  double worst() const {
    double w = 0.0;
    for (const auto& [name, e] : max_rel_error) w = std::max(w, e);
    return w;
  }
};

// Training losses over `cases` random models.
inline SuiteResult run_loss_suite(int cases, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SuiteResult r;
  r.cases = cases;
  for (int k = 0; k < cases; ++k) {
    RandomCase rc = random_case(mix_seed(seed, static_cast<std::uint64_t>(k)));
    for (const NamedLoss& l : training_losses(rc)) {
      const Comparison c = compare(l.fn, l.params, mix_seed(rc.seed, 7));
      r.max_rel_error[l.name] = std::max(r.max_rel_error[l.name], c.rel_error);
      r.coordinates += c.analytic.size() + c.kinks;
      r.kinks += c.kinks;
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// Double backprop through the gradient penalty over `cases` random models.
inline SuiteResult run_penalty_suite(int cases, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  SuiteResult r;
  r.cases = cases;
  for (int k = 0; k < cases; ++k) {
    RandomCase rc = random_case(mix_seed(seed, 1000 + static_cast<std::uint64_t>(k)));
    const NamedLoss l = penalty_loss(rc);
    const Comparison c = compare(l.fn, l.params, mix_seed(rc.seed, 7));
    r.max_rel_error[l.name] = std::max(r.max_rel_error[l.name], c.rel_error);
    r.coordinates += c.analytic.size() + c.kinks;
    r.kinks += c.kinks;
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

}  // namespace cbre::gradcheck
