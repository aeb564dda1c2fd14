// Alternating optimization of the critic, the autoencoder pair and the
// outcome predictor, with stratified minibatches and early stopping.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cbre/autodiff.hpp"
#include "cbre/model.hpp"
#include "cbre/random.hpp"

namespace cbre {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  int batch_size = 80;
  double learning_rate = 1e-3;
  int max_iterations = 3000;
  int patience = 20;  // evaluations without improvement; 0 disables early stopping
  int eval_every = 50;
  std::uint64_t seed = 1;
  AdamConfig adam;

  void validate() const {
    if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch_size must be >= 2");
    if (!(learning_rate >= 0.0)) {
      throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
    }
    if (max_iterations < 0) throw std::invalid_argument("TrainConfig: max_iterations must be >= 0");
    if (patience < 0) throw std::invalid_argument("TrainConfig: patience must be >= 0");
    if (eval_every < 1) throw std::invalid_argument("TrainConfig: eval_every must be >= 1");
  }
};

// ---------------------------------------------------------------------------

struct SampleWeights {
  double treated_fraction = 0.0;  // u
  double treated_weight = 0.0;    // 1 / (2u)
  double control_weight = 0.0;    // 1 / (2(1 - u))
  std::vector<double> weights;

  // Weight for a unit with treatment t under these group weights.
  double weight(int t) const { return t == 1 ? treated_weight : control_weight; }

  Tensor column(std::span<const int> t) const {
    Tensor out(static_cast<Index>(t.size()), 1);
    for (std::size_t i = 0; i < t.size(); ++i) out(static_cast<Index>(i), 0) = weight(t[i]);
    return out;
  }
};

inline SampleWeights compute_weights(std::span<const int> t) {
  check_binary(t, "compute_weights");
  if (t.empty()) throw std::invalid_argument("degenerate treatment assignment violates overlap");
  std::size_t treated = 0;
  for (int v : t) treated += static_cast<std::size_t>(v);
  if (treated == 0 || treated == t.size()) {
    throw std::invalid_argument("degenerate treatment assignment violates overlap");
  }
  SampleWeights w;
  const double u = static_cast<double>(treated) / static_cast<double>(t.size());
  w.treated_fraction = u;
  w.treated_weight = 1.0 / (2.0 * u);
  w.control_weight = 1.0 / (2.0 * (1.0 - u));
  w.weights.reserve(t.size());
  for (int v : t) w.weights.push_back(w.weight(v));
  return w;
}

// ---------------------------------------------------------------------------

class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(std::span<Tensor* const> params) {
    for (const Tensor* p : params) {
      m_.push_back(Tensor::Zero(p->rows(), p->cols()));
      v_.push_back(Tensor::Zero(p->rows(), p->cols()));
    }
  }

  long steps() const { return steps_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

  // Bias-corrected Adam update applied in place. `stage` names the loss in
  // error messages.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads, double lr,
            const AdamConfig& cfg, std::string_view stage) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
      throw std::invalid_argument("adam_step: parameter count mismatch for " +
                                  std::string(stage));
    }
    for (std::size_t k = 0; k < grads.size(); ++k) {
      if (grads[k].rows() != m_[k].rows() || grads[k].cols() != m_[k].cols() ||
          params[k]->rows() != m_[k].rows() || params[k]->cols() != m_[k].cols()) {
        throw ShapeError("adam_step: gradient " + shape_string(grads[k]) +
                         " does not match parameter " + shape_string(*params[k]));
      }
      if (!grads[k].allFinite()) {
        throw std::runtime_error("adam_step: non-finite gradient from loss term " +
                                 std::string(stage));
      }
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < grads.size(); ++k) {
      auto m = m_[k].array();
      auto v = v_[k].array();
      const auto g = grads[k].array();
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
      params[k]->array() -= lr * (m / c1) / ((v / c2).sqrt() + cfg.epsilon);
    }
  }

 private:
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  long steps_ = 0;
};

inline void adam_step(AdamState& state, std::span<Tensor* const> params,
                      std::span<const Tensor> grads, double lr, const AdamConfig& cfg = {},
                      std::string_view stage = "loss") {
  state.step(params, grads, lr, cfg, stage);
}

// Gradients of `loss` with respect to the bound parameter tensors. Parameters
// that never appeared on the tape get zero gradients.
inline std::vector<Tensor> parameter_grads(ad::Tape& tape, const ad::Var& loss,
                                           std::span<Tensor* const> params) {
  std::vector<ad::Var> wrt;
  std::vector<std::size_t> slot;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (auto v = tape.find_parameter(*params[k])) {
      wrt.push_back(*v);
      slot.push_back(k);
    }
  }
  std::vector<Tensor> out(params.size());
  auto grads = tape.grad(loss, wrt, /*create_graph=*/false);
  std::unordered_map<std::size_t, std::size_t> released;  // node id -> first slot
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (auto it = released.find(grads[i].id()); it != released.end()) {
      out[slot[i]] = out[it->second];
    } else {
      out[slot[i]] = tape.release(grads[i]);
      released.emplace(grads[i].id(), slot[i]);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (out[k].size() == 0) out[k] = Tensor::Zero(params[k]->rows(), params[k]->cols());
  }
  return out;
}

// One Adam state per update stage, each over that stage's parameter set.
struct Optimizers {
  AdamState critic;
  AdamState reconstruction;
  AdamState cycle;
  AdamState prediction;

  static Optimizers for_model(CbreModel& model) {
    Optimizers o;
    o.critic = AdamState(model.critic_params());
    o.reconstruction = AdamState(model.autoencoder_params());
    o.cycle = AdamState(model.autoencoder_params());
    o.prediction = AdamState(model.predictor_params());
    return o;
  }
};

// ---------------------------------------------------------------------------

// One iteration: (1) critic on L_D, (2) encoder+decoders on L_rec,
// (3) encoder+decoders on L_cyc, (4) encoder+heads on L_p with the adversarial
// and l2 terms. Returns losses measured before the parameters moved.
inline LossBreakdown train_step(CbreModel& model, const Batch& batch, Optimizers& opt,
                                const TrainConfig& tc, Rng& rng) {
  const CbreConfig& c = model.config;
  const GroupRows rows = group_rows(batch.t);
  if (rows.treated.empty() || rows.control.empty()) {
    throw std::invalid_argument("train_step: batch must contain both treatment groups");
  }
  const double lr = tc.learning_rate;
  const int noise_dim = c.effective_noise_dim();
  LossBreakdown out;

  // (1) critic
  {
    ad::Tape tape;
    Tensor z;
    {
      ad::Tape::NoGradGuard guard(tape);
      z = encode(tape, model, tape.constant(batch.x), Mode::train, rng).value();
    }
    ad::Var zv = tape.constant(std::move(z));
    ad::Var z_t = ad::gather_rows(zv, rows.treated);
    ad::Var z_c = ad::gather_rows(zv, rows.control);
    CriticNoise noise = sample_critic_noise(z_t.rows(), z_c.rows(), noise_dim, rng);
    CriticLoss loss = loss_discriminator(tape, model, z_t, z_c, noise, c.delta, Mode::train, rng);
    out.l_d = loss.loss.item();
    out.wasserstein_gap = loss.gap.item();
    auto params = model.critic_params();
    auto grads = parameter_grads(tape, loss.loss, params);
    opt.critic.step(params, grads, lr, tc.adam, "l_d");
  }

  out.l_reg = weight_penalty_value(regularized_networks(model), c.l2_squared);

  // (2) reconstruction
  {
    ad::Tape tape;
    EncodedBatch enc = encode_groups(tape, model, batch.x, batch.t, Mode::train, rng);
    ad::Var rec = loss_rec(tape, model, enc, Mode::train, rng);
    out.l_rec = rec.item();
    if (c.beta > 0.0) {
      std::vector<nn::Mlp*> decoders{&model.decoder_t, &model.decoder_c};
      ad::Var loss = ad::add(ad::scalar_mul(rec, c.beta),
                             ad::scalar_mul(weight_penalty(tape, decoders, c.l2_squared), c.lambda));
      auto params = model.autoencoder_params();
      auto grads = parameter_grads(tape, loss, params);
      opt.reconstruction.step(params, grads, lr, tc.adam, "l_rec");
    }
  }

  // (3) cycle; measured without an update when gamma is zero
  {
    ad::Tape tape;
    ad::Tape::RecordingGuard recording(tape, c.gamma > 0.0);
    EncodedBatch enc = encode_groups(tape, model, batch.x, batch.t, Mode::train, rng);
    ad::Var cyc = loss_cyc(tape, model, enc, Mode::train, rng);
    out.l_cyc = cyc.item();
    if (c.gamma > 0.0) {
      auto params = model.autoencoder_params();
      auto grads = parameter_grads(tape, ad::scalar_mul(cyc, c.gamma), params);
      opt.cycle.step(params, grads, lr, tc.adam, "l_cyc");
    }
  }

  // (4) prediction with the encoder-side adversarial term
  {
    ad::Tape tape;
    EncodedBatch enc = encode_groups(tape, model, batch.x, batch.t, Mode::train, rng);
    ad::Var loss = loss_factual(tape, model, enc.z, batch.t, batch.y, batch.weights,
                                Mode::train, rng);
    out.l_p = loss.item();
    if (c.alpha > 0.0) {
      Tensor v_t = standard_normal(enc.n_t(), noise_dim, rng);
      Tensor v_c = standard_normal(enc.n_c(), noise_dim, rng);
      ad::Var gap = adversarial_gap(tape, model, enc.z_t, enc.z_c, v_t, v_c, Mode::train, rng);
      loss = ad::add(loss, ad::scalar_mul(gap, c.alpha));
    }
    if (c.lambda > 0.0) {
      std::vector<nn::Mlp*> nets{&model.encoder, &model.head_t};
      if (model.two_heads()) nets.push_back(&model.head_c);
      loss = ad::add(loss, ad::scalar_mul(weight_penalty(tape, nets, c.l2_squared), c.lambda));
    }
    auto params = model.predictor_params();
    auto grads = parameter_grads(tape, loss, params);
    opt.prediction.step(params, grads, lr, tc.adam, "l_p");
  }

  out.total = compose_total(out, c);
  return out;
}

// ---------------------------------------------------------------------------

// Minibatches that keep the global treated fraction, with at least one unit
// of each group. Each group is reshuffled whenever it is exhausted.
class StratifiedSampler {
 public:
  StratifiedSampler(std::span<const int> t, int batch_size, std::uint64_t seed)
      : rng_(seed) {
    GroupRows g = group_rows(t);
    treated_ = std::move(g.treated);
    control_ = std::move(g.control);
    if (treated_.empty() || control_.empty()) {
      throw std::invalid_argument("degenerate treatment assignment violates overlap");
    }
    const Index n = static_cast<Index>(t.size());
    const Index b = std::min<Index>(batch_size, n);
    if (b < 2) throw std::invalid_argument("StratifiedSampler: batch size must be >= 2");
    const double u = static_cast<double>(treated_.size()) / static_cast<double>(n);
    per_treated_ = std::clamp<Index>(static_cast<Index>(std::llround(u * b)), 1, b - 1);
    per_treated_ = std::min<Index>(per_treated_, static_cast<Index>(treated_.size()));
    per_control_ = std::min<Index>(b - per_treated_, static_cast<Index>(control_.size()));
    std::shuffle(treated_.begin(), treated_.end(), rng_);
    std::shuffle(control_.begin(), control_.end(), rng_);
  }

  Index treated_per_batch() const { return per_treated_; }
  Index control_per_batch() const { return per_control_; }

  std::vector<Index> next() {
    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(per_treated_ + per_control_));
    draw(treated_, pos_t_, per_treated_, out);
    draw(control_, pos_c_, per_control_, out);
    return out;
  }

 private:
  void draw(std::vector<Index>& pool, std::size_t& pos, Index count, std::vector<Index>& out) {
    for (Index k = 0; k < count; ++k) {
      if (pos == pool.size()) {
        std::shuffle(pool.begin(), pool.end(), rng_);
        pos = 0;
      }
      out.push_back(pool[pos++]);
    }
  }

  Rng rng_;
  std::vector<Index> treated_;
  std::vector<Index> control_;
  std::size_t pos_t_ = 0;
  std::size_t pos_c_ = 0;
  Index per_treated_ = 0;
  Index per_control_ = 0;
};

inline Batch take_rows(const Batch& all, std::span<const Index> idx) {
  Batch b;
  const Index n = static_cast<Index>(idx.size());
  b.x.resize(n, all.x.cols());
  b.y.resize(n, 1);
  b.weights.resize(n, 1);
  b.t.resize(idx.size());
  for (Index i = 0; i < n; ++i) {
    const Index r = idx[static_cast<std::size_t>(i)];
    b.x.row(i) = all.x.row(r);
    b.y(i, 0) = all.y(r, 0);
    b.weights(i, 0) = all.weights(r, 0);
    b.t[static_cast<std::size_t>(i)] = all.t[static_cast<std::size_t>(r)];
  }
  return b;
}

// ---------------------------------------------------------------------------

struct TrainLogEntry {
  int iteration = 0;
  LossBreakdown losses;
  double val_loss = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  // (iteration, validation factual loss); iteration 0 is the initial model.
  std::vector<std::pair<int, double>> validation;
  int best_iteration = 0;
  double best_val_loss = std::numeric_limits<double>::quiet_NaN();
  LossBreakdown initial;  // losses of the first iteration (before any update)

  void write_csv(std::ostream& os) const {
    os << "iteration,l_p,l_d,l_rec,l_cyc,l_reg,total,wasserstein_gap,val_loss\n";
    os.precision(17);
    for (const auto& e : entries) {
      const auto& b = e.losses;
      os << e.iteration << ',' << b.l_p << ',' << b.l_d << ',' << b.l_rec << ',' << b.l_cyc
         << ',' << b.l_reg << ',' << b.total << ',' << b.wasserstein_gap << ',';
      if (!std::isnan(e.val_loss)) os << e.val_loss;
      os << '\n';
    }
  }
};

// Weighted factual loss of the eval-mode model over a whole set.
inline double validation_loss(CbreModel& model, const Batch& data) {
  ad::Tape tape;
  ad::Tape::NoGradGuard guard(tape);
  Rng unused(0);
  ad::Var z = encode(tape, model, tape.constant(data.x), Mode::eval, unused);
  return loss_factual(tape, model, z, data.t, data.y, data.weights, Mode::eval, unused).item();
}

// Gap E_t f - E_c f of a freshly initialized critic trained to convergence on
// the eval-mode representations of `data`. The encoder is frozen, so two
// models can be compared with the same probe seed.
inline double probe_wasserstein_gap(CbreModel& model, const Batch& data, int iterations,
                                    int batch_size, double lr, std::uint64_t seed) {
  const CbreConfig& c = model.config;
  const int noise_dim = c.effective_noise_dim();
  const Tensor z = representations(model, data.x);
  nn::Mlp critic = nn::Mlp::init(model.critic.config(), mix_seed(seed, 61));
  CbreModel probe;
  probe.config = c;
  probe.critic = std::move(critic);
  StratifiedSampler sampler(data.t, batch_size, mix_seed(seed, 62));
  Rng rng(mix_seed(seed, 63));
  std::vector<Tensor*> params = probe.critic_params();
  AdamState adam(params);
  for (int it = 0; it < iterations; ++it) {
    const std::vector<Index> idx = sampler.next();
    ad::Tape tape;
    Tensor zb(static_cast<Index>(idx.size()), z.cols());
    std::vector<int> tb(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      zb.row(static_cast<Index>(i)) = z.row(idx[i]);
      tb[i] = data.t[static_cast<std::size_t>(idx[i])];
    }
    const GroupRows rows = group_rows(tb);
    ad::Var zv = tape.constant(std::move(zb));
    ad::Var z_t = ad::gather_rows(zv, rows.treated);
    ad::Var z_c = ad::gather_rows(zv, rows.control);
    CriticNoise noise = sample_critic_noise(z_t.rows(), z_c.rows(), noise_dim, rng);
    CriticLoss loss = loss_discriminator(tape, probe, z_t, z_c, noise, c.delta, Mode::train, rng);
    auto grads = parameter_grads(tape, loss.loss, params);
    adam.step(params, grads, lr, AdamConfig{}, "probe");
  }
  ad::Tape tape;
  ad::Tape::NoGradGuard guard(tape);
  const GroupRows rows = group_rows(data.t);
  ad::Var zv = tape.constant(z);
  ad::Var z_t = ad::gather_rows(zv, rows.treated);
  ad::Var z_c = ad::gather_rows(zv, rows.control);
  Tensor v_t = standard_normal(z_t.rows(), noise_dim, rng);
  Tensor v_c = standard_normal(z_c.rows(), noise_dim, rng);
  return adversarial_gap(tape, probe, z_t, z_c, v_t, v_c, Mode::eval, rng).item();
}

struct FitResult {
  CbreModel model;  // best-validation parameters
  TrainLog log;
};

// Trains until max_iterations or until the validation loss has not improved
// for `patience` consecutive evaluations, and returns the best checkpoint.
inline FitResult fit(CbreModel model, const Batch& train, const Batch& validation,
                     const TrainConfig& tc) {
  tc.validate();
  FitResult result;
  TrainLog& log = result.log;
  double best = validation.size() > 0 ? validation_loss(model, validation)
                                      : std::numeric_limits<double>::infinity();
  log.validation.emplace_back(0, best);
  log.best_iteration = 0;
  log.best_val_loss = best;
  CbreModel best_model = model;
  if (tc.max_iterations == 0) {
    result.model = std::move(model);
    return result;
  }

  StratifiedSampler sampler(train.t, tc.batch_size, mix_seed(tc.seed, 11));
  Rng rng(mix_seed(tc.seed, 12));
  Optimizers opt = Optimizers::for_model(model);
  int stale = 0;
  for (int it = 1; it <= tc.max_iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<Index> idx = sampler.next();
    Batch batch = take_rows(train, idx);
    TrainLogEntry entry;
    entry.iteration = it;
    entry.losses = train_step(model, batch, opt, tc, rng);
    if (it == 1) log.initial = entry.losses;
    const bool evaluate = it % tc.eval_every == 0 || it == tc.max_iterations;
    bool stop = false;
    if (evaluate && validation.size() > 0) {
      const double v = validation_loss(model, validation);
      entry.val_loss = v;
      log.validation.emplace_back(it, v);
      if (v < best) {
        best = v;
        best_model = model;
        log.best_iteration = it;
        log.best_val_loss = v;
        stale = 0;
      } else if (tc.patience > 0 && ++stale >= tc.patience) {
        stop = true;
      }
    }
    entry.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.entries.push_back(entry);
    if (stop) break;
  }
  result.model = validation.size() > 0 ? std::move(best_model) : std::move(model);
  return result;
}

}  // namespace cbre
