// Cycle-balanced representation model: encoder, critic, two decoders and a
// two-headed outcome predictor, together with every training loss.
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbre/autodiff.hpp"
#include "cbre/nn.hpp"
#include "cbre/random.hpp"

namespace cbre {

using nn::Mode;

enum class OutputMode { continuous, binary };
enum class PredictorKind { two_heads, single_head };

struct NetShape {
  int depth = 1;
  int hidden = 1;
};

struct CbreConfig {
  double alpha = 0.5;    // adversarial balancing weight
  double beta = 1.0;     // reconstruction weight
  double gamma = 1.0;    // cycle weight
  double lambda = 1e-4;  // l2 weight
  double delta = 10.0;   // gradient-penalty weight
  int rep_dim = 200;
  int noise_dim = 0;  // 0 means "same as rep_dim"
  NetShape encoder{5, 200};
  NetShape critic{3, 200};
  NetShape decoder_t{5, 200};
  NetShape decoder_c{5, 200};
  NetShape predictor{3, 100};
  double dropout_rate = 0.0;
  bool batchnorm = false;  // never applied to the critic
  OutputMode output = OutputMode::continuous;
  PredictorKind predictor_kind = PredictorKind::two_heads;
  bool l2_squared = true;

  int effective_noise_dim() const { return noise_dim > 0 ? noise_dim : rep_dim; }

  void validate() const {
    for (double c : {alpha, beta, gamma, lambda, delta}) {
      if (!(c >= 0.0)) throw std::invalid_argument("CbreConfig: loss weights must be >= 0");
    }
    if (rep_dim < 1) throw std::invalid_argument("CbreConfig: rep_dim must be >= 1");
    if (noise_dim < 0) throw std::invalid_argument("CbreConfig: noise_dim must be >= 0");
    for (const NetShape* s : {&encoder, &critic, &decoder_t, &decoder_c, &predictor}) {
      if (s->depth < 1 || s->hidden < 1) {
        throw std::invalid_argument("CbreConfig: network depth and width must be >= 1");
      }
    }
  }
};

// Loss values measured for one batch.
struct LossBreakdown {
  double l_p = 0.0;
  double l_d = 0.0;  // critic loss including the gradient penalty
  double l_rec = 0.0;
  double l_cyc = 0.0;
  double l_reg = 0.0;
  double total = 0.0;
  double wasserstein_gap = 0.0;  // E_t f_D - E_c f_D, the encoder-side adversarial term
};

inline double compose_total(const LossBreakdown& b, const CbreConfig& c) {
  return b.l_p + c.alpha * b.wasserstein_gap + c.beta * b.l_rec + c.gamma * b.l_cyc +
         c.lambda * b.l_reg;
}

struct CbreModel {
  CbreConfig config;
  int input_dim = 0;
  nn::Mlp encoder;
  nn::Mlp critic;
  nn::Mlp decoder_t;
  nn::Mlp decoder_c;
  nn::Mlp head_t;  // t = 1, or the shared head in single-head mode
  nn::Mlp head_c;  // t = 0, unused in single-head mode

  static nn::MlpConfig net_config(int in, int out, NetShape shape, const CbreConfig& c,
                                  bool allow_batchnorm) {
    nn::MlpConfig m;
    m.input_dim = in;
    m.output_dim = out;
    m.hidden_dim = shape.hidden;
    m.depth = shape.depth;
    m.dropout_rate = c.dropout_rate;
    m.use_batchnorm = allow_batchnorm && c.batchnorm;
    return m;
  }

  static CbreModel init(const CbreConfig& config, int input_dim, std::uint64_t seed) {
    config.validate();
    if (input_dim < 1) throw std::invalid_argument("CbreModel: input_dim must be >= 1");
    CbreModel m;
    m.config = config;
    m.input_dim = input_dim;
    const int d = config.rep_dim;
    m.encoder = nn::Mlp::init(net_config(input_dim, d, config.encoder, config, true),
                              mix_seed(seed, 0));
    nn::MlpConfig critic_cfg =
        net_config(config.effective_noise_dim() + d, 1, config.critic, config, false);
    m.critic = nn::Mlp::init(critic_cfg, mix_seed(seed, 1));
    m.decoder_t = nn::Mlp::init(net_config(d, input_dim, config.decoder_t, config, true),
                                mix_seed(seed, 2));
    m.decoder_c = nn::Mlp::init(net_config(d, input_dim, config.decoder_c, config, true),
                                mix_seed(seed, 3));
    const int head_in = config.predictor_kind == PredictorKind::single_head ? d + 1 : d;
    nn::MlpConfig head_cfg = net_config(head_in, 1, config.predictor, config, true);
    if (config.output == OutputMode::binary) head_cfg.final_activation = nn::Activation::sigmoid;
    m.head_t = nn::Mlp::init(head_cfg, mix_seed(seed, 4));
    if (config.predictor_kind == PredictorKind::two_heads) {
      m.head_c = nn::Mlp::init(head_cfg, mix_seed(seed, 5));
    }
    return m;
  }

  bool two_heads() const { return config.predictor_kind == PredictorKind::two_heads; }

  std::vector<nn::Mlp*> networks() {
    std::vector<nn::Mlp*> out{&encoder, &critic, &decoder_t, &decoder_c, &head_t};
    if (two_heads()) out.push_back(&head_c);
    return out;
  }

  static void append(std::vector<Tensor*>& out, nn::Mlp& net) {
    auto p = net.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }

  std::vector<Tensor*> critic_params() {
    std::vector<Tensor*> out;
    append(out, critic);
    return out;
  }
  std::vector<Tensor*> autoencoder_params() {
    std::vector<Tensor*> out;
    append(out, encoder);
    append(out, decoder_t);
    append(out, decoder_c);
    return out;
  }
  std::vector<Tensor*> decoder_params() {
    std::vector<Tensor*> out;
    append(out, decoder_t);
    append(out, decoder_c);
    return out;
  }
  std::vector<Tensor*> predictor_params() {
    std::vector<Tensor*> out;
    append(out, encoder);
    append(out, head_t);
    if (two_heads()) append(out, head_c);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Batch bookkeeping.

inline void check_binary(std::span<const int> t, const char* who) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] != 0 && t[i] != 1) {
      throw std::invalid_argument(std::string(who) + ": treatment at row " +
                                  std::to_string(i) + " is " + std::to_string(t[i]) +
                                  ", expected 0 or 1");
    }
  }
}

struct GroupRows {
  std::vector<Index> treated;
  std::vector<Index> control;
};

inline GroupRows group_rows(std::span<const int> t) {
  check_binary(t, "group_rows");
  GroupRows g;
  for (std::size_t i = 0; i < t.size(); ++i) {
    (t[i] == 1 ? g.treated : g.control).push_back(static_cast<Index>(i));
  }
  return g;
}

// Covariates and representations of one batch split by treatment group.
// Vars for an empty group are left invalid.
struct EncodedBatch {
  GroupRows rows;
  ad::Var z;  // all rows, batch order
  ad::Var x_t, x_c, z_t, z_c;
  Index n_t() const { return static_cast<Index>(rows.treated.size()); }
  Index n_c() const { return static_cast<Index>(rows.control.size()); }
};

inline ad::Var encode(ad::Tape& tape, CbreModel& model, const ad::Var& x, Mode mode,
                      Rng& rng) {
  return model.encoder.forward(tape, x, mode, rng);
}

inline EncodedBatch split_groups(const ad::Var& x, const ad::Var& z, std::span<const int> t) {
  if (x.rows() != static_cast<Index>(t.size()) || z.rows() != x.rows()) {
    throw ShapeError("split_groups: " + std::to_string(t.size()) + " treatments for x " +
                     shape_string(x.value()) + " and z " + shape_string(z.value()));
  }
  EncodedBatch b;
  b.rows = group_rows(t);
  b.z = z;
  if (b.n_t() > 0) {
    b.x_t = ad::gather_rows(x, b.rows.treated);
    b.z_t = ad::gather_rows(z, b.rows.treated);
  }
  if (b.n_c() > 0) {
    b.x_c = ad::gather_rows(x, b.rows.control);
    b.z_c = ad::gather_rows(z, b.rows.control);
  }
  return b;
}

inline EncodedBatch encode_groups(ad::Tape& tape, CbreModel& model, const Tensor& x,
                                  std::span<const int> t, Mode mode, Rng& rng) {
  ad::Var xv = tape.constant(x);
  return split_groups(xv, encode(tape, model, xv, mode, rng), t);
}

// ---------------------------------------------------------------------------
// Critic.

// f_D applied to the column concatenation [v, z].
inline ad::Var discriminate(ad::Tape& tape, CbreModel& model, const ad::Var& z,
                            const ad::Var& v, Mode mode, Rng& rng) {
  if (z.rows() != v.rows()) {
    throw ShapeError("discriminate: batch-size mismatch between z " +
                     shape_string(z.value()) + " and v " + shape_string(v.value()));
  }
  return model.critic.forward(tape, ad::concat_cols(v, z), mode, rng);
}

// Interpolates between m = min(Nt, Nc) treated/control pairs. The smaller
// group is used in order; the larger one is subsampled without replacement.
struct PenaltyPlan {
  std::vector<Index> treated;
  std::vector<Index> control;
  Tensor eps;    // m x 1, uniform [0, 1]
  Tensor noise;  // m x noise_dim, standard normal
};

inline PenaltyPlan sample_penalty_plan(Index n_t, Index n_c, int noise_dim, Rng& rng) {
  if (n_t == 0 || n_c == 0) {
    throw std::invalid_argument("gradient penalty requires both groups in batch");
  }
  const Index m = std::min(n_t, n_c);
  auto pick = [&](Index n) {
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    if (n > m) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(m));
    }
    return idx;
  };
  PenaltyPlan plan;
  plan.treated = pick(n_t);
  plan.control = pick(n_c);
  plan.eps = uniform01(m, 1, rng);
  plan.noise = standard_normal(m, noise_dim, rng);
  return plan;
}

// Noise rows for one critic evaluation: separate draws per group and for the
// interpolates.
struct CriticNoise {
  Tensor v_t;
  Tensor v_c;
  PenaltyPlan penalty;
};

inline CriticNoise sample_critic_noise(Index n_t, Index n_c, int noise_dim, Rng& rng) {
  CriticNoise n;
  n.penalty = sample_penalty_plan(n_t, n_c, noise_dim, rng);
  n.v_t = standard_normal(n_t, noise_dim, rng);
  n.v_c = standard_normal(n_c, noise_dim, rng);
  return n;
}

// delta * mean_i (||grad_[v_i, zhat_i] f_D||_2 - 1)^2 over the interpolates.
// The input gradient is recorded on the tape, so the result can be
// differentiated with respect to the critic parameters.
inline ad::Var gradient_penalty(ad::Tape& tape, CbreModel& model, const ad::Var& z_t,
                                const ad::Var& z_c, const PenaltyPlan& plan, double delta,
                                Mode mode, Rng& rng) {
  if (!z_t.valid() || !z_c.valid() || z_t.rows() == 0 || z_c.rows() == 0) {
    throw std::invalid_argument("gradient penalty requires both groups in batch");
  }
  const Index m = static_cast<Index>(plan.treated.size());
  if (static_cast<Index>(plan.control.size()) != m || plan.eps.rows() != m ||
      plan.noise.rows() != m) {
    throw ShapeError("gradient_penalty: inconsistent interpolation plan");
  }
  const Index d = z_t.cols();
  ad::Var a = ad::gather_rows(z_t, plan.treated);
  ad::Var b = ad::gather_rows(z_c, plan.control);
  ad::Var eps = tape.constant(plan.eps);
  ad::Var one_minus = tape.constant((1.0 - plan.eps.array()).matrix());
  ad::Var zhat = ad::add(ad::mul_elem(a, ad::broadcast_cols(eps, d)),
                         ad::mul_elem(b, ad::broadcast_cols(one_minus, d)));
  ad::Var input = ad::concat_cols(tape.constant(plan.noise), zhat);
  // The penalty regularizes the critic only: differentiate with respect to a
  // detached copy of the interpolates, always recording so the input
  // gradient can itself be differentiated.
  ad::Tape::RecordingGuard recording(tape, true);
  ad::Var probe = tape.variable(input.value());
  ad::Var scores = model.critic.forward(tape, probe, mode, rng);
  ad::Var g = tape.grad(ad::sum(scores), {probe}, /*create_graph=*/true)[0];
  ad::Var ones = tape.constant(Tensor::Ones(m, 1));
  ad::Var dev = ad::sub(ad::row_l2_norm(g), ones);
  return ad::scalar_mul(ad::mean(ad::square(dev)), delta);
}

struct CriticLoss {
  ad::Var loss;     // E_c f_D - E_t f_D + penalty
  ad::Var gap;      // E_t f_D - E_c f_D
  ad::Var penalty;
};

inline CriticLoss loss_discriminator(ad::Tape& tape, CbreModel& model, const ad::Var& z_t,
                                     const ad::Var& z_c, const CriticNoise& noise,
                                     double delta, Mode mode, Rng& rng) {
  if (!z_t.valid() || !z_c.valid() || z_t.rows() == 0 || z_c.rows() == 0) {
    throw std::invalid_argument("gradient penalty requires both groups in batch");
  }
  ad::Var f_t = discriminate(tape, model, z_t, tape.constant(noise.v_t), mode, rng);
  ad::Var f_c = discriminate(tape, model, z_c, tape.constant(noise.v_c), mode, rng);
  CriticLoss out;
  out.gap = ad::sub(ad::mean(f_t), ad::mean(f_c));
  out.penalty = gradient_penalty(tape, model, z_t, z_c, noise.penalty, delta, mode, rng);
  out.loss = ad::add(ad::scalar_mul(out.gap, -1.0), out.penalty);
  return out;
}

// Encoder-side adversarial term E_t f_D - E_c f_D (no penalty).
inline ad::Var adversarial_gap(ad::Tape& tape, CbreModel& model, const ad::Var& z_t,
                               const ad::Var& z_c, const Tensor& v_t, const Tensor& v_c,
                               Mode mode, Rng& rng) {
  ad::Var f_t = discriminate(tape, model, z_t, tape.constant(v_t), mode, rng);
  ad::Var f_c = discriminate(tape, model, z_c, tape.constant(v_c), mode, rng);
  return ad::sub(ad::mean(f_t), ad::mean(f_c));
}

// ---------------------------------------------------------------------------
// Decoder losses.

namespace detail {

// (1/N) sum_i ||x_i - decoder(z_i)||^2, or an empty contribution.
inline std::optional<ad::Var> group_reconstruction(ad::Tape& tape, nn::Mlp& decoder,
                                                   const ad::Var& x, const ad::Var& z,
                                                   Mode mode, Rng& rng) {
  if (!x.valid() || x.rows() == 0) return std::nullopt;
  ad::Var rec = decoder.forward(tape, z, mode, rng);
  return ad::scalar_mul(ad::sum(ad::square(ad::sub(x, rec))),
                        1.0 / static_cast<double>(x.rows()));
}

inline ad::Var sum_terms(ad::Tape& tape, std::optional<ad::Var> a, std::optional<ad::Var> b,
                         const char* who) {
  if (a && b) return ad::add(*a, *b);
  if (a) return *a;
  if (b) return *b;
  (void)tape;
  throw std::invalid_argument(std::string(who) + ": both groups are empty");
}

}  // namespace detail

inline ad::Var loss_rec(ad::Tape& tape, CbreModel& model, const EncodedBatch& b, Mode mode,
                        Rng& rng) {
  auto t = detail::group_reconstruction(tape, model.decoder_t, b.x_t, b.z_t, mode, rng);
  auto c = detail::group_reconstruction(tape, model.decoder_c, b.x_c, b.z_c, mode, rng);
  return detail::sum_terms(tape, t, c, "loss_rec");
}

// Cross-decoder reconstruction: the control decoder reconstructs treated
// units and vice versa.
inline ad::Var loss_cyc(ad::Tape& tape, CbreModel& model, const EncodedBatch& b, Mode mode,
                        Rng& rng) {
  auto t = detail::group_reconstruction(tape, model.decoder_c, b.x_t, b.z_t, mode, rng);
  auto c = detail::group_reconstruction(tape, model.decoder_t, b.x_c, b.z_c, mode, rng);
  return detail::sum_terms(tape, t, c, "loss_cyc");
}

// ---------------------------------------------------------------------------
// Outcome prediction.

// h(z, t) for every row, in batch order, as an n x 1 column.
inline ad::Var predict_heads(ad::Tape& tape, CbreModel& model, const ad::Var& z,
                             std::span<const int> t, Mode mode, Rng& rng) {
  check_binary(t, "predict");
  const Index n = z.rows();
  if (static_cast<Index>(t.size()) != n) {
    throw ShapeError("predict: " + std::to_string(t.size()) + " treatments for z " +
                     shape_string(z.value()));
  }
  if (!model.two_heads()) {
    Tensor tcol(n, 1);
    for (Index i = 0; i < n; ++i) tcol(i, 0) = t[static_cast<std::size_t>(i)];
    return model.head_t.forward(tape, ad::concat_cols(z, tape.constant(std::move(tcol))),
                                mode, rng);
  }
  GroupRows g = group_rows(t);
  std::optional<ad::Var> out;
  if (!g.treated.empty()) {
    ad::Var p = model.head_t.forward(tape, ad::gather_rows(z, g.treated), mode, rng);
    out = ad::scatter_rows(p, g.treated, n);
  }
  if (!g.control.empty()) {
    ad::Var p = model.head_c.forward(tape, ad::gather_rows(z, g.control), mode, rng);
    ad::Var s = ad::scatter_rows(p, g.control, n);
    out = out ? ad::add(*out, s) : s;
  }
  if (!out) throw std::invalid_argument("predict: empty batch");
  return *out;
}

// (1/n) sum_i w_i (y_i - h(z_i, t_i))^2.
inline ad::Var loss_factual(ad::Tape& tape, CbreModel& model, const ad::Var& z,
                            std::span<const int> t, const Tensor& y, const Tensor& weights,
                            Mode mode, Rng& rng) {
  const Index n = z.rows();
  if (y.rows() != n || y.cols() != 1 || weights.rows() != n || weights.cols() != 1) {
    throw ShapeError("loss_factual: y " + shape_string(y) + " and weights " +
                     shape_string(weights) + " must be " + shape_string(n, 1));
  }
  ad::Var pred = predict_heads(tape, model, z, t, mode, rng);
  ad::Var err = ad::square(ad::sub(tape.constant(y), pred));
  return ad::mean(ad::mul_elem(tape.constant(weights), err));
}

// Regularizer over the weight matrices (not biases) of the given networks:
// sum of squared Frobenius norms, or the plain l2 norm of all of them.
inline ad::Var weight_penalty(ad::Tape& tape, std::span<nn::Mlp* const> nets, bool squared) {
  std::optional<ad::Var> acc;
  for (nn::Mlp* net : nets) {
    for (auto& layer : net->layers()) {
      ad::Var s = ad::sum(ad::square(tape.parameter(layer.weight)));
      acc = acc ? ad::add(*acc, s) : s;
    }
  }
  if (!acc) return tape.constant(Tensor::Zero(1, 1));
  return squared ? *acc : ad::sqrt_eps(*acc, ad::kNormEpsilon);
}

inline double weight_penalty_value(std::span<nn::Mlp* const> nets, bool squared) {
  double s = 0.0;
  for (nn::Mlp* net : nets) s += net->weight_sq_norm();
  return squared ? s : std::sqrt(s + ad::kNormEpsilon);
}

// Networks covered by the l2 term: everything except the critic.
inline std::vector<nn::Mlp*> regularized_networks(CbreModel& model) {
  std::vector<nn::Mlp*> out{&model.encoder, &model.decoder_t, &model.decoder_c,
                            &model.head_t};
  if (model.two_heads()) out.push_back(&model.head_c);
  return out;
}

// ---------------------------------------------------------------------------
// Total objective.

struct Batch {
  Tensor x;            // n x p
  std::vector<int> t;  // n
  Tensor y;            // n x 1
  Tensor weights;      // n x 1, sample weights from the full training set
  Index size() const { return x.rows(); }
};

struct TotalLoss {
  ad::Var total;
  LossBreakdown breakdown;
};

// L_p + alpha * (E_t f_D - E_c f_D) + beta * L_rec + gamma * L_cyc + lambda * l2.
// `l_d` (critic loss with penalty) is reported alongside but does not enter
// the total.
inline TotalLoss loss_total(ad::Tape& tape, CbreModel& model, const Batch& batch,
                            const CriticNoise& noise, Mode mode, Rng& rng) {
  const CbreConfig& c = model.config;
  EncodedBatch enc = encode_groups(tape, model, batch.x, batch.t, mode, rng);
  if (enc.n_t() == 0 || enc.n_c() == 0) {
    throw std::invalid_argument("loss_total: batch must contain both groups");
  }
  ad::Var lp = loss_factual(tape, model, enc.z, batch.t, batch.y, batch.weights, mode, rng);
  ad::Var rec = loss_rec(tape, model, enc, mode, rng);
  ad::Var cyc = loss_cyc(tape, model, enc, mode, rng);
  auto nets = regularized_networks(model);
  ad::Var reg = weight_penalty(tape, nets, c.l2_squared);
  CriticLoss critic = loss_discriminator(tape, model, enc.z_t, enc.z_c, noise, c.delta, mode, rng);

  ad::Var total = ad::add(
      ad::add(ad::add(lp, ad::scalar_mul(critic.gap, c.alpha)),
              ad::add(ad::scalar_mul(rec, c.beta), ad::scalar_mul(cyc, c.gamma))),
      ad::scalar_mul(reg, c.lambda));

  TotalLoss out;
  out.total = total;
  out.breakdown.l_p = lp.item();
  out.breakdown.l_d = critic.loss.item();
  out.breakdown.l_rec = rec.item();
  out.breakdown.l_cyc = cyc.item();
  out.breakdown.l_reg = reg.item();
  out.breakdown.wasserstein_gap = critic.gap.item();
  out.breakdown.total = total.item();
  return out;
}

// ---------------------------------------------------------------------------
// Inference.

struct PotentialOutcomes {
  std::vector<double> factual;
  std::vector<double> counterfactual;
  std::vector<double> treated;  // h(phi(x), 1)
  std::vector<double> control;  // h(phi(x), 0)
};

// Eval-mode predictions of both potential outcomes. Reads only parameters,
// covariates and treatments.
inline PotentialOutcomes predict_outcomes(CbreModel& model, const Tensor& x,
                                          std::span<const int> t) {
  check_binary(t, "predict_outcomes");
  if (static_cast<Index>(t.size()) != x.rows()) {
    throw ShapeError("predict_outcomes: " + std::to_string(t.size()) +
                     " treatments for x " + shape_string(x));
  }
  const Index n = x.rows();
  ad::Tape tape;
  ad::Tape::NoGradGuard guard(tape);
  Rng unused(0);
  ad::Var z = encode(tape, model, tape.constant(x), Mode::eval, unused);
  std::vector<int> ones(static_cast<std::size_t>(n), 1);
  std::vector<int> zeros(static_cast<std::size_t>(n), 0);
  const Tensor y1 = predict_heads(tape, model, z, ones, Mode::eval, unused).value();
  const Tensor y0 = predict_heads(tape, model, z, zeros, Mode::eval, unused).value();
  PotentialOutcomes out;
  out.treated.resize(static_cast<std::size_t>(n));
  out.control.resize(static_cast<std::size_t>(n));
  out.factual.resize(static_cast<std::size_t>(n));
  out.counterfactual.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    out.treated[k] = y1(i, 0);
    out.control[k] = y0(i, 0);
    out.factual[k] = t[k] == 1 ? y1(i, 0) : y0(i, 0);
    out.counterfactual[k] = t[k] == 1 ? y0(i, 0) : y1(i, 0);
  }
  return out;
}

// Eval-mode representations.
inline Tensor representations(CbreModel& model, const Tensor& x) {
  return model.encoder.predict(x);
}

}  // namespace cbre
