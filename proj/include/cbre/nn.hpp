// Fully connected ReLU networks recorded on an autodiff tape.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cbre/autodiff.hpp"
#include "cbre/random.hpp"

namespace cbre::nn {

enum class Activation { none, sigmoid };
enum class Mode { train, eval };

struct MlpConfig {
  int input_dim = 1;
  int hidden_dim = 1;
  int output_dim = 1;
  int depth = 1;  // number of weight layers
  double dropout_rate = 0.0;
  bool use_batchnorm = false;
  Activation final_activation = Activation::none;

  void validate() const {
    if (depth < 1) throw std::invalid_argument("MlpConfig: depth must be >= 1");
    if (input_dim < 1 || hidden_dim < 1 || output_dim < 1) {
      throw std::invalid_argument("MlpConfig: all dimensions must be >= 1");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw std::invalid_argument("MlpConfig: dropout_rate must be in [0, 1)");
    }
  }

  int layer_input(int layer) const { return layer == 0 ? input_dim : hidden_dim; }
  int layer_output(int layer) const {
    return layer == depth - 1 ? output_dim : hidden_dim;
  }
};

struct DenseLayer {
  Tensor weight;  // out x in
  Tensor bias;    // 1 x out
};

// Per-feature batch normalization applied after a hidden layer's ReLU.
struct BatchNorm {
  static constexpr double kEpsilon = 1e-5;
  static constexpr double kMomentum = 0.1;

  Tensor scale;  // 1 x width
  Tensor shift;
  Tensor running_mean;
  Tensor running_var;
};

class Mlp {
 public:
  Mlp() = default;

  // Weights ~ N(0, 2 / fan_in), biases zero.
  static Mlp init(const MlpConfig& config, std::uint64_t seed) {
    config.validate();
    Mlp net;
    net.config_ = config;
    Rng rng(seed);
    for (int l = 0; l < config.depth; ++l) {
      const int in = config.layer_input(l);
      const int out = config.layer_output(l);
      DenseLayer layer;
      layer.weight = standard_normal(out, in, rng) * std::sqrt(2.0 / in);
      layer.bias = Tensor::Zero(1, out);
      net.layers_.push_back(std::move(layer));
      if (config.use_batchnorm && l + 1 < config.depth) {
        net.norms_.push_back(BatchNorm{Tensor::Ones(1, out), Tensor::Zero(1, out),
                                       Tensor::Zero(1, out), Tensor::Ones(1, out)});
      }
    }
    return net;
  }

  const MlpConfig& config() const { return config_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<BatchNorm>& norms() { return norms_; }
  const std::vector<BatchNorm>& norms() const { return norms_; }

  // Layers: affine, then (except for the last) ReLU -> batchnorm -> dropout.
  // Train-mode batchnorm updates the running statistics.
  ad::Var forward(ad::Tape& tape, const ad::Var& x, Mode mode, Rng& rng) {
    if (x.cols() != config_.input_dim) {
      throw ShapeError("Mlp::forward: expected " +
                       std::to_string(config_.input_dim) + " input columns, got " +
                       shape_string(x.value()));
    }
    ad::Var h = x;
    const int depth = config_.depth;
    for (int l = 0; l < depth; ++l) {
      const DenseLayer& layer = layers_[static_cast<std::size_t>(l)];
      ad::Var w = tape.parameter(layer.weight);
      ad::Var b = tape.parameter(layer.bias);
      h = ad::add_row(ad::matmul_nt(h, w), b);
      if (l + 1 == depth) break;
      h = ad::relu(h);
      if (config_.use_batchnorm) {
        h = batchnorm(tape, h, norms_[static_cast<std::size_t>(l)], mode);
      }
      if (mode == Mode::train && config_.dropout_rate > 0.0) {
        h = dropout(tape, h, config_.dropout_rate, rng);
      }
    }
    if (config_.final_activation == Activation::sigmoid) h = ad::sigmoid(h);
    return h;
  }

  // Eval-mode forward without recording gradients.
  Tensor predict(const Tensor& x) {
    ad::Tape tape;
    ad::Tape::NoGradGuard guard(tape);
    Rng unused(0);
    return forward(tape, tape.constant(x), Mode::eval, unused).value();
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      out.push_back(&layers_[l].weight);
      out.push_back(&layers_[l].bias);
      if (l < norms_.size()) {
        out.push_back(&norms_[l].scale);
        out.push_back(&norms_[l].shift);
      }
    }
    return out;
  }

  std::vector<const Tensor*> weights() const {
    std::vector<const Tensor*> out;
    for (const auto& layer : layers_) out.push_back(&layer.weight);
    return out;
  }

  // Sum of squared Frobenius norms of the weight matrices.
  double weight_sq_norm() const {
    double s = 0.0;
    for (const auto& layer : layers_) s += layer.weight.squaredNorm();
    return s;
  }

  // Binary block: "CBRE", version, layer count, then per layer the out and in
  // sizes followed by row-major little-endian weights and biases (and the
  // batchnorm scale/shift/mean/var rows for hidden layers when enabled).
  void write(std::ostream& os) const {
    os.write("CBRE", 4);
    write_u32(os, kFormatVersion);
    write_u32(os, static_cast<std::uint32_t>(layers_.size()));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const DenseLayer& layer = layers_[l];
      write_u32(os, static_cast<std::uint32_t>(layer.weight.rows()));
      write_u32(os, static_cast<std::uint32_t>(layer.weight.cols()));
      write_block(os, layer.weight);
      write_block(os, layer.bias);
      if (l < norms_.size()) {
        write_block(os, norms_[l].scale);
        write_block(os, norms_[l].shift);
        write_block(os, norms_[l].running_mean);
        write_block(os, norms_[l].running_var);
      }
    }
    if (!os) throw std::runtime_error("Mlp::write: stream failure");
  }

  static Mlp read(std::istream& is, const MlpConfig& config) {
    Mlp net = init(config, 0);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CBRE", 4) != 0) {
      throw std::runtime_error("Mlp::read: bad magic");
    }
    const std::uint32_t version = read_u32(is);
    if (version != kFormatVersion) {
      throw std::runtime_error("Mlp::read: unsupported version " +
                               std::to_string(version));
    }
    const std::uint32_t count = read_u32(is);
    if (count != net.layers_.size()) {
      throw std::runtime_error("Mlp::read: layer count " + std::to_string(count) +
                               " does not match config depth " +
                               std::to_string(net.layers_.size()));
    }
    for (std::size_t l = 0; l < net.layers_.size(); ++l) {
      DenseLayer& layer = net.layers_[l];
      const std::uint32_t rows = read_u32(is);
      const std::uint32_t cols = read_u32(is);
      if (rows != layer.weight.rows() || cols != layer.weight.cols()) {
        throw std::runtime_error("Mlp::read: layer " + std::to_string(l) +
                                 " has shape " + shape_string(rows, cols) +
                                 ", config expects " + shape_string(layer.weight));
      }
      read_block(is, layer.weight);
      read_block(is, layer.bias);
      if (l < net.norms_.size()) {
        read_block(is, net.norms_[l].scale);
        read_block(is, net.norms_[l].shift);
        read_block(is, net.norms_[l].running_mean);
        read_block(is, net.norms_[l].running_var);
      }
    }
    return net;
  }

 private:
  static constexpr std::uint32_t kFormatVersion = 1;

  static ad::Var batchnorm(ad::Tape& tape, const ad::Var& h, BatchNorm& bn,
                           Mode mode) {
    ad::Var scale = tape.parameter(bn.scale);
    ad::Var shift = tape.parameter(bn.shift);
    ad::Var centered;
    ad::Var inv_std;
    if (mode == Mode::train) {
      const double inv_n = 1.0 / static_cast<double>(h.rows());
      ad::Var mu = ad::scalar_mul(ad::sum_rows(h), inv_n);
      centered = ad::sub(h, ad::broadcast_rows(mu, h.rows()));
      ad::Var var = ad::scalar_mul(ad::sum_rows(ad::square(centered)), inv_n);
      inv_std = ad::rsqrt_eps(var, BatchNorm::kEpsilon);
      const double m = BatchNorm::kMomentum;
      bn.running_mean = (1.0 - m) * bn.running_mean + m * mu.value();
      bn.running_var = (1.0 - m) * bn.running_var + m * var.value();
    } else {
      centered = ad::sub(h, ad::broadcast_rows(tape.constant(bn.running_mean), h.rows()));
      Tensor inv = (bn.running_var.array() + BatchNorm::kEpsilon).rsqrt().matrix();
      inv_std = tape.constant(std::move(inv));
    }
    return ad::add_row(ad::mul_row(ad::mul_row(centered, inv_std), scale), shift);
  }

  // Inverted dropout: kept units are scaled by 1 / (1 - rate).
  static ad::Var dropout(ad::Tape& tape, const ad::Var& h, double rate, Rng& rng) {
    std::bernoulli_distribution keep(1.0 - rate);
    const double scale = 1.0 / (1.0 - rate);
    Tensor mask(h.rows(), h.cols());
    for (Index i = 0; i < mask.size(); ++i) {
      mask.data()[i] = keep(rng) ? scale : 0.0;
    }
    return ad::mul_elem(h, tape.constant(std::move(mask)));
  }

  static void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
  }

  static std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("Mlp::read: truncated header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  static void write_block(std::ostream& os, const Tensor& t) {
    for (Index i = 0; i < t.size(); ++i) {
      std::uint64_t bits;
      const double v = t.data()[i];
      std::memcpy(&bits, &v, sizeof bits);
      unsigned char b[8];
      for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
      os.write(reinterpret_cast<const char*>(b), 8);
    }
  }

  static void read_block(std::istream& is, Tensor& t) {
    for (Index i = 0; i < t.size(); ++i) {
      unsigned char b[8];
      is.read(reinterpret_cast<char*>(b), 8);
      if (!is) throw std::runtime_error("Mlp::read: truncated parameter block");
      std::uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
      double v;
      std::memcpy(&v, &bits, sizeof v);
      t.data()[i] = v;
    }
  }

  MlpConfig config_;
  std::vector<DenseLayer> layers_;
  std::vector<BatchNorm> norms_;
};

}  // namespace cbre::nn
