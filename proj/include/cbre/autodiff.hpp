// Tape-based reverse-mode automatic differentiation over dense double matrices.
//
// Every value is a 2-D row-major matrix (vectors are 1xN or Nx1, scalars 1x1).
// Operations append nodes to a Tape. Backward rules are themselves written in
// terms of tape operations, so a gradient computed with `create_graph = true`
// is an ordinary node that can enter a later loss and be differentiated again
// (reverse-over-reverse). Only order-2 derivatives are used by the library.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cbre {

using Index = Eigen::Index;
using Tensor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

inline std::string shape_string(const Tensor& t) {
  return shape_string(t.rows(), t.cols());
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Builds a tensor from nested rows, e.g. make_tensor({{1, 2}, {3, 4}}).
inline Tensor make_tensor(
    std::initializer_list<std::initializer_list<double>> rows) {
  const Index r = static_cast<Index>(rows.size());
  const Index c = r == 0 ? 0 : static_cast<Index>(rows.begin()->size());
  Tensor out(r, c);
  Index i = 0;
  for (const auto& row : rows) {
    if (static_cast<Index>(row.size()) != c) {
      throw ShapeError("make_tensor: ragged rows");
    }
    Index j = 0;
    for (double v : row) out(i, j++) = v;
    ++i;
  }
  return out;
}

inline Tensor column_tensor(std::span<const double> values) {
  Tensor out(static_cast<Index>(values.size()), 1);
  for (std::size_t i = 0; i < values.size(); ++i) {
    out(static_cast<Index>(i), 0) = values[i];
  }
  return out;
}

namespace ad {

inline constexpr double kNormEpsilon = 1e-12;

enum class Op {
  leaf,
  matmul,
  matmul_nt,
  matmul_tn,
  add,
  add_row,
  sub,
  mul_elem,
  scalar_mul,
  concat_cols,
  relu,
  sigmoid,
  mean,
  sum,
  square,
  sqrt_eps,
  rsqrt_eps,
  transpose,
  broadcast_rows,
  broadcast_cols,
  sum_rows,
  sum_cols,
  slice_cols,
  pad_cols,
  gather_rows,
  scatter_rows,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::matmul_nt: return "matmul_nt";
    case Op::matmul_tn: return "matmul_tn";
    case Op::add: return "add";
    case Op::add_row: return "add_row";
    case Op::sub: return "sub";
    case Op::mul_elem: return "mul_elem";
    case Op::scalar_mul: return "scalar_mul";
    case Op::concat_cols: return "concat_cols";
    case Op::relu: return "relu";
    case Op::sigmoid: return "sigmoid";
    case Op::mean: return "mean";
    case Op::sum: return "sum";
    case Op::square: return "square";
    case Op::sqrt_eps: return "sqrt_eps";
    case Op::rsqrt_eps: return "rsqrt_eps";
    case Op::transpose: return "transpose";
    case Op::broadcast_rows: return "broadcast_rows";
    case Op::broadcast_cols: return "broadcast_cols";
    case Op::sum_rows: return "sum_rows";
    case Op::sum_cols: return "sum_cols";
    case Op::slice_cols: return "slice_cols";
    case Op::pad_cols: return "pad_cols";
    case Op::gather_rows: return "gather_rows";
    case Op::scatter_rows: return "scatter_rows";
  }
  return "unknown";
}

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  // Value of a 1x1 node.
  double item() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Receives the node's own output, the gradient flowing into it and a flag
  // per input telling whether that input's gradient is needed. Returns one
  // entry per input; entries that are not needed may be left invalid.
  using Backward = std::function<std::vector<Var>(
      const Var& out, const Var& grad, const std::vector<char>& need)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  Op kind(std::size_t id) const { return node(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const {
    return node(id).inputs;
  }
  bool requires_grad(std::size_t id) const { return node(id).requires_grad; }
  const Tensor& value(std::size_t id) const { return node(id).value; }

  // Leaf that never receives gradients.
  Var constant(Tensor value) {
    return push(Op::leaf, std::move(value), {}, nullptr, false);
  }

  // Leaf that gradients can be requested for.
  Var variable(Tensor value) {
    return push(Op::leaf, std::move(value), {}, nullptr, true);
  }

  // Leaf bound to an external parameter tensor. Repeated calls with the same
  // tensor return the same node so gradient contributions accumulate.
  Var parameter(const Tensor& source) {
    if (auto it = bound_.find(&source); it != bound_.end()) {
      return Var(this, it->second);
    }
    Var v = push(Op::leaf, source, {}, nullptr, recording_);
    bound_.emplace(&source, v.id());
    return v;
  }

  // Node previously bound to `source`, if any.
  std::optional<Var> find_parameter(const Tensor& source) {
    if (auto it = bound_.find(&source); it != bound_.end()) {
      return Var(this, it->second);
    }
    return std::nullopt;
  }

  bool recording() const { return recording_; }

  // Moves a node's value out of the tape. The node must not be read again.
  Tensor release(const Var& v) {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw std::invalid_argument("release: node is not on this tape");
    }
    return std::move(nodes_[v.id()].value);
  }

  // Records an operation node. Nodes whose inputs need no gradient (or that
  // are created while recording is off) are stored as plain values.
  Var record(Op op, Tensor value, std::vector<Var> inputs, Backward backward) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& in : inputs) {
      check_owned(in, op);
      ids.push_back(in.id());
      needs = needs || node(in.id()).requires_grad;
    }
    needs = needs && recording_;
    if (!needs) return push(op, std::move(value), {}, nullptr, false);
    return push(op, std::move(value), std::move(ids), std::move(backward),
                true);
  }

  // Gradients of the scalar `output` with respect to each node in `wrt`.
  // With create_graph the returned gradients are differentiable nodes.
  std::vector<Var> grad(const Var& output, std::span<const Var> wrt,
                        bool create_graph = false);

  std::vector<Var> grad(const Var& output, std::initializer_list<Var> wrt,
                        bool create_graph = false) {
    return grad(output, std::span<const Var>(wrt.begin(), wrt.size()),
                create_graph);
  }

  // Turns recording of backward rules on or off for the lifetime of the guard.
  class RecordingGuard {
   public:
    RecordingGuard(Tape& tape, bool on) : tape_(tape), prev_(tape.recording_) {
      tape_.recording_ = on;
    }
    ~RecordingGuard() { tape_.recording_ = prev_; }
    RecordingGuard(const RecordingGuard&) = delete;
    RecordingGuard& operator=(const RecordingGuard&) = delete;

   private:
    Tape& tape_;
    bool prev_;
  };

  class NoGradGuard : public RecordingGuard {
   public:
    explicit NoGradGuard(Tape& tape) : RecordingGuard(tape, false) {}
  };

 private:
  friend class Var;

  struct Node {
    Op op;
    Tensor value;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad;
  };

  const Node& node(std::size_t id) const {
    if (id >= nodes_.size()) {
      throw std::out_of_range("tape: node " + std::to_string(id) +
                              " is not on this tape");
    }
    return nodes_[id];
  }

  void check_owned(const Var& v, Op op) const {
    if (v.tape() != this) {
      throw std::invalid_argument(std::string(op_name(op)) +
                                  ": input belongs to a different tape");
    }
  }

  Var push(Op op, Tensor value, std::vector<std::size_t> inputs,
           Backward backward, bool requires_grad) {
    nodes_.push_back(Node{op, std::move(value), std::move(inputs),
                          std::move(backward), requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  // std::deque keeps references to node values stable while the tape grows.
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_;
  bool recording_ = true;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("Var: uninitialized handle");
  return tape_->value(id_);
}

inline double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) {
    throw ShapeError("item: expected a scalar, got " + shape_string(v));
  }
  return v(0, 0);
}

// ---------------------------------------------------------------------------
// Primitive operations.

namespace detail {

inline Tape& tape_of(const Var& a, Op op) {
  if (!a.valid()) {
    throw std::invalid_argument(std::string(op_name(op)) +
                                ": uninitialized input");
  }
  return *a.tape();
}

[[noreturn]] inline void shape_mismatch(Op op, const Tensor& a,
                                        const Tensor& b) {
  throw ShapeError(std::string(op_name(op)) + ": shape mismatch " +
                   shape_string(a) + " vs " + shape_string(b));
}

inline void require_same_shape(Op op, const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    shape_mismatch(op, a.value(), b.value());
  }
}

}  // namespace detail

Var transpose(const Var& a);
Var matmul_nt(const Var& a, const Var& b);
Var matmul_tn(const Var& a, const Var& b);
Var broadcast_rows(const Var& a, Index rows);
Var broadcast_cols(const Var& a, Index cols);
Var sum_rows(const Var& a);
Var sum_cols(const Var& a);
Var slice_cols(const Var& a, Index offset, Index width);
Var pad_cols(const Var& a, Index offset, Index total);
Var gather_rows(const Var& a, std::vector<Index> rows);
Var scatter_rows(const Var& a, std::vector<Index> rows, Index total);
Var rsqrt_eps(const Var& a, double eps);

inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, Op::matmul);
  if (a.cols() != b.rows()) detail::shape_mismatch(Op::matmul, a.value(), b.value());
  Tensor out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return tape.record(Op::matmul, std::move(out), {a, b},
                     [a, b](const Var&, const Var& g,
                            const std::vector<char>& need) {
                       std::vector<Var> r(2);
                       if (need[0]) r[0] = matmul_nt(g, b);
                       if (need[1]) r[1] = matmul_tn(a, g);
                       return r;
                     });
}

// a * b^T without materializing the transpose.
inline Var matmul_nt(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, Op::matmul_nt);
  if (a.cols() != b.cols()) detail::shape_mismatch(Op::matmul_nt, a.value(), b.value());
  Tensor out(a.rows(), b.rows());
  out.noalias() = a.value() * b.value().transpose();
  return tape.record(Op::matmul_nt, std::move(out), {a, b},
                     [a, b](const Var&, const Var& g,
                            const std::vector<char>& need) {
                       std::vector<Var> r(2);
                       if (need[0]) r[0] = matmul(g, b);
                       if (need[1]) r[1] = matmul_tn(g, a);
                       return r;
                     });
}

// a^T * b without materializing the transpose.
inline Var matmul_tn(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, Op::matmul_tn);
  if (a.rows() != b.rows()) detail::shape_mismatch(Op::matmul_tn, a.value(), b.value());
  Tensor out(a.cols(), b.cols());
  out.noalias() = a.value().transpose() * b.value();
  return tape.record(Op::matmul_tn, std::move(out), {a, b},
                     [a, b](const Var&, const Var& g,
                            const std::vector<char>& need) {
                       std::vector<Var> r(2);
                       if (need[0]) r[0] = matmul_nt(b, g);
                       if (need[1]) r[1] = matmul(a, g);
                       return r;
                     });
}

Var scalar_mul(const Var& a, double s);

inline Var add(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, Op::add);
  detail::require_same_shape(Op::add, a, b);
  Tensor out = a.value() + b.value();
  return tape.record(Op::add, std::move(out), {a, b},
                     [](const Var&, const Var& g, const std::vector<char>&) {
                       return std::vector<Var>{g, g};
                     });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, Op::sub);
  detail::require_same_shape(Op::sub, a, b);
  Tensor out = a.value() - b.value();
  return tape.record(Op::sub, std::move(out), {a, b},
                     [](const Var&, const Var& g,
                        const std::vector<char>& need) {
                       std::vector<Var> r(2);
                       r[0] = g;
                       if (need[1]) r[1] = scalar_mul(g, -1.0);
                       return r;
                     });
}

inline Var mul_elem(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, Op::mul_elem);
  detail::require_same_shape(Op::mul_elem, a, b);
  Tensor out = a.value().cwiseProduct(b.value());
  return tape.record(Op::mul_elem, std::move(out), {a, b},
                     [a, b](const Var&, const Var& g,
                            const std::vector<char>& need) {
                       std::vector<Var> r(2);
                       if (need[0]) r[0] = mul_elem(g, b);
                       if (need[1]) r[1] = mul_elem(g, a);
                       return r;
                     });
}

inline Var scalar_mul(const Var& a, double s) {
  Tape& tape = detail::tape_of(a, Op::scalar_mul);
  Tensor out = a.value() * s;
  return tape.record(Op::scalar_mul, std::move(out), {a},
                     [s](const Var&, const Var& g, const std::vector<char>&) {
                       return std::vector<Var>{scalar_mul(g, s)};
                     });
}

inline Var concat_cols(const Var& a, const Var& b) {
  Tape& tape = detail::tape_of(a, Op::concat_cols);
  if (a.rows() != b.rows()) {
    detail::shape_mismatch(Op::concat_cols, a.value(), b.value());
  }
  const Index ca = a.cols();
  const Index cb = b.cols();
  Tensor out(a.rows(), ca + cb);
  out.leftCols(ca) = a.value();
  out.rightCols(cb) = b.value();
  return tape.record(Op::concat_cols, std::move(out), {a, b},
                     [ca, cb](const Var&, const Var& g,
                              const std::vector<char>& need) {
                       std::vector<Var> r(2);
                       if (need[0]) r[0] = slice_cols(g, 0, ca);
                       if (need[1]) r[1] = slice_cols(g, ca, cb);
                       return r;
                     });
}

// ReLU with derivative 0 at exactly 0. The backward mask is a constant, so
// second derivatives through ReLU vanish.
inline Var relu(const Var& a) {
  Tape& tape = detail::tape_of(a, Op::relu);
  Tensor out = a.value().cwiseMax(0.0);
  return tape.record(
      Op::relu, std::move(out), {a},
      [a](const Var&, const Var& g, const std::vector<char>&) {
        Tensor mask = (a.value().array() > 0.0).cast<double>().matrix();
        return std::vector<Var>{mul_elem(g, g.tape()->constant(std::move(mask)))};
      });
}

inline Var square(const Var& a);

inline Var sigmoid(const Var& a) {
  Tape& tape = detail::tape_of(a, Op::sigmoid);
  Tensor out =
      a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return tape.record(Op::sigmoid, std::move(out), {a},
                     [](const Var& out, const Var& g,
                        const std::vector<char>&) {
                       // s' = s - s^2
                       return std::vector<Var>{mul_elem(g, sub(out, square(out)))};
                     });
}

inline Var sum(const Var& a) {
  Tape& tape = detail::tape_of(a, Op::sum);
  Tensor out(1, 1);
  out(0, 0) = a.value().sum();
  const Index r = a.rows();
  const Index c = a.cols();
  return tape.record(Op::sum, std::move(out), {a},
                     [r, c](const Var&, const Var& g,
                            const std::vector<char>&) {
                       return std::vector<Var>{broadcast_rows(broadcast_cols(g, c), r)};
                     });
}

inline Var mean(const Var& a) {
  Tape& tape = detail::tape_of(a, Op::mean);
  if (a.value().size() == 0) {
    throw ShapeError("mean: empty input " + shape_string(a.value()));
  }
  Tensor out(1, 1);
  out(0, 0) = a.value().mean();
  const Index r = a.rows();
  const Index c = a.cols();
  const double inv = 1.0 / static_cast<double>(r * c);
  return tape.record(Op::mean, std::move(out), {a},
                     [r, c, inv](const Var&, const Var& g,
                                 const std::vector<char>&) {
                       return std::vector<Var>{
                           broadcast_rows(broadcast_cols(scalar_mul(g, inv), c), r)};
                     });
}

inline Var square(const Var& a) {
  Tape& tape = detail::tape_of(a, Op::square);
  Tensor out = a.value().cwiseAbs2();
  return tape.record(Op::square, std::move(out), {a},
                     [a](const Var&, const Var& g, const std::vector<char>&) {
                       return std::vector<Var>{mul_elem(g, scalar_mul(a, 2.0))};
                     });
}

// sqrt(a + eps); `a` is expected to be non-negative.
inline Var sqrt_eps(const Var& a, double eps = kNormEpsilon) {
  Tape& tape = detail::tape_of(a, Op::sqrt_eps);
  if ((a.value().array() < 0.0).any()) {
    throw std::domain_error("sqrt_eps: negative input");
  }
  Tensor out = (a.value().array() + eps).sqrt().matrix();
  return tape.record(Op::sqrt_eps, std::move(out), {a},
                     [a, eps](const Var&, const Var& g,
                              const std::vector<char>&) {
                       return std::vector<Var>{
                           mul_elem(g, scalar_mul(rsqrt_eps(a, eps), 0.5))};
                     });
}

// 1 / sqrt(a + eps).
inline Var rsqrt_eps(const Var& a, double eps) {
  Tape& tape = detail::tape_of(a, Op::rsqrt_eps);
  Tensor out = (a.value().array() + eps).rsqrt().matrix();
  return tape.record(Op::rsqrt_eps, std::move(out), {a},
                     [](const Var& out, const Var& g,
                        const std::vector<char>&) {
                       // d/da (a+eps)^-1/2 = -1/2 * out^3
                       return std::vector<Var>{mul_elem(
                           g, scalar_mul(mul_elem(out, square(out)), -0.5))};
                     });
}

inline Var transpose(const Var& a) {
  Tape& tape = detail::tape_of(a, Op::transpose);
  Tensor out = a.value().transpose();
  return tape.record(Op::transpose, std::move(out), {a},
                     [](const Var&, const Var& g, const std::vector<char>&) {
                       return std::vector<Var>{transpose(g)};
                     });
}

// Repeats a 1xC row `rows` times.
inline Var broadcast_rows(const Var& a, Index rows) {
  Tape& tape = detail::tape_of(a, Op::broadcast_rows);
  if (a.rows() != 1) {
    throw ShapeError("broadcast_rows: expected a row vector, got " +
                     shape_string(a.value()));
  }
  Tensor out = a.value().replicate(rows, 1);
  return tape.record(Op::broadcast_rows, std::move(out), {a},
                     [](const Var&, const Var& g, const std::vector<char>&) {
                       return std::vector<Var>{sum_rows(g)};
                     });
}

// Repeats an Rx1 column `cols` times.
inline Var broadcast_cols(const Var& a, Index cols) {
  Tape& tape = detail::tape_of(a, Op::broadcast_cols);
  if (a.cols() != 1) {
    throw ShapeError("broadcast_cols: expected a column vector, got " +
                     shape_string(a.value()));
  }
  Tensor out = a.value().replicate(1, cols);
  return tape.record(Op::broadcast_cols, std::move(out), {a},
                     [](const Var&, const Var& g, const std::vector<char>&) {
                       return std::vector<Var>{sum_cols(g)};
                     });
}

// Column sums as a 1xC row.
inline Var sum_rows(const Var& a) {
  Tape& tape = detail::tape_of(a, Op::sum_rows);
  Tensor out = a.value().colwise().sum();
  const Index r = a.rows();
  return tape.record(Op::sum_rows, std::move(out), {a},
                     [r](const Var&, const Var& g, const std::vector<char>&) {
                       return std::vector<Var>{broadcast_rows(g, r)};
                     });
}

// Row sums as an Rx1 column.
inline Var sum_cols(const Var& a) {
  Tape& tape = detail::tape_of(a, Op::sum_cols);
  Tensor out = a.value().rowwise().sum();
  const Index c = a.cols();
  return tape.record(Op::sum_cols, std::move(out), {a},
                     [c](const Var&, const Var& g, const std::vector<char>&) {
                       return std::vector<Var>{broadcast_cols(g, c)};
                     });
}

inline Var slice_cols(const Var& a, Index offset, Index width) {
  Tape& tape = detail::tape_of(a, Op::slice_cols);
  if (offset < 0 || width < 0 || offset + width > a.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(offset) + ", " +
                     std::to_string(offset + width) + ") out of " +
                     shape_string(a.value()));
  }
  Tensor out = a.value().middleCols(offset, width);
  const Index total = a.cols();
  return tape.record(Op::slice_cols, std::move(out), {a},
                     [offset, total](const Var&, const Var& g,
                                     const std::vector<char>&) {
                       return std::vector<Var>{pad_cols(g, offset, total)};
                     });
}

// Places `a` at column `offset` of a zero matrix with `total` columns.
inline Var pad_cols(const Var& a, Index offset, Index total) {
  Tape& tape = detail::tape_of(a, Op::pad_cols);
  if (offset < 0 || offset + a.cols() > total) {
    throw ShapeError("pad_cols: " + shape_string(a.value()) +
                     " does not fit at offset " + std::to_string(offset) +
                     " of width " + std::to_string(total));
  }
  Tensor out = Tensor::Zero(a.rows(), total);
  out.middleCols(offset, a.cols()) = a.value();
  const Index width = a.cols();
  return tape.record(Op::pad_cols, std::move(out), {a},
                     [offset, width](const Var&, const Var& g,
                                     const std::vector<char>&) {
                       return std::vector<Var>{slice_cols(g, offset, width)};
                     });
}

inline Var gather_rows(const Var& a, std::vector<Index> rows) {
  Tape& tape = detail::tape_of(a, Op::gather_rows);
  Tensor out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) {
      throw ShapeError("gather_rows: row " + std::to_string(rows[i]) +
                       " out of " + shape_string(a.value()));
    }
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  const Index total = a.rows();
  return tape.record(Op::gather_rows, std::move(out), {a},
                     [rows = std::move(rows), total](
                         const Var&, const Var& g, const std::vector<char>&) {
                       return std::vector<Var>{scatter_rows(g, rows, total)};
                     });
}

// Scatter-add of the rows of `a` into a zero matrix with `total` rows.
inline Var scatter_rows(const Var& a, std::vector<Index> rows, Index total) {
  Tape& tape = detail::tape_of(a, Op::scatter_rows);
  if (static_cast<Index>(rows.size()) != a.rows()) {
    throw ShapeError("scatter_rows: " + std::to_string(rows.size()) +
                     " indices for " + shape_string(a.value()));
  }
  Tensor out = Tensor::Zero(total, a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= total) {
      throw ShapeError("scatter_rows: row " + std::to_string(rows[i]) +
                       " out of " + std::to_string(total));
    }
    out.row(rows[i]) += a.value().row(static_cast<Index>(i));
  }
  return tape.record(Op::scatter_rows, std::move(out), {a},
                     [rows = std::move(rows)](const Var&, const Var& g,
                                              const std::vector<char>&) {
                       return std::vector<Var>{gather_rows(g, rows)};
                     });
}

// ---------------------------------------------------------------------------
// Composites.

// Per-row sqrt(sum_j x_ij^2 + 1e-12) as an Rx1 column.
inline Var row_l2_norm(const Var& a) {
  return sqrt_eps(sum_cols(square(a)), kNormEpsilon);
}

// x + b for every row of x, with b a 1xC row.
inline Var add_row(const Var& x, const Var& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw ShapeError("add_row: shape mismatch " + shape_string(x.value()) +
                     " vs " + shape_string(b.value()));
  }
  Tape& tape = detail::tape_of(x, Op::add_row);
  Tensor out = x.value();
  out.rowwise() += b.value().row(0);
  return tape.record(Op::add_row, std::move(out), {x, b},
                     [](const Var&, const Var& g, const std::vector<char>& need) {
                       std::vector<Var> r(2);
                       if (need[0]) r[0] = g;
                       if (need[1]) r[1] = sum_rows(g);
                       return r;
                     });
}

// x * b columnwise for every row of x, with b a 1xC row.
inline Var mul_row(const Var& x, const Var& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw ShapeError("mul_row: shape mismatch " + shape_string(x.value()) +
                     " vs " + shape_string(b.value()));
  }
  return mul_elem(x, broadcast_rows(b, x.rows()));
}

// Scales row i of x by c_i, with c an Rx1 column.
inline Var mul_col(const Var& x, const Var& c) {
  if (c.cols() != 1 || c.rows() != x.rows()) {
    throw ShapeError("mul_col: shape mismatch " + shape_string(x.value()) +
                     " vs " + shape_string(c.value()));
  }
  return mul_elem(x, broadcast_cols(c, x.cols()));
}

// ---------------------------------------------------------------------------

inline std::vector<Var> Tape::grad(const Var& output, std::span<const Var> wrt,
                                   bool create_graph) {
  if (output.tape() != this) {
    throw std::invalid_argument("grad: output is not on this tape");
  }
  const Tensor& out_value = output.value();
  if (out_value.size() != 1) {
    throw ShapeError("grad: output must be a scalar, got " +
                     shape_string(out_value));
  }
  std::size_t lowest = output.id();
  for (const Var& w : wrt) {
    if (w.tape() != this || w.id() >= nodes_.size()) {
      throw std::invalid_argument("grad: requested node is not on this tape");
    }
    lowest = std::min(lowest, w.id());
  }

  // Nodes that depend on at least one requested input.
  const std::size_t top = output.id();
  std::vector<char> reach(top + 1, 0);
  for (const Var& w : wrt) {
    if (w.id() <= top) reach[w.id()] = 1;
  }
  for (std::size_t id = lowest; id <= top; ++id) {
    if (reach[id]) continue;
    const Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    for (std::size_t in : n.inputs) {
      if (reach[in]) {
        reach[id] = 1;
        break;
      }
    }
  }

  std::vector<std::optional<Var>> grads(top + 1);
  {
    NoGradGuard guard(*this);
    grads[top] = constant(Tensor::Ones(1, 1));
  }

  const bool prev = recording_;
  recording_ = create_graph;
  try {
    for (std::size_t id = top + 1; id-- > lowest;) {
      if (!grads[id] || !reach[id]) continue;
      // Copy what we need: `nodes_` grows while backward rules run.
      const Backward backward = nodes_[id].backward;
      const std::vector<std::size_t> ins = nodes_[id].inputs;
      if (!backward) continue;
      std::vector<char> need(ins.size(), 0);
      bool any = false;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        need[k] = reach[ins[k]];
        any = any || need[k];
      }
      if (!any) continue;
      std::vector<Var> gin = backward(Var(this, id), *grads[id], need);
      for (std::size_t k = 0; k < ins.size(); ++k) {
        if (!need[k] || !gin[k].valid()) continue;
        auto& slot = grads[ins[k]];
        slot = slot ? add(*slot, gin[k]) : gin[k];
      }
    }
  } catch (...) {
    recording_ = prev;
    throw;
  }
  recording_ = prev;

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id() <= top && grads[w.id()]) {
      result.push_back(*grads[w.id()]);
    } else {
      NoGradGuard guard(*this);
      result.push_back(constant(Tensor::Zero(w.rows(), w.cols())));
    }
  }
  return result;
}

}  // namespace ad
}  // namespace cbre
