#pragma once

// Define-by-run reverse-mode autodiff over dense double matrices.
//
// Every value in the pipeline is a 2-D matrix (a bag is s x D, an attention
// vector is s x 1, a slide feature is 1 x D), so a Tensor here is an
// Eigen::MatrixXd owned by a Tape node. A Tape is built fresh per bag and
// discarded afterwards. Parameters live outside the tape; binding one with
// Tape::parameter() makes backward() accumulate into Parameter::grad.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace abx {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

std::string shape_string(const Matrix& m);

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string name, Matrix value);

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

// Lightweight handle to a tape node. Copyable; valid while its Tape lives and
// has not been reset.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  // Gradient after Tape::backward(); zero-sized when the node does not require grad.
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Receives the node's upstream gradient and its own forward value;
  // accumulates into inputs via Tape::accumulate.
  using BackwardFn =
      std::function<void(Tape&, const Matrix& upstream, const Matrix& output)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var leaf(Matrix value);
  Var parameter(Parameter& p);

  // Seeds d(loss)/d(loss) = 1 and walks the tape in reverse. Gradients of bound
  // parameters are added to Parameter::grad (callers zero them between steps).
  void backward(Var loss);
  void reset();

  std::size_t size() const { return nodes_.size(); }
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Records an op. The node requires grad iff any input does; backward is
  // dropped otherwise. Throws NumericError on a non-finite result.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward,
             const char* op);
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn backward, const char* op);
  void accumulate(Var target, const Matrix& g);

  // Test hook: multiplies every gradient flowing into the named parameter by
  // `factor`, simulating a broken backward rule.
  void inject_fault(std::string parameter_name, double factor);

  // Hash of the on/off pattern of every relu evaluated on this tape. Two
  // forward passes with equal patterns lie in the same linear piece, which is
  // what finite differences need.
  std::uint64_t activation_pattern() const { return pattern_; }
  void note_activation(const Matrix& input);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::string fault_param_;
  double fault_factor_ = 1.0;
  std::uint64_t pattern_ = 0xcbf29ce484222325ULL;
};

// ---- differentiable ops -------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
// Adds a 1 x q row to every row of a p x q matrix.
Var add_row(Var a, Var row);
// Multiplies every row of a p x q matrix elementwise by a 1 x q row.
Var mul_row(Var a, Var row);
Var hadamard(Var a, Var b);
Var scale(Var a, double c);
// Multiplies a by a 1 x 1 tensor.
Var scale_by(Var a, Var scalar);
Var tanh(Var a);
Var relu(Var a);
Var softmax_rows(Var a);
// Per-row (x - mean) / sqrt(var + eps) with population variance; no affine part.
Var normalize_rows(Var a, double eps);
Var concat_last(std::span<const Var> parts);
std::vector<Var> split_last(Var x, std::span<const Index> widths);
Var slice_cols(Var a, Index start, Index width);
Var mean_rows(Var a);
Var sum(Var a);
Var element(Var a, Index row, Index col);
// Cross-entropy of a 1 x C logit row against a class index, via log-sum-exp.
Var cross_entropy(Var logits, int label);

// ---- gradient checking ----------------------------------------------------

// Central-difference check of d f / d x. Returns the maximum over coordinates
// of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Matrix& x,
                         double step = 1e-5);

}  // namespace abx
