#include "abx/tensor.hpp"

#include "abx/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace abx {

std::string shape_string(const Matrix& m) {
  std::ostringstream os;
  os << '[' << m.rows() << 'x' << m.cols() << ']';
  return os.str();
}

Parameter::Parameter(std::string name, Matrix value)
    : name(std::move(name)), value(std::move(value)) {
  zero_grad();
}

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) { return record(std::move(value), {}, nullptr, "constant"); }

Var Tape::leaf(Matrix value) {
  Var v = record(std::move(value), {}, nullptr, "leaf");
  nodes_.back().requires_grad = true;
  return v;
}

Var Tape::parameter(Parameter& p) {
  Var v = record(p.value, {}, nullptr, p.name.c_str());
  nodes_.back().requires_grad = true;
  nodes_.back().param = &p;
  return v;
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward,
                 const char* op) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward), op);
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn backward,
                 const char* op) {
  if (!value.allFinite()) {
    throw NumericError(std::string("non-finite result in ") + op);
  }
  bool needs_grad = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw UsageError(std::string(op) + ": operand from another tape");
    needs_grad = needs_grad || nodes_[in.id()].requires_grad;
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = needs_grad;
  if (needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(Var target, const Matrix& g) {
  Node& n = nodes_[target.id()];
  if (!n.requires_grad) return;
  n.grad += g;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw UsageError("backward: loss belongs to another tape");
  const Matrix& lv = nodes_[loss.id()].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw UsageError("backward: loss must be scalar, got " + shape_string(lv));
  }
  for (std::size_t i = 0; i <= loss.id(); ++i) {
    Node& n = nodes_[i];
    if (n.requires_grad) n.grad.setZero(n.value.rows(), n.value.cols());
  }
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].grad(0, 0) = 1.0;

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.backward) {
      const Matrix upstream = n.grad;
      n.backward(*this, upstream, n.value);
    } else if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
      if (!fault_param_.empty() && p.name == fault_param_) {
        p.grad += fault_factor_ * n.grad;
      } else {
        p.grad += n.grad;
      }
    }
  }
}

void Tape::reset() {
  nodes_.clear();
  pattern_ = 0xcbf29ce484222325ULL;
}

void Tape::note_activation(const Matrix& input) {
  for (Index k = 0; k < input.size(); ++k) {
    pattern_ ^= input.data()[k] > 0.0 ? 1u : 0u;
    pattern_ *= 0x100000001b3ULL;
  }
}

void Tape::inject_fault(std::string parameter_name, double factor) {
  fault_param_ = std::move(parameter_name);
  fault_factor_ = factor;
}

namespace {

void require_same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape()) {
    throw UsageError(std::string(op) + ": operands must live on the same tape");
  }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(av) + " x " +
                         shape_string(bv));
  }
  return a.tape()->record(av * bv, {a, b},
                          [a, b](Tape& t, const Matrix& g, const Matrix&) {
                            if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
                            if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
                          },
                          "matmul");
}

Var transpose(Var a) {
  return a.tape()->record(a.value().transpose(), {a},
                          [a](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g.transpose()); },
                          "transpose");
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  return a.tape()->record(a.value() + b.value(), {a, b},
                          [a, b](Tape& t, const Matrix& g, const Matrix&) {
                            t.accumulate(a, g);
                            t.accumulate(b, g);
                          },
                          "add");
}

Var add_row(Var a, Var row) {
  require_same_tape(a, row, "add_row");
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("add_row: expected 1x" + std::to_string(av.cols()) + " row, got " +
                         shape_string(rv));
  }
  Matrix out = av.rowwise() + rv.row(0);
  return a.tape()->record(std::move(out), {a, row},
                          [a, row](Tape& t, const Matrix& g, const Matrix&) {
                            t.accumulate(a, g);
                            if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
                          },
                          "add_row");
}

Var mul_row(Var a, Var row) {
  require_same_tape(a, row, "mul_row");
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("mul_row: expected 1x" + std::to_string(av.cols()) + " row, got " +
                         shape_string(rv));
  }
  Matrix out = av.array().rowwise() * rv.row(0).array();
  return a.tape()->record(std::move(out), {a, row},
                          [a, row](Tape& t, const Matrix& g, const Matrix&) {
                            const Matrix& rv = row.value();
                            if (a.requires_grad()) {
                              Matrix ga = g.array().rowwise() * rv.row(0).array();
                              t.accumulate(a, ga);
                            }
                            if (row.requires_grad()) {
                              Matrix gr = (g.array() * a.value().array()).colwise().sum();
                              t.accumulate(row, gr);
                            }
                          },
                          "mul_row");
}

Var hadamard(Var a, Var b) {
  require_same_tape(a, b, "hadamard");
  require_same_shape(a.value(), b.value(), "hadamard");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape()->record(std::move(out), {a, b},
                          [a, b](Tape& t, const Matrix& g, const Matrix&) {
                            if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
                            if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
                          },
                          "hadamard");
}

Var scale(Var a, double c) {
  return a.tape()->record(a.value() * c, {a},
                          [a, c](Tape& t, const Matrix& g, const Matrix&) { t.accumulate(a, g * c); }, "scale");
}

Var scale_by(Var a, Var scalar) {
  require_same_tape(a, scalar, "scale_by");
  const Matrix& sv = scalar.value();
  if (sv.rows() != 1 || sv.cols() != 1) {
    throw DimensionError("scale_by: factor must be 1x1, got " + shape_string(sv));
  }
  return a.tape()->record(a.value() * sv(0, 0), {a, scalar},
                          [a, scalar](Tape& t, const Matrix& g, const Matrix&) {
                            if (a.requires_grad()) t.accumulate(a, g * scalar.value()(0, 0));
                            if (scalar.requires_grad()) {
                              Matrix gs(1, 1);
                              gs(0, 0) = g.cwiseProduct(a.value()).sum();
                              t.accumulate(scalar, gs);
                            }
                          },
                          "scale_by");
}

Var tanh(Var a) {
  Matrix out = a.value().array().tanh();
  return a.tape()->record(std::move(out), {a},
                          [a](Tape& t, const Matrix& g, const Matrix& y) {
                            Matrix ga = g.array() * (1.0 - y.array().square());
                            t.accumulate(a, ga);
                          },
                          "tanh");
}

Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  a.tape()->note_activation(a.value());
  return a.tape()->record(std::move(out), {a},
                          [a](Tape& t, const Matrix& g, const Matrix&) {
                            Matrix ga = (a.value().array() > 0.0).select(g, 0.0);
                            t.accumulate(a, ga);
                          },
                          "relu");
}

Var softmax_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double top = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - top).exp();
    out.row(r) /= out.row(r).sum();
  }
  return a.tape()->record(std::move(out), {a},
                          [a](Tape& t, const Matrix& g, const Matrix& y) {
                            Vector dots = g.cwiseProduct(y).rowwise().sum();
                            Matrix ga = y.array() * (g.colwise() - dots).array();
                            t.accumulate(a, ga);
                          },
                          "softmax_rows");
}

Var normalize_rows(Var a, double eps) {
  const Matrix& x = a.value();
  const Index q = x.cols();
  if (q == 0) throw DimensionError("normalize_rows: empty row");
  Vector inv_std(x.rows());
  Matrix out(x.rows(), q);
  for (Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    out.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  return a.tape()->record(std::move(out), {a},
                          [a, inv_std](Tape& t, const Matrix& g, const Matrix& y) {
                            // dx = inv_std * (g - mean(g) - y * mean(g . y)) per row
                            const Index q = y.cols();
                            Vector g_mean = g.rowwise().sum() / static_cast<double>(q);
                            Vector gy_mean = g.cwiseProduct(y).rowwise().sum() / static_cast<double>(q);
                            Matrix ga = g;
                            ga.colwise() -= g_mean;
                            ga -= (y.array().colwise() * gy_mean.array()).matrix();
                            ga = ga.array().colwise() * inv_std.array();
                            t.accumulate(a, ga);
                          },
                          "normalize_rows");
}

Var concat_last(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_last: no parts");
  Tape* tape = parts[0].tape();
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.tape() != tape) throw UsageError("concat_last: parts from different tapes");
    if (p.rows() != rows) {
      throw DimensionError("concat_last: leading dimension mismatch " +
                           shape_string(parts[0].value()) + " vs " + shape_string(p.value()));
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Var> inputs(parts.begin(), parts.end());
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return tape->record(std::move(out), inputs,
                      [inputs](Tape& t, const Matrix& g, const Matrix&) {
                        Index offset = 0;
                        for (const Var& p : inputs) {
                          const Index w = p.cols();
                          if (p.requires_grad()) t.accumulate(p, g.middleCols(offset, w));
                          offset += w;
                        }
                      },
                      "concat_last");
}

Var slice_cols(Var a, Index start, Index width) {
  const Matrix& x = a.value();
  if (start < 0 || width < 0 || start + width > x.cols()) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + width) + ") outside " + shape_string(x));
  }
  Matrix out = x.middleCols(start, width);
  return a.tape()->record(std::move(out), {a},
                          [a, start, width](Tape& t, const Matrix& g, const Matrix&) {
                            Matrix ga = Matrix::Zero(a.rows(), a.cols());
                            ga.middleCols(start, width) = g;
                            t.accumulate(a, ga);
                          },
                          "slice_cols");
}

std::vector<Var> split_last(Var x, std::span<const Index> widths) {
  Index total = 0;
  for (Index w : widths) {
    if (w < 0) throw DimensionError("split_last: negative width");
    total += w;
  }
  if (total != x.cols()) {
    throw DimensionError("split_last: widths sum to " + std::to_string(total) + " but input is " +
                         shape_string(x.value()));
  }
  std::vector<Var> parts;
  parts.reserve(widths.size());
  Index offset = 0;
  for (Index w : widths) {
    parts.push_back(slice_cols(x, offset, w));
    offset += w;
  }
  return parts;
}

Var mean_rows(Var a) {
  if (a.rows() == 0) throw UsageError("mean_rows: no rows");
  Matrix out = a.value().colwise().mean();
  return a.tape()->record(std::move(out), {a},
                          [a](Tape& t, const Matrix& g, const Matrix&) {
                            const double inv = 1.0 / static_cast<double>(a.rows());
                            Matrix ga = g.replicate(a.rows(), 1) * inv;
                            t.accumulate(a, ga);
                          },
                          "mean_rows");
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record(std::move(out), {a},
                          [a](Tape& t, const Matrix& g, const Matrix&) {
                            t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
                          },
                          "sum");
}

Var element(Var a, Index row, Index col) {
  if (row < 0 || col < 0 || row >= a.rows() || col >= a.cols()) {
    throw DimensionError("element: (" + std::to_string(row) + ", " + std::to_string(col) +
                         ") outside " + shape_string(a.value()));
  }
  Matrix out(1, 1);
  out(0, 0) = a.value()(row, col);
  return a.tape()->record(std::move(out), {a},
                          [a, row, col](Tape& t, const Matrix& g, const Matrix&) {
                            Matrix ga = Matrix::Zero(a.rows(), a.cols());
                            ga(row, col) = g(0, 0);
                            t.accumulate(a, ga);
                          },
                          "element");
}

Var cross_entropy(Var logits, int label) {
  const Matrix& z = logits.value();
  if (z.rows() != 1) throw DimensionError("cross_entropy: logits must be one row, got " + shape_string(z));
  if (label < 0 || label >= z.cols()) {
    throw UsageError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                     std::to_string(z.cols()) + ")");
  }
  const double top = z.maxCoeff();
  const double lse = top + std::log((z.array() - top).exp().sum());
  Matrix out(1, 1);
  out(0, 0) = lse - z(0, label);
  return logits.tape()->record(std::move(out), {logits},
                               [logits, label, lse](Tape& t, const Matrix& g, const Matrix&) {
                                 Matrix p = (logits.value().array() - lse).exp();
                                 p(0, label) -= 1.0;
                                 t.accumulate(logits, p * g(0, 0));
                               },
                               "cross_entropy");
}

double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Matrix& x, double step) {
  if (!(step > 0.0)) throw UsageError("finite_diff_check: step must be positive");
  Matrix analytic;
  {
    Tape tape;
    Var leaf = tape.leaf(x);
    Var out = f(tape, leaf);
    tape.backward(out);
    analytic = leaf.grad();
  }
  auto eval = [&](const Matrix& at) {
    Tape tape;
    Var out = f(tape, tape.constant(at));
    const double v = out.value()(0, 0);
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite function value");
    return v;
  };
  double worst = 0.0;
  Matrix probe = x;
  for (Index c = 0; c < x.cols(); ++c) {
    for (Index r = 0; r < x.rows(); ++r) {
      const double saved = probe(r, c);
      probe(r, c) = saved + step;
      const double up = eval(probe);
      probe(r, c) = saved - step;
      const double down = eval(probe);
      probe(r, c) = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic(r, c);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace abx
