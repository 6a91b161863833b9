#include <doctest.h>

#include "abx/aggregators.hpp"
#include "abx/error.hpp"
#include "abx/layers.hpp"
#include "abx/random.hpp"
#include "abx/tensor.hpp"

#include <cmath>

using namespace abx;

namespace {

Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < b.cols(); ++j)
      for (Index k = 0; k < a.cols(); ++k) out(i, j) += a(i, k) * b(k, j);
  return out;
}

}  // namespace

TEST_CASE("matmul") {
  Tape t;
  Matrix m(2, 2);
  m << 1, 2, 3, 4;
  CHECK(matmul(t.constant(Matrix::Identity(2, 2)), t.constant(m)).value() == m);
  CHECK(matmul(t.constant(Matrix::Constant(1, 1, 2.0)), t.constant(Matrix::Constant(1, 1, 3.0))).value()(0, 0) == 6.0);

  Rng rng(3);
  const Matrix a = gaussian_matrix(3, 4, rng, 1.0);
  const Matrix b = gaussian_matrix(4, 2, rng, 1.0);
  const Matrix got = matmul(t.constant(a), t.constant(b)).value();
  CHECK((got - naive_product(a, b)).cwiseAbs().maxCoeff() <= 1e-12);

  CHECK_THROWS_AS(matmul(t.constant(a), t.constant(a)), DimensionError);
  try {
    matmul(t.constant(a), t.constant(a));
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("3x4") != std::string::npos);
  }
}

TEST_CASE("softmax_rows") {
  Tape t;
  Matrix x(1, 3);
  x << 5, 5, 5;
  Matrix s = softmax_rows(t.constant(x)).value();
  for (Index k = 0; k < 3; ++k) CHECK(s(0, k) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(softmax_rows(t.constant(Matrix::Constant(1, 1, -40.0))).value()(0, 0) == 1.0);

  x << 0, std::log(2.0), std::log(4.0);
  s = softmax_rows(t.constant(x)).value();
  CHECK(std::abs(s(0, 0) - 1.0 / 7) <= 1e-12);
  CHECK(std::abs(s(0, 1) - 2.0 / 7) <= 1e-12);
  CHECK(std::abs(s(0, 2) - 4.0 / 7) <= 1e-12);

  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix z = gaussian_matrix(4, 6, rng, 5.0);
    const Matrix p = softmax_rows(t.constant(z)).value();
    for (Index r = 0; r < 4; ++r) CHECK(std::abs(p.row(r).sum() - 1.0) <= 1e-9);
    CHECK((p.array() >= 0.0).all());
    const Matrix shifted = softmax_rows(t.constant((z.array() + 123.0).matrix())).value();
    CHECK((shifted - p).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("softmax stays finite for large logits") {
  Tape t;
  Matrix x(1, 2);
  x << 1000.0, 0.0;
  const Matrix s = softmax_rows(t.constant(x)).value();
  CHECK(s(0, 0) == 1.0);
  CHECK(s(0, 1) == 0.0);
}

TEST_CASE("non-finite results raise NumericError") {
  Tape t;
  Matrix x(1, 1);
  x << std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(t.constant(x), NumericError);
  Matrix big(1, 1);
  big << 1e200;
  Var v = t.constant(big);
  CHECK_THROWS_AS(matmul(v, v), NumericError);
}

TEST_CASE("apply_layer") {
  Tape t;
  Rng rng(1);
  const Matrix x = gaussian_matrix(3, 4, rng, 1.0);
  LayerSpec id = make_linear("id", Matrix::Identity(4, 4));
  CHECK(apply_layer(t, id, t.constant(x)).value() == x);

  LayerSpec th = make_activation(LayerKind::Tanh, 4);
  CHECK(apply_layer(t, th, t.constant(Matrix::Zero(2, 4))).value().isZero(0.0));

  LayerSpec ln = make_layer_norm("ln", 3);
  Matrix row(1, 3);
  row << 1, 2, 3;
  const Matrix y = apply_layer(t, ln, t.constant(row)).value();
  const double sd = std::sqrt(2.0 / 3.0 + kLayerNormEps);
  CHECK(std::abs(y(0, 0) + 1.0 / sd) <= 1e-9);
  CHECK(std::abs(y(0, 1)) <= 1e-9);
  CHECK(std::abs(y(0, 2) - 1.0 / sd) <= 1e-9);

  CHECK_THROWS_AS(apply_layer(t, ln, t.constant(x)), DimensionError);
  LayerSpec lin = make_linear("w", 5, 2, rng);
  CHECK(lin.weight.value.rows() == 5);
  CHECK(lin.weight.value.cols() == 2);
  CHECK_THROWS_AS(apply_layer(t, lin, t.constant(x)), DimensionError);
}

TEST_CASE("layer-norm of a zero row is zero") {
  Tape t;
  LayerSpec ln = make_layer_norm("ln", 4);
  CHECK(apply_layer(t, ln, t.constant(Matrix::Zero(2, 4))).value().isZero(0.0));
}

TEST_CASE("concat and split") {
  Tape t;
  Rng rng(5);
  const Matrix a = gaussian_matrix(3, 2, rng, 1.0);
  const Matrix b = gaussian_matrix(3, 1, rng, 1.0);
  const Matrix c = gaussian_matrix(3, 4, rng, 1.0);

  const Var one[] = {t.constant(a)};
  CHECK(concat_last(one).value() == a);

  const Var parts[] = {t.constant(a), t.constant(b), t.constant(c)};
  const Var joined = concat_last(parts);
  const Index widths[] = {2, 1, 4};
  const std::vector<Var> back = split_last(joined, widths);
  REQUIRE(back.size() == 3);
  CHECK(back[0].value() == a);
  CHECK(back[1].value() == b);
  CHECK(back[2].value() == c);

  const Index bad[] = {2, 2};
  CHECK_THROWS_AS(split_last(joined, bad), DimensionError);
  const Var ragged[] = {t.constant(a), t.constant(Matrix::Zero(2, 1))};
  CHECK_THROWS_AS(concat_last(ragged), DimensionError);
}

TEST_CASE("concat routes gradients to disjoint slices") {
  Tape t;
  Var a = t.leaf(Matrix::Constant(2, 3, 0.5));
  Var b = t.leaf(Matrix::Constant(2, 2, -1.0));
  const Var parts[] = {a, b};
  t.backward(sum(concat_last(parts)));
  CHECK(a.grad() == Matrix::Ones(2, 3));

  Tape t2;
  Var c = t2.leaf(Matrix::Constant(2, 3, 0.5));
  Var d = t2.leaf(Matrix::Constant(2, 2, -1.0));
  const Var parts2[] = {c, d};
  t2.backward(sum(slice_cols(concat_last(parts2), 3, 2)));
  CHECK(c.grad().isZero(0.0));
  CHECK(d.grad() == Matrix::Ones(2, 2));
}

TEST_CASE("backward basics") {
  Rng rng(2);
  const Matrix x0 = gaussian_matrix(3, 3, rng, 1.0);
  {
    Tape t;
    Var x = t.leaf(x0);
    t.backward(sum(x));
    CHECK(x.grad() == Matrix::Ones(3, 3));
  }
  {
    Tape t;
    Var x = t.leaf(x0);
    t.backward(sum(hadamard(x, x)));
    CHECK((x.grad() - 2.0 * x0).cwiseAbs().maxCoeff() == 0.0);
  }
  {
    Tape t;
    Var x = t.leaf(x0);
    CHECK_THROWS_AS(t.backward(x), UsageError);
  }
  {
    // fan-out accumulates
    Tape t;
    Var x = t.leaf(x0);
    t.backward(sum(add(x, scale(x, 3.0))));
    CHECK(x.grad() == Matrix::Constant(3, 3, 4.0));
  }
}

TEST_CASE("backward is deterministic") {
  Rng rng(4);
  const Matrix x0 = gaussian_matrix(5, 4, rng, 1.0);
  const Matrix w0 = gaussian_matrix(4, 3, rng, 1.0);
  auto run = [&] {
    Tape t;
    Var x = t.leaf(x0);
    Var w = t.leaf(w0);
    Var y = softmax_rows(tanh(matmul(x, w)));
    t.backward(sum(hadamard(y, y)));
    return std::pair{x.grad(), w.grad()};
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("finite_diff_check on every op") {
  Rng rng(11);
  const Matrix fixed = gaussian_matrix(4, 3, rng, 1.0);
  const Matrix square = gaussian_matrix(3, 3, rng, 1.0);
  const Matrix row = gaussian_matrix(1, 3, rng, 1.0);
  const Matrix weights = gaussian_matrix(4, 3, rng, 1.0);

  // Weighted sums keep the loss sensitive to every coordinate.
  auto weighted = [&](Tape& t, Var v) { return sum(hadamard(v, t.constant(weights.topRows(v.rows()).leftCols(v.cols())))); };

  using F = std::function<Var(Tape&, Var)>;
  const std::vector<std::pair<const char*, F>> ops = {
      {"matmul", [&](Tape& t, Var x) { return weighted(t, matmul(x, t.constant(square))); }},
      {"transpose", [&](Tape& t, Var x) { return weighted(t, transpose(matmul(transpose(x), t.constant(fixed)))); }},
      {"add", [&](Tape& t, Var x) { return weighted(t, hadamard(add(x, t.constant(fixed)), x)); }},
      {"add_row", [&](Tape& t, Var x) { return weighted(t, hadamard(add_row(x, t.constant(row)), x)); }},
      {"mul_row", [&](Tape& t, Var x) { return weighted(t, mul_row(x, t.constant(row))); }},
      {"scale", [&](Tape& t, Var x) { return weighted(t, scale(x, -1.7)); }},
      {"tanh", [&](Tape& t, Var x) { return weighted(t, tanh(x)); }},
      {"relu", [&](Tape& t, Var x) { return weighted(t, relu(add(x, t.constant(fixed)))); }},
      {"softmax_rows", [&](Tape& t, Var x) { return weighted(t, softmax_rows(x)); }},
      {"normalize_rows", [&](Tape& t, Var x) { return weighted(t, normalize_rows(x, kLayerNormEps)); }},
      {"slice_cols", [&](Tape& t, Var x) { return weighted(t, slice_cols(x, 1, 2)); }},
      {"mean_rows", [&](Tape& t, Var x) { return weighted(t, mean_rows(x)); }},
      {"element", [&](Tape&, Var x) { return element(softmax_rows(x), 1, 2); }},
      {"cross_entropy", [&](Tape&, Var x) { return cross_entropy(transpose(slice_cols(x, 0, 1)), 2); }},
  };
  for (const auto& [name, f] : ops) {
    CAPTURE(name);
    for (int trial = 0; trial < 20; ++trial) {
      const Matrix x = gaussian_matrix(4, 3, rng, 1.0);
      CHECK(finite_diff_check(f, x) < 1e-5);
    }
  }
}

TEST_CASE("finite_diff_check on row broadcasts and scalars") {
  Rng rng(12);
  const Matrix base = gaussian_matrix(4, 3, rng, 1.0);
  const Matrix w = gaussian_matrix(4, 3, rng, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix r = gaussian_matrix(1, 3, rng, 1.0);
    CHECK(finite_diff_check([&](Tape& t, Var x) { return sum(hadamard(mul_row(t.constant(base), x), t.constant(w))); }, r) < 1e-5);
    CHECK(finite_diff_check([&](Tape& t, Var x) { return sum(hadamard(add_row(t.constant(base), x), t.constant(base))); }, r) < 1e-5);
    const Matrix s = gaussian_matrix(1, 1, rng, 1.0);
    CHECK(finite_diff_check([&](Tape& t, Var x) { return sum(hadamard(scale_by(t.constant(base), x), t.constant(w))); }, s) < 1e-5);
    CHECK(finite_diff_check([&](Tape& t, Var x) {
            const Var parts[] = {x, t.constant(base)};
            return sum(hadamard(concat_last(parts), concat_last(parts)));
          },
                            base) < 1e-5);
  }
}

TEST_CASE("finite_diff_check simple cases") {
  Rng rng(13);
  const Matrix x = gaussian_matrix(3, 2, rng, 1.0);
  CHECK(finite_diff_check([](Tape&, Var v) { return sum(v); }, x) < 1e-10);
  CHECK(finite_diff_check([](Tape&, Var v) { return element(softmax_rows(v), 0, 1); }, x) < 1e-6);
  CHECK_THROWS_AS(finite_diff_check([](Tape&, Var v) { return sum(v); }, x, 0.0), UsageError);
}

TEST_CASE("finite_diff_check through abmilx and cross-entropy") {
  Rng rng(21);
  AggregatorConfig cfg;
  cfg.variant = Variant::Abmilx;
  cfg.input_dim = 16;
  cfg.heads = 4;
  cfg.hidden = 16;
  AggregatorParams params = make_aggregator(cfg, rng);
  LayerSpec head = make_linear("head", 16, 3, rng);
  const Matrix bag = gaussian_matrix(8, 16, rng, 1.0);
  const double err = finite_diff_check(
      [&](Tape& t, Var x) { return cross_entropy(apply_layer(t, head, aggregate_forward(t, x, params).slide_feature), 1); },
      bag);
  CHECK(err < 1e-5);
}

TEST_CASE("cross_entropy") {
  Tape t;
  Matrix z(1, 3);
  z << 1, 2, 3;
  const double expected = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  CHECK(std::abs(cross_entropy(t.constant(z), 2).value()(0, 0) - expected) <= 1e-12);
  CHECK(std::abs(cross_entropy(t.constant(Matrix::Constant(1, 4, 0.3)), 1).value()(0, 0) - std::log(4.0)) <= 1e-12);
  Matrix sure(1, 2);
  sure << 100, 0;
  CHECK(cross_entropy(t.constant(sure), 0).value()(0, 0) < 1e-6);
  CHECK_THROWS_AS(cross_entropy(t.constant(z), 3), UsageError);
  CHECK_THROWS_AS(cross_entropy(t.constant(z), -1), UsageError);
}

TEST_CASE("parameter gradients accumulate and fault injection scales them") {
  Parameter p("w", Matrix::Constant(2, 2, 1.0));
  p.zero_grad();
  {
    Tape t;
    t.backward(sum(t.parameter(p)));
  }
  CHECK(p.grad == Matrix::Ones(2, 2));
  {
    Tape t;
    t.inject_fault("w", 2.0);
    t.backward(sum(t.parameter(p)));
  }
  CHECK(p.grad == Matrix::Constant(2, 2, 3.0));
}
