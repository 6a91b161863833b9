#include "abx/layers.hpp"

#include "abx/error.hpp"

#include <cmath>

namespace abx {

std::vector<Parameter*> LayerSpec::parameters() {
  switch (kind) {
    case LayerKind::LinearNoBias:
      return {&weight};
    case LayerKind::LayerNorm:
      return {&gain, &shift};
    default:
      return {};
  }
}

LayerSpec make_linear(const std::string& name, Index in_dim, Index out_dim, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
  return make_linear(name, uniform_matrix(in_dim, out_dim, rng, -bound, bound));
}

LayerSpec make_linear(const std::string& name, Matrix weight) {
  LayerSpec l;
  l.kind = LayerKind::LinearNoBias;
  l.in_dim = weight.rows();
  l.out_dim = weight.cols();
  l.weight = Parameter(name, std::move(weight));
  return l;
}

LayerSpec make_layer_norm(const std::string& name, Index dim) {
  LayerSpec l;
  l.kind = LayerKind::LayerNorm;
  l.in_dim = dim;
  l.out_dim = dim;
  l.gain = Parameter(name + ".gain", Matrix::Ones(1, dim));
  l.shift = Parameter(name + ".shift", Matrix::Zero(1, dim));
  return l;
}

LayerSpec make_activation(LayerKind kind, Index dim) {
  if (kind != LayerKind::Tanh && kind != LayerKind::Relu) {
    throw UsageError("make_activation: not an activation kind");
  }
  LayerSpec l;
  l.kind = kind;
  l.in_dim = dim;
  l.out_dim = dim;
  return l;
}

Var apply_layer(Tape& tape, LayerSpec& layer, Var x) {
  if (x.cols() != layer.in_dim) {
    throw DimensionError("apply_layer: input width " + std::to_string(x.cols()) +
                         " but layer expects " + std::to_string(layer.in_dim));
  }
  switch (layer.kind) {
    case LayerKind::LinearNoBias:
      return matmul(x, tape.parameter(layer.weight));
    case LayerKind::LayerNorm: {
      Var n = normalize_rows(x, kLayerNormEps);
      return add_row(mul_row(n, tape.parameter(layer.gain)), tape.parameter(layer.shift));
    }
    case LayerKind::Tanh:
      return tanh(x);
    case LayerKind::Relu:
      return relu(x);
  }
  throw UsageError("apply_layer: unknown layer kind");
}

Var apply_layers(Tape& tape, std::vector<LayerSpec>& layers, Var x) {
  for (LayerSpec& l : layers) x = apply_layer(tape, l, x);
  return x;
}

}  // namespace abx
