#pragma once

#include "abx/random.hpp"
#include "abx/tensor.hpp"

#include <string>
#include <vector>

namespace abx {

// Fixed: the MIL literature's LayerNorm default, used for every norm here.
inline constexpr double kLayerNormEps = 1e-5;

enum class LayerKind { LinearNoBias, LayerNorm, Tanh, Relu };

// One layer of a bias-free MLP. Linear layers own `weight` (in x out);
// layer-norm owns `gain` and `shift` (1 x in); activations own nothing.
struct LayerSpec {
  LayerKind kind = LayerKind::Tanh;
  Index in_dim = 0;
  Index out_dim = 0;
  Parameter weight;
  Parameter gain;
  Parameter shift;

  std::vector<Parameter*> parameters();
};

// Glorot-uniform weights.
LayerSpec make_linear(const std::string& name, Index in_dim, Index out_dim, Rng& rng);
LayerSpec make_linear(const std::string& name, Matrix weight);
LayerSpec make_layer_norm(const std::string& name, Index dim);
LayerSpec make_activation(LayerKind kind, Index dim);

Var apply_layer(Tape& tape, LayerSpec& layer, Var x);
Var apply_layers(Tape& tape, std::vector<LayerSpec>& layers, Var x);

}  // namespace abx
