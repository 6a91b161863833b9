#pragma once

// Attention-based MIL pooling: ABMIL, ABMILX (multi-head local attention with
// the correlation-based attention-plus refinement), mean pooling and a
// single-query global attention pool. Every forward returns the slide feature
// Z (1 x D) on the tape plus an AttentionReport of plain values.

#include "abx/layers.hpp"
#include "abx/random.hpp"
#include "abx/tensor.hpp"

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace abx {

enum class Variant { Abmil, Abmilx, Mean, GlobalAttn };
enum class AlphaMode { FixedZero, FixedOne, Learnable };

std::string to_string(Variant v);
std::string to_string(AlphaMode m);
Variant parse_variant(std::string_view s);
AlphaMode parse_alpha_mode(std::string_view s);

struct AggregatorConfig {
  Variant variant = Variant::Abmilx;
  Index input_dim = 32;  // D
  Index heads = 8;       // m; D % m == 0 is required
  Index hidden = 128;    // L, width of the attention MLP
  Index proj_dim = 0;    // D'; 0 means D
  AlphaMode alpha_mode = AlphaMode::Learnable;
  double alpha_init = 1.0;
  bool ffn = false;
  // U^j is kept in the report when s <= kSimilarityRetainLimit or when forced.
  bool retain_similarity = false;

  Index head_dim() const { return input_dim / heads; }
  Index proj_head_dim() const { return (proj_dim == 0 ? input_dim : proj_dim) / heads; }
  void validate() const;
};

inline constexpr Index kSimilarityRetainLimit = 4096;

struct AggregatorParams {
  AggregatorConfig config;
  LayerSpec input_norm;
  // Attention MLP: linear(width -> L), tanh, linear(L -> 1). For ABMILX the
  // width is D/m and the same weights score every head.
  LayerSpec attn_in;
  LayerSpec attn_act;
  LayerSpec attn_out;
  Parameter wq;      // (D/m) x (D'/m), shared across heads
  Parameter wk;      // (D/m) x (D'/m), shared across heads
  Parameter alpha;   // 1 x 1, trainable only in learnable mode
  Parameter query;   // 1 x D, global-attention pool only
  LayerSpec ffn_in;  // D -> 4D
  LayerSpec ffn_out; // 4D -> D

  // Parameters that take part in the forward pass of this variant.
  std::vector<Parameter*> parameters();
};

AggregatorParams make_aggregator(const AggregatorConfig& config, Rng& rng);

struct AttentionReport {
  Index bag_size = 0;
  std::vector<Vector> raw;        // A^j
  std::vector<Vector> refined;    // G(A^j)
  std::vector<Vector> attention;  // softmax over instances of G(A^j)
  std::vector<Matrix> similarity; // U^j, empty unless retained
  Vector pooled;                  // mean of the per-head attentions
  double alpha = 0.0;             // effective alpha for this pass (0 when A+ is absent)

  Index heads() const { return static_cast<Index>(attention.size()); }
};

struct AggregateOutput {
  Var slide_feature;
  AttentionReport report;
};

// Dispatches on params.config.variant.
AggregateOutput aggregate_forward(Tape& tape, Var instances, AggregatorParams& params);

AggregateOutput abmil_forward(Tape& tape, Var instances, AggregatorParams& params);
AggregateOutput abmilx_forward(Tape& tape, Var instances, AggregatorParams& params);
AggregateOutput mean_pool_forward(Tape& tape, Var instances, AggregatorParams& params);
AggregateOutput global_attention_pool_forward(Tape& tape, Var instances, AggregatorParams& params);

// Contiguous column blocks of width D/m.
std::vector<Var> split_heads(Var instances, Index heads);

// A^j = MLP(H^j), s x 1.
Var mhla_attention(Tape& tape, Var head, AggregatorParams& params);

// G(A^j) = A^j + alpha * U^j A^j with U^j = softmax_rows(Q K^T / sqrt(D'/m)).
// Writes U^j to `similarity` when non-null.
Var attention_plus(Tape& tape, Var raw, Var head, Var alpha, AggregatorParams& params,
                   Matrix* similarity = nullptr);

// Z = concat_j softmax(G(A^j))^T H^j. Appends per-head attentions to `attention` when non-null.
Var head_aggregate(std::span<const Var> refined, std::span<const Var> heads,
                   std::vector<Vector>* attention = nullptr);

enum class PropagationMode { Trans, Abx };

// Column-wise influence of each instance through U. Trans: P(i) = sum_k U[k,i].
// Abx: P(i) = sum_k A[k] U[k,i]. Throws ValidationError when U is not row-stochastic.
Vector propagation_weights(const Matrix& similarity, const Vector& attention,
                           PropagationMode mode);

}  // namespace abx
