#include "abx/aggregators.hpp"

#include "abx/error.hpp"

#include <cmath>

namespace abx {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Abmil: return "abmil";
    case Variant::Abmilx: return "abmilx";
    case Variant::Mean: return "mean";
    case Variant::GlobalAttn: return "global-attn";
  }
  return "?";
}

std::string to_string(AlphaMode m) {
  switch (m) {
    case AlphaMode::FixedZero: return "fixed-zero";
    case AlphaMode::FixedOne: return "fixed-one";
    case AlphaMode::Learnable: return "learnable";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  if (s == "abmil") return Variant::Abmil;
  if (s == "abmilx") return Variant::Abmilx;
  if (s == "mean") return Variant::Mean;
  if (s == "global-attn") return Variant::GlobalAttn;
  throw ConfigError("model.variant: unknown variant '" + std::string(s) +
                    "' (abmil | abmilx | mean | global-attn)");
}

AlphaMode parse_alpha_mode(std::string_view s) {
  if (s == "fixed-zero") return AlphaMode::FixedZero;
  if (s == "fixed-one") return AlphaMode::FixedOne;
  if (s == "learnable") return AlphaMode::Learnable;
  throw ConfigError("model.alpha: unknown alpha mode '" + std::string(s) +
                    "' (fixed-zero | fixed-one | learnable)");
}

void AggregatorConfig::validate() const {
  if (input_dim < 1) throw ConfigError("model.dim: must be positive");
  if (heads < 1) throw ConfigError("model.heads: must be positive");
  if (input_dim % heads != 0) {
    throw ConfigError("model.heads: dim " + std::to_string(input_dim) +
                      " is not divisible by head count " + std::to_string(heads));
  }
  const Index dp = proj_dim == 0 ? input_dim : proj_dim;
  if (dp < 1 || dp % heads != 0) {
    throw ConfigError("model.proj_dim: " + std::to_string(dp) +
                      " must be positive and divisible by the head count");
  }
  if (hidden < 1) throw ConfigError("model.hidden: must be positive");
  if (variant != Variant::Abmilx && heads != 1) {
    throw ConfigError("model.heads: only abmilx supports more than one head");
  }
  if (ffn && variant != Variant::Abmilx) throw ConfigError("model.ffn: only abmilx has an FFN");
}

std::vector<Parameter*> AggregatorParams::parameters() {
  std::vector<Parameter*> out = input_norm.parameters();
  auto append = [&out](std::vector<Parameter*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  switch (config.variant) {
    case Variant::Abmil:
      append(attn_in.parameters());
      append(attn_out.parameters());
      break;
    case Variant::Abmilx:
      append(attn_in.parameters());
      append(attn_out.parameters());
      if (config.alpha_mode != AlphaMode::FixedZero) {
        out.push_back(&wq);
        out.push_back(&wk);
      }
      if (config.alpha_mode == AlphaMode::Learnable) out.push_back(&alpha);
      if (config.ffn) {
        append(ffn_in.parameters());
        append(ffn_out.parameters());
      }
      break;
    case Variant::Mean:
      break;
    case Variant::GlobalAttn:
      out.push_back(&query);
      break;
  }
  return out;
}

AggregatorParams make_aggregator(const AggregatorConfig& config, Rng& rng) {
  config.validate();
  AggregatorParams p;
  p.config = config;
  const Index d = config.input_dim;
  p.input_norm = make_layer_norm("agg.norm", d);

  const Index score_width = config.variant == Variant::Abmilx ? config.head_dim() : d;
  p.attn_in = make_linear("agg.attn.in", score_width, config.hidden, rng);
  p.attn_act = make_activation(LayerKind::Tanh, config.hidden);
  p.attn_out = make_linear("agg.attn.out", config.hidden, 1, rng);

  const Index hw = config.head_dim();
  const Index pw = config.proj_head_dim();
  const double qk_bound = std::sqrt(6.0 / static_cast<double>(hw + pw));
  p.wq = Parameter("agg.wq", uniform_matrix(hw, pw, rng, -qk_bound, qk_bound));
  p.wk = Parameter("agg.wk", uniform_matrix(hw, pw, rng, -qk_bound, qk_bound));

  double a0 = config.alpha_init;
  if (config.alpha_mode == AlphaMode::FixedZero) a0 = 0.0;
  if (config.alpha_mode == AlphaMode::FixedOne) a0 = 1.0;
  p.alpha = Parameter("agg.alpha", Matrix::Constant(1, 1, a0));
  p.alpha.trainable = config.alpha_mode == AlphaMode::Learnable;

  const double q_bound = std::sqrt(6.0 / static_cast<double>(d + 1));
  p.query = Parameter("agg.query", uniform_matrix(1, d, rng, -q_bound, q_bound));

  if (config.ffn) {
    p.ffn_in = make_linear("agg.ffn.in", d, 4 * d, rng);
    p.ffn_out = make_linear("agg.ffn.out", 4 * d, d, rng);
  }
  return p;
}

namespace {

void require_bag(Var instances, const AggregatorParams& params, Variant expected, const char* op) {
  if (params.config.variant != expected) {
    throw UsageError(std::string(op) + ": params are for variant " + to_string(params.config.variant));
  }
  if (instances.rows() < 1) throw UsageError(std::string(op) + ": empty bag");
  if (instances.cols() != params.config.input_dim) {
    throw DimensionError(std::string(op) + ": instance width " + std::to_string(instances.cols()) +
                         " but aggregator expects " + std::to_string(params.config.input_dim));
  }
}

Vector column(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

void finish_report(AttentionReport& report) {
  report.pooled = Vector::Zero(report.bag_size);
  for (const Vector& a : report.attention) report.pooled += a;
  report.pooled /= static_cast<double>(report.attention.size());
}

}  // namespace

std::vector<Var> split_heads(Var instances, Index heads) {
  if (heads < 1 || instances.cols() % heads != 0) {
    throw ConfigError("split_heads: width " + std::to_string(instances.cols()) +
                      " is not divisible by head count " + std::to_string(heads));
  }
  const std::vector<Index> widths(static_cast<std::size_t>(heads), instances.cols() / heads);
  return split_last(instances, widths);
}

Var mhla_attention(Tape& tape, Var head, AggregatorParams& params) {
  Var h = apply_layer(tape, params.attn_in, head);
  h = apply_layer(tape, params.attn_act, h);
  return apply_layer(tape, params.attn_out, h);
}

Var attention_plus(Tape& tape, Var raw, Var head, Var alpha, AggregatorParams& params,
                   Matrix* similarity) {
  const Index pw = params.config.proj_head_dim();
  Var q = matmul(head, tape.parameter(params.wq));
  Var k = matmul(head, tape.parameter(params.wk));
  Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(pw)));
  Var u = softmax_rows(scores);
  if (similarity != nullptr) *similarity = u.value();
  return add(raw, scale_by(matmul(u, raw), alpha));
}

Var head_aggregate(std::span<const Var> refined, std::span<const Var> heads,
                   std::vector<Vector>* attention) {
  if (refined.size() != heads.size() || refined.empty()) {
    throw UsageError("head_aggregate: " + std::to_string(refined.size()) + " attention vectors for " +
                     std::to_string(heads.size()) + " heads");
  }
  std::vector<Var> pooled;
  pooled.reserve(heads.size());
  for (std::size_t j = 0; j < heads.size(); ++j) {
    if (refined[j].rows() != heads[j].rows() || refined[j].cols() != 1) {
      throw DimensionError("head_aggregate: attention " + shape_string(refined[j].value()) +
                           " does not match head " + shape_string(heads[j].value()));
    }
    Var weights = softmax_rows(transpose(refined[j]));  // 1 x s
    if (attention != nullptr) attention->push_back(column(weights.value()));
    pooled.push_back(matmul(weights, heads[j]));
  }
  return concat_last(pooled);
}

AggregateOutput abmil_forward(Tape& tape, Var instances, AggregatorParams& params) {
  require_bag(instances, params, Variant::Abmil, "abmil_forward");
  Var x = apply_layer(tape, params.input_norm, instances);
  Var a = mhla_attention(tape, x, params);
  Var weights = softmax_rows(transpose(a));
  AggregateOutput out;
  out.slide_feature = matmul(weights, x);
  out.report.bag_size = instances.rows();
  out.report.raw.push_back(column(a.value()));
  out.report.refined.push_back(column(a.value()));
  out.report.attention.push_back(column(weights.value()));
  finish_report(out.report);
  return out;
}

AggregateOutput abmilx_forward(Tape& tape, Var instances, AggregatorParams& params) {
  require_bag(instances, params, Variant::Abmilx, "abmilx_forward");
  const AggregatorConfig& cfg = params.config;
  const Index s = instances.rows();
  Var x = apply_layer(tape, params.input_norm, instances);
  std::vector<Var> heads = split_heads(x, cfg.heads);

  std::optional<Var> alpha;
  if (cfg.alpha_mode == AlphaMode::Learnable) alpha = tape.parameter(params.alpha);
  if (cfg.alpha_mode == AlphaMode::FixedOne) alpha = tape.constant(Matrix::Ones(1, 1));
  const bool keep_u = cfg.retain_similarity || s <= kSimilarityRetainLimit;

  AggregateOutput out;
  AttentionReport& report = out.report;
  report.bag_size = s;
  report.alpha = alpha ? alpha->value()(0, 0) : 0.0;

  std::vector<Var> refined;
  refined.reserve(heads.size());
  for (Var head : heads) {
    Var a = mhla_attention(tape, head, params);
    report.raw.push_back(column(a.value()));
    if (alpha) {
      Matrix u;
      Var g = attention_plus(tape, a, head, *alpha, params, keep_u ? &u : nullptr);
      if (keep_u) report.similarity.push_back(std::move(u));
      refined.push_back(g);
    } else {
      refined.push_back(a);
    }
    report.refined.push_back(column(refined.back().value()));
  }

  Var z = head_aggregate(refined, heads, &report.attention);
  if (cfg.ffn) {
    Var h = relu(apply_layer(tape, params.ffn_in, z));
    z = add(z, apply_layer(tape, params.ffn_out, h));
  }
  out.slide_feature = z;
  finish_report(report);
  return out;
}

AggregateOutput mean_pool_forward(Tape& tape, Var instances, AggregatorParams& params) {
  require_bag(instances, params, Variant::Mean, "mean_pool_forward");
  const Index s = instances.rows();
  Var x = apply_layer(tape, params.input_norm, instances);
  AggregateOutput out;
  out.slide_feature = mean_rows(x);
  out.report.bag_size = s;
  out.report.raw.push_back(Vector::Zero(s));
  out.report.refined.push_back(Vector::Zero(s));
  out.report.attention.push_back(Vector::Constant(s, 1.0 / static_cast<double>(s)));
  finish_report(out.report);
  return out;
}

AggregateOutput global_attention_pool_forward(Tape& tape, Var instances, AggregatorParams& params) {
  require_bag(instances, params, Variant::GlobalAttn, "global_attention_pool_forward");
  const double d = static_cast<double>(params.config.input_dim);
  Var x = apply_layer(tape, params.input_norm, instances);
  Var logits = scale(matmul(x, transpose(tape.parameter(params.query))), 1.0 / std::sqrt(d));
  Var weights = softmax_rows(transpose(logits));
  AggregateOutput out;
  out.slide_feature = matmul(weights, x);
  out.report.bag_size = instances.rows();
  out.report.raw.push_back(column(logits.value()));
  out.report.refined.push_back(column(logits.value()));
  out.report.attention.push_back(column(weights.value()));
  finish_report(out.report);
  return out;
}

AggregateOutput aggregate_forward(Tape& tape, Var instances, AggregatorParams& params) {
  switch (params.config.variant) {
    case Variant::Abmil: return abmil_forward(tape, instances, params);
    case Variant::Abmilx: return abmilx_forward(tape, instances, params);
    case Variant::Mean: return mean_pool_forward(tape, instances, params);
    case Variant::GlobalAttn: return global_attention_pool_forward(tape, instances, params);
  }
  throw UsageError("aggregate_forward: unknown variant");
}

Vector propagation_weights(const Matrix& similarity, const Vector& attention,
                           PropagationMode mode) {
  const Index s = similarity.rows();
  if (similarity.cols() != s || attention.size() != s) {
    throw DimensionError("propagation_weights: similarity " + shape_string(similarity) +
                         " with attention of length " + std::to_string(attention.size()));
  }
  for (Index r = 0; r < s; ++r) {
    const double row_sum = similarity.row(r).sum();
    if (std::abs(row_sum - 1.0) > 1e-6) {
      throw ValidationError("propagation_weights: row " + std::to_string(r) + " sums to " +
                            std::to_string(row_sum));
    }
  }
  if (mode == PropagationMode::Trans) return similarity.colwise().sum().transpose();
  return similarity.transpose() * attention;
}

}  // namespace abx
