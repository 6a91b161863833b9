#include "abx/trainer.hpp"

#include "abx/analysis.hpp"
#include "abx/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace abx {

PipelineConfig pipeline_config(const RunConfig& config) {
  PipelineConfig p;
  p.raw_dim = config.data.raw_dim;
  p.encoder_hidden = config.model.encoder_hidden;
  p.aggregator = aggregator_config(config.model);
  p.classes = config.data.classes;
  p.frozen_encoder = config.model.frozen_encoder;
  return p;
}

std::vector<Parameter*> Pipeline::parameters() {
  std::vector<Parameter*> out;
  for (LayerSpec& l : encoder)
    for (Parameter* p : l.parameters()) out.push_back(p);
  for (Parameter* p : aggregator.parameters()) out.push_back(p);
  out.push_back(&head.weight);
  return out;
}

std::vector<Parameter*> Pipeline::trainable_parameters() {
  if (!config.frozen_encoder) return parameters();
  std::vector<Parameter*> out;
  for (Parameter* p : aggregator.parameters()) out.push_back(p);
  out.push_back(&head.weight);
  return out;
}

Pipeline make_pipeline(const PipelineConfig& config, Rng& rng) {
  config.aggregator.validate();
  Pipeline p;
  p.config = config;
  const Index d = config.aggregator.input_dim;
  p.encoder.push_back(make_linear("encoder.fc1", config.raw_dim, config.encoder_hidden, rng));
  p.encoder.push_back(make_activation(LayerKind::Relu, config.encoder_hidden));
  p.encoder.push_back(make_linear("encoder.fc2", config.encoder_hidden, d, rng));
  p.encoder.push_back(make_layer_norm("encoder.norm", d));
  p.aggregator = make_aggregator(config.aggregator, rng);
  p.head = make_linear("head", d, config.classes, rng);
  return p;
}

Var encoder_forward(Tape& tape, Var views, Pipeline& pipeline) {
  return apply_layers(tape, pipeline.encoder, views);
}

Var task_logits(Tape& tape, Var slide_feature, LayerSpec& head) {
  return apply_layer(tape, head, slide_feature);
}

Var task_loss(Tape& tape, Var slide_feature, LayerSpec& head, int label) {
  return cross_entropy(task_logits(tape, slide_feature, head), label);
}

BagForward forward_bag(Tape& tape, Pipeline& pipeline, const Matrix& views, int label) {
  Var e = encoder_forward(tape, tape.constant(views), pipeline);
  AggregateOutput agg = aggregate_forward(tape, e, pipeline.aggregator);
  BagForward out;
  out.logits = task_logits(tape, agg.slide_feature, pipeline.head);
  out.loss = cross_entropy(out.logits, label);
  out.report = std::move(agg.report);
  return out;
}

void adamw_step(std::span<Parameter* const> params, AdamState& state, const AdamHyper& h) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) {
      throw DimensionError("adamw_step: gradient " + shape_string(p->grad) + " for parameter " +
                           p->name + " " + shape_string(p->value));
    }
    Matrix& m = state.first[p->name];
    Matrix& v = state.second[p->name];
    if (m.size() == 0) m = Matrix::Zero(p->value.rows(), p->value.cols());
    if (v.size() == 0) v = Matrix::Zero(p->value.rows(), p->value.cols());
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
      throw DimensionError("adamw_step: optimizer state shape mismatch for " + p->name);
    }
    Matrix g = p->grad;
    if (h.kind == OptimizerKind::Adam && h.weight_decay != 0.0) g += h.weight_decay * p->value;
    m = h.beta1 * m + (1.0 - h.beta1) * g;
    v = h.beta2 * v + (1.0 - h.beta2) * g.cwiseProduct(g);
    if (h.kind == OptimizerKind::AdamW && h.weight_decay != 0.0) {
      p->value -= (h.lr * h.weight_decay) * p->value;
    }
    const Matrix m_hat = m / c1;
    const Matrix v_hat = v / c2;
    p->value.array() -= h.lr * m_hat.array() / (v_hat.array().sqrt() + h.eps);
  }
}

double cosine_lr(Index step, Index total_steps, double base_lr) {
  if (total_steps <= 0) return base_lr;
  const double frac = static_cast<double>(std::clamp<Index>(step, 0, total_steps)) /
                      static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j;
  j["type"] = "epoch";
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["loss"] = r.loss;
  j["acc"] = r.acc;
  j["auc"] = std::isfinite(r.auc) ? nlohmann::json(r.auc) : nlohmann::json(nullptr);
  j["sparsity"] = r.sparsity;
  j["risk_mean"] = r.risk_mean;
  j["alpha"] = r.alpha;
  j["variant"] = r.variant;
  return j;
}

std::vector<SampledInstance> sample_bag(const Slide& slide, const SamplingConfig& sampling,
                                        const DatasetConfig& data, Index count, Rng& rng) {
  switch (sampling.strategy) {
    case SamplingStrategy::Random: {
      const double whole[] = {1.0};
      return mris_sample(slide, mris_plan(count, whole), rng);
    }
    case SamplingStrategy::Mris: {
      std::vector<double> ratios = sampling.ratios;
      if (ratios.empty()) ratios.assign(static_cast<std::size_t>(slide.scales()), 1.0 / static_cast<double>(slide.scales()));
      return mris_sample(slide, mris_plan(count, ratios), rng);
    }
    case SamplingStrategy::Regional:
      return regional_random_sample(slide, data.regions(), count, rng);
  }
  throw UsageError("sample_bag: unknown strategy");
}

namespace {

std::vector<Index> noisy_positions(const Slide& slide, std::span<const SampledInstance> picks) {
  std::vector<Index> out;
  for (std::size_t k = 0; k < picks.size(); ++k) {
    if (slide.roles[static_cast<std::size_t>(picks[k].instance)] == Role::Noisy) out.push_back(static_cast<Index>(k));
  }
  return out;
}

Vector softmax_row(const Matrix& logits) {
  Vector z = logits.row(0).transpose();
  Vector e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

double safe_auc(const std::vector<int>& labels, const Matrix& probs) {
  for (int l : labels)
    if (l != labels.front()) return compute_metric(labels, probs, MetricKind::Auc);
  return std::numeric_limits<double>::quiet_NaN();
}

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

TrainResult train(const RunConfig& config, const Dataset& dataset, const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.train.empty()) throw UsageError("train: dataset has no training slides");
  PipelineConfig pc = pipeline_config(config);
  pc.raw_dim = dataset.config.raw_dim;
  pc.classes = dataset.config.classes;

  Rng init_rng(derive_seed(config.seed, 1));
  Rng rng(derive_seed(config.seed, 2));
  TrainResult result{make_pipeline(pc, init_rng), {}, {}, {}};
  Pipeline& pipeline = result.pipeline;

  const TrainConfig& tc = config.train;
  const auto n_train = static_cast<Index>(dataset.train.size());
  const Index steps_per_epoch = (n_train + tc.batch_size - 1) / tc.batch_size;
  const Index total_steps = steps_per_epoch * tc.epochs;
  AdamHyper hyper;
  hyper.kind = tc.optimizer;
  hyper.weight_decay = tc.weight_decay;

  std::vector<Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), Index{0});
  Index step = 0;
  for (Index epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, sparsity_sum = 0.0, risk_sum = 0.0;
    std::vector<int> labels;
    Matrix probs(n_train, pc.classes);
    double lr = tc.lr;

    for (Index start = 0; start < n_train; start += tc.batch_size) {
      const Index end = std::min(n_train, start + tc.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      lr = cosine_lr(step, total_steps, tc.lr);
      for (Parameter* p : pipeline.parameters()) p->zero_grad();

      for (Index k = start; k < end; ++k) {
        const Slide& slide = dataset.train[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
        const std::vector<SampledInstance> picks =
            sample_bag(slide, config.sampling, dataset.config, config.sampling.count, rng);
        Tape tape;
        BagForward fwd;
        try {
          fwd = forward_bag(tape, pipeline, gather_views(slide, picks), slide.label);
          tape.backward(scale(fwd.loss, inv_batch));
        } catch (const NumericError& e) {
          throw DivergenceError(std::string("training diverged on slide ") + std::to_string(slide.id) +
                                    ": " + e.what(),
                                slide.id);
        }
        const double loss = fwd.loss.value()(0, 0);
        loss_sum += loss;
        labels.push_back(slide.label);
        probs.row(static_cast<Index>(labels.size()) - 1) = softmax_row(fwd.logits.value()).transpose();
        sparsity_sum += sparsity_score(fwd.report.pooled);
        const std::vector<Index> noisy = noisy_positions(slide, picks);
        risk_sum += multi_head_risk(fwd.report.attention, noisy).risk;
      }
      hyper.lr = lr;
      std::vector<Parameter*> params = pipeline.trainable_parameters();
      adamw_step(params, result.optimizer, hyper);
      ++step;
    }

    RunRecord r;
    r.epoch = epoch;
    r.lr = lr;
    const double n = static_cast<double>(n_train);
    r.loss = loss_sum / n;
    r.acc = compute_metric(labels, probs, MetricKind::Accuracy);
    r.auc = safe_auc(labels, probs);
    r.sparsity = sparsity_sum / n;
    r.risk_mean = risk_sum / n;
    r.alpha = pipeline.aggregator.config.variant == Variant::Abmilx &&
                      pipeline.aggregator.config.alpha_mode != AlphaMode::FixedZero
                  ? pipeline.aggregator.alpha.value(0, 0)
                  : 0.0;
    r.variant = to_string(pipeline.aggregator.config.variant);
    result.records.push_back(r);
    if (on_epoch) on_epoch(r);
  }
  result.checkpoint = make_checkpoint(config, pipeline, result.optimizer,
                                      static_cast<std::uint32_t>(tc.epochs), rng);
  return result;
}

std::vector<int> EvalResult::labels() const {
  std::vector<int> out;
  for (const SlideScore& s : slides) out.push_back(s.label);
  return out;
}

Matrix EvalResult::probabilities() const {
  if (slides.empty()) return Matrix(0, 0);
  Matrix out(static_cast<Index>(slides.size()), slides.front().probabilities.size());
  for (std::size_t i = 0; i < slides.size(); ++i) out.row(static_cast<Index>(i)) = slides[i].probabilities.transpose();
  return out;
}

EvalResult evaluate(Pipeline& pipeline, std::span<const Slide> slides, const RunConfig& config) {
  EvalResult result;
  for (const Slide& slide : slides) {
    const Index n = slide.size();
    std::vector<SampledInstance> picks;
    const Index budget = config.eval.eval_samples;
    if (budget == 0 || budget >= n) {
      std::vector<Index> scales{0};
      if (config.sampling.strategy == SamplingStrategy::Mris) {
        scales.clear();
        for (Index j = 0; j < slide.scales(); ++j) {
          const bool used = config.sampling.ratios.empty() || config.sampling.ratios[static_cast<std::size_t>(j)] > 0.0;
          if (used) scales.push_back(j);
        }
      }
      for (Index j : scales)
        for (Index i = 0; i < n; ++i) picks.push_back({i, j});
    } else {
      Rng rng(derive_seed(config.seed ^ 0xE7A1ULL, static_cast<std::uint64_t>(slide.id)));
      DatasetConfig data;
      data.region_grid = 1;
      const auto top = static_cast<Index>(*std::max_element(slide.regions.begin(), slide.regions.end()));
      while (data.regions() <= top) ++data.region_grid;
      picks = sample_bag(slide, config.sampling, data, budget, rng);
    }
    Tape tape;
    BagForward fwd = forward_bag(tape, pipeline, gather_views(slide, picks), slide.label);
    SlideScore s;
    s.id = slide.id;
    s.label = slide.label;
    s.probabilities = softmax_row(fwd.logits.value());
    s.attention = fwd.report.pooled;
    s.sparsity = sparsity_score(fwd.report.pooled);
    s.risk = multi_head_risk(fwd.report.attention, noisy_positions(slide, picks)).risk;
    s.picks = std::move(picks);
    result.slides.push_back(std::move(s));
  }
  return result;
}

void export_features(Pipeline& pipeline, std::span<const Slide> slides, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write feature table " + path.string());
  const Index d = pipeline.config.aggregator.input_dim;
  os << "slide_id\tinstance_id\trole";
  for (Index c = 0; c < d; ++c) os << "\tf" << c;
  os << '\n';
  char buf[32];
  for (const Slide& slide : slides) {
    Tape tape;
    Var e = encoder_forward(tape, tape.constant(slide.views.front()), pipeline);
    const Matrix& f = e.value();
    for (Index i = 0; i < f.rows(); ++i) {
      os << slide.id << '\t' << i << '\t'
         << (slide.roles[static_cast<std::size_t>(i)] == Role::Discriminative ? "discriminative" : "noisy");
      for (Index c = 0; c < d; ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", f(i, c));
        os << '\t' << buf;
      }
      os << '\n';
    }
  }
  if (!os) throw IoError("write failed for " + path.string());
}

Checkpoint make_checkpoint(const RunConfig& config, Pipeline& pipeline, const AdamState& optimizer,
                           std::uint32_t epoch, const Rng& rng) {
  Checkpoint c;
  RunConfig echo = config;
  echo.data.raw_dim = pipeline.config.raw_dim;
  echo.data.classes = pipeline.config.classes;
  c.config_json = to_json(echo).dump();
  c.epoch = epoch;
  c.optimizer_step = optimizer.step;
  c.rng_state = rng_state(rng);
  for (Parameter* p : pipeline.parameters()) c.arrays.emplace_back(p->name, p->value);
  for (const auto& [name, m] : optimizer.first) c.arrays.emplace_back("adam.m." + name, m);
  for (const auto& [name, v] : optimizer.second) c.arrays.emplace_back("adam.v." + name, v);
  return c;
}

RunConfig checkpoint_config(const Checkpoint& checkpoint) {
  return run_config_from_json(nlohmann::json::parse(checkpoint.config_json));
}

Pipeline restore_pipeline(const Checkpoint& checkpoint) {
  const RunConfig config = checkpoint_config(checkpoint);
  Rng scratch(0);
  Pipeline p = make_pipeline(pipeline_config(config), scratch);
  std::map<std::string, const Matrix*> arrays;
  for (const auto& [name, m] : checkpoint.arrays) arrays[name] = &m;
  for (Parameter* param : p.parameters()) {
    auto it = arrays.find(param->name);
    if (it == arrays.end()) throw IoError("checkpoint is missing parameter " + param->name);
    const Matrix& m = *it->second;
    if (m.rows() != param->value.rows() || m.cols() != param->value.cols()) {
      throw DimensionError("checkpoint parameter " + param->name + " has shape " + shape_string(m) +
                           ", expected " + shape_string(param->value));
    }
    param->value = m;
    param->zero_grad();
  }
  return p;
}

AdamState restore_optimizer(const Checkpoint& checkpoint) {
  AdamState s;
  s.step = checkpoint.optimizer_step;
  for (const auto& [name, m] : checkpoint.arrays) {
    if (name.rfind("adam.m.", 0) == 0) s.first[name.substr(7)] = m;
    if (name.rfind("adam.v.", 0) == 0) s.second[name.substr(7)] = m;
  }
  return s;
}

}  // namespace abx
