#pragma once

// End-to-end slide-level training: sampled views -> encoder -> aggregator ->
// bias-free task head -> cross-entropy, optimized jointly with Adam/AdamW
// under a cosine schedule.

#include "abx/aggregators.hpp"
#include "abx/config.hpp"
#include "abx/layers.hpp"
#include "abx/sampling.hpp"
#include "abx/synth_data.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace abx {

struct PipelineConfig {
  Index raw_dim = 16;
  Index encoder_hidden = 32;
  AggregatorConfig aggregator;
  Index classes = 2;
  bool frozen_encoder = false;
};

PipelineConfig pipeline_config(const RunConfig& config);

struct Pipeline {
  PipelineConfig config;
  // linear(d_raw -> hidden), relu, linear(hidden -> D), layer-norm
  std::vector<LayerSpec> encoder;
  AggregatorParams aggregator;
  LayerSpec head;  // bias-free D -> C

  std::vector<Parameter*> parameters();
  // parameters() minus the encoder when it is frozen.
  std::vector<Parameter*> trainable_parameters();
};

Pipeline make_pipeline(const PipelineConfig& config, Rng& rng);

Var encoder_forward(Tape& tape, Var views, Pipeline& pipeline);
Var task_logits(Tape& tape, Var slide_feature, LayerSpec& head);
Var task_loss(Tape& tape, Var slide_feature, LayerSpec& head, int label);

struct BagForward {
  Var logits;
  Var loss;
  AttentionReport report;
};

BagForward forward_bag(Tape& tape, Pipeline& pipeline, const Matrix& views, int label);

// ---- optimization ---------------------------------------------------------

struct AdamHyper {
  OptimizerKind kind = OptimizerKind::AdamW;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, Matrix> first;
  std::map<std::string, Matrix> second;
};

// Bias-corrected Adam. AdamW decays weights directly (decoupled); Adam adds
// weight_decay * theta to the gradient (coupled L2).
void adamw_step(std::span<Parameter* const> params, AdamState& state, const AdamHyper& hyper);

// base * 0.5 * (1 + cos(pi * step / total)), no warmup.
double cosine_lr(Index step, Index total_steps, double base_lr);

// ---- training -------------------------------------------------------------

struct RunRecord {
  Index epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double acc = 0.0;
  double auc = 0.0;  // NaN when an epoch saw a single class
  double sparsity = 0.0;
  double risk_mean = 0.0;
  double alpha = 0.0;
  std::string variant;
};

nlohmann::json to_json(const RunRecord& r);

struct Checkpoint {
  std::uint32_t version = 1;
  std::string config_json;
  std::uint32_t epoch = 0;
  std::int64_t optimizer_step = 0;
  std::string rng_state;
  std::vector<std::pair<std::string, Matrix>> arrays;
};

struct TrainResult {
  Pipeline pipeline;
  AdamState optimizer;
  std::vector<RunRecord> records;
  Checkpoint checkpoint;
};

// Draws one training bag according to the sampling strategy.
std::vector<SampledInstance> sample_bag(const Slide& slide, const SamplingConfig& sampling,
                                        const DatasetConfig& data, Index count, Rng& rng);

using EpochCallback = std::function<void(const RunRecord&)>;

// Throws DivergenceError (naming the slide) on a non-finite loss.
TrainResult train(const RunConfig& config, const Dataset& dataset, const EpochCallback& on_epoch = {});

struct SlideScore {
  int id = 0;
  int label = 0;
  Vector probabilities;
  Vector attention;  // pooled post-softmax attention over the evaluated bag
  std::vector<SampledInstance> picks;
  double sparsity = 0.0;
  double risk = 0.0;
};

struct EvalResult {
  std::vector<SlideScore> slides;

  std::vector<int> labels() const;
  Matrix probabilities() const;
};

// Evaluation bag per slide: every instance at every sampled scale when
// eval_samples is 0 or covers the slide, else a seeded draw keyed on the slide
// id (so results do not depend on slide order).
EvalResult evaluate(Pipeline& pipeline, std::span<const Slide> slides, const RunConfig& config);

// ---- checkpoints ----------------------------------------------------------

// "ABXC" | u32 version | str config | u32 epoch | i64 optimizer step | str rng |
// u32 n | n x (str name | u32 rows | u32 cols | f64 row-major data). Strings are
// u32 length + bytes; everything little-endian.
Checkpoint make_checkpoint(const RunConfig& config, Pipeline& pipeline, const AdamState& optimizer,
                           std::uint32_t epoch, const Rng& rng);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);
RunConfig checkpoint_config(const Checkpoint& checkpoint);
Pipeline restore_pipeline(const Checkpoint& checkpoint);
AdamState restore_optimizer(const Checkpoint& checkpoint);

// One row per instance: slide_id, instance_id, role, then D encoder features
// of the scale-0 view. Tab-separated with a header; %.17g floats.
void export_features(Pipeline& pipeline, std::span<const Slide> slides,
                     const std::filesystem::path& path);

}  // namespace abx
