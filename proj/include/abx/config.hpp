#pragma once

// Run configuration: one JSON document with sections data, sampling, model,
// train, eval, paths and a top-level seed. Unknown keys are rejected.

#include "abx/aggregators.hpp"
#include "abx/synth_data.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace abx {

enum class SamplingStrategy { Random, Mris, Regional };
enum class OptimizerKind { Adam, AdamW };

std::string to_string(SamplingStrategy s);
std::string to_string(OptimizerKind k);
SamplingStrategy parse_sampling_strategy(std::string_view s);
OptimizerKind parse_optimizer(std::string_view s);

struct SamplingConfig {
  Index count = 64;
  // Per-scale ratios; empty means uniform over the dataset's scales.
  std::vector<double> ratios;
  SamplingStrategy strategy = SamplingStrategy::Mris;
};

struct ModelConfig {
  Variant variant = Variant::Abmilx;
  Index dim = 32;
  Index heads = 8;
  Index hidden = 128;
  Index proj_dim = 0;
  Index encoder_hidden = 32;
  AlphaMode alpha = AlphaMode::Learnable;
  bool ffn = false;
  bool frozen_encoder = false;
};

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  Index epochs = 30;
  Index batch_size = 1;

  void validate() const;
};

// Presets: grading-style (Adam, 2e-4, wd 1e-5) and subtyping-style (AdamW, 8e-5, wd 0).
TrainConfig grading_preset();
TrainConfig subtyping_preset();

struct EvalConfig {
  // Instances per slide at evaluation; 0 or >= slide size means the whole slide.
  Index eval_samples = 0;
  Index bootstrap = 1000;
};

struct PathsConfig {
  std::string dataset = "data";
  std::string checkpoint = "model.abxc";
  std::string log = "train.jsonl";
  std::string output = "out";
};

struct RunConfig {
  DatasetConfig data;
  SamplingConfig sampling;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  PathsConfig paths;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const DatasetConfig& c);
DatasetConfig dataset_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
// Missing keys keep their defaults; unknown keys throw ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// Applies "section.key=value" (value parsed as JSON, else taken as a string).
void apply_override(RunConfig& config, std::string_view assignment);

AggregatorConfig aggregator_config(const ModelConfig& model);

}  // namespace abx
