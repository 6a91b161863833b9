#include "abx/config.hpp"

#include "abx/error.hpp"

#include <fstream>
#include <set>

namespace abx {

using nlohmann::json;

std::string to_string(SamplingStrategy s) {
  switch (s) {
    case SamplingStrategy::Random: return "random";
    case SamplingStrategy::Mris: return "mris";
    case SamplingStrategy::Regional: return "regional";
  }
  return "?";
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "adamw"; }

SamplingStrategy parse_sampling_strategy(std::string_view s) {
  if (s == "random") return SamplingStrategy::Random;
  if (s == "mris") return SamplingStrategy::Mris;
  if (s == "regional") return SamplingStrategy::Regional;
  throw ConfigError("sampling.strategy: unknown strategy '" + std::string(s) +
                    "' (random | mris | regional)");
}

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "adamw") return OptimizerKind::AdamW;
  throw ConfigError("train.optimizer: unknown optimizer '" + std::string(s) + "' (adam | adamw)");
}

TrainConfig grading_preset() {
  TrainConfig t;
  t.optimizer = OptimizerKind::Adam;
  t.lr = 2e-4;
  t.weight_decay = 1e-5;
  return t;
}

TrainConfig subtyping_preset() {
  TrainConfig t;
  t.optimizer = OptimizerKind::AdamW;
  t.lr = 8e-5;
  t.weight_decay = 0.0;
  return t;
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train.lr: must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay: must be non-negative");
  if (epochs < 1) throw ConfigError("train.epochs: must be at least 1");
  if (batch_size < 1) throw ConfigError("train.batch_size: must be at least 1");
}

void RunConfig::validate() const {
  data.validate();
  train.validate();
  aggregator_config(model).validate();
  if (sampling.count < 1) throw ConfigError("sampling.count: must be positive");
  if (!sampling.ratios.empty() && static_cast<Index>(sampling.ratios.size()) != data.scales) {
    throw ConfigError("sampling.ratios: expected " + std::to_string(data.scales) +
                      " ratios, one per scale");
  }
  if (model.encoder_hidden < 1) throw ConfigError("model.encoder_hidden: must be positive");
  if (eval.eval_samples < 0) throw ConfigError("eval.eval_samples: must be non-negative");
  if (eval.bootstrap < 1) throw ConfigError("eval.bootstrap: must be at least 1");
}

AggregatorConfig aggregator_config(const ModelConfig& model) {
  AggregatorConfig a;
  a.variant = model.variant;
  a.input_dim = model.dim;
  a.heads = model.variant == Variant::Abmilx ? model.heads : 1;
  a.hidden = model.hidden;
  a.proj_dim = model.proj_dim;
  a.alpha_mode = model.alpha;
  a.ffn = model.ffn;
  return a;
}

namespace {

void reject_unknown(const json& j, const std::string& section, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  std::set<std::string> names(known.begin(), known.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!names.count(it.key())) {
      throw ConfigError((section.empty() ? "" : section + ".") + it.key() + ": unknown key");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, const std::string& section, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

Index read_index(const json& j, const char* key, const std::string& section, Index fallback) {
  auto it = j.find(key);
  if (it == j.end()) return fallback;
  if (!it->is_number_integer()) throw ConfigError(section + "." + key + ": expected an integer");
  return it->get<Index>();
}

}  // namespace

void DatasetConfig::validate() const {
  if (slides < 1) throw ConfigError("data.slides: must be positive");
  if (min_instances < 1 || max_instances < min_instances) {
    throw ConfigError("data.min_instances: need 1 <= min_instances <= max_instances");
  }
  if (!(witness_rate > 0.0 && witness_rate <= 1.0)) {
    throw ConfigError("data.witness_rate: must lie in (0, 1], got " + std::to_string(witness_rate));
  }
  if (raw_dim < 1) throw ConfigError("data.raw_dim: must be positive");
  if (classes < 2) throw ConfigError("data.classes: need at least 2 classes");
  if (!(separation >= 0.0)) throw ConfigError("data.separation: must be non-negative");
  if (!(noise_sigma > 0.0)) throw ConfigError("data.noise_sigma: must be positive");
  if (region_grid < 1) throw ConfigError("data.region_grid: must be positive");
  if (scales < 1) throw ConfigError("data.scales: must be positive");
  if (background_components < 1) throw ConfigError("data.background_components: must be positive");
  if (!(view_noise >= 0.0)) throw ConfigError("data.view_noise: must be non-negative");
}

json to_json(const DatasetConfig& c) {
  return json{{"slides", c.slides},
              {"min_instances", c.min_instances},
              {"max_instances", c.max_instances},
              {"witness_rate", c.witness_rate},
              {"raw_dim", c.raw_dim},
              {"classes", c.classes},
              {"separation", c.separation},
              {"noise_sigma", c.noise_sigma},
              {"region_grid", c.region_grid},
              {"scales", c.scales},
              {"background_components", c.background_components},
              {"view_noise", c.view_noise},
              {"seed", c.seed}};
}

DatasetConfig dataset_config_from_json(const json& j) {
  const std::string s = "data";
  reject_unknown(j, s,
                 {"slides", "min_instances", "max_instances", "witness_rate", "raw_dim", "classes",
                  "separation", "noise_sigma", "region_grid", "scales", "background_components",
                  "view_noise", "seed"});
  DatasetConfig c;
  c.slides = read_index(j, "slides", s, c.slides);
  c.min_instances = read_index(j, "min_instances", s, c.min_instances);
  c.max_instances = read_index(j, "max_instances", s, c.max_instances);
  read(j, "witness_rate", s, c.witness_rate);
  c.raw_dim = read_index(j, "raw_dim", s, c.raw_dim);
  c.classes = read_index(j, "classes", s, c.classes);
  read(j, "separation", s, c.separation);
  read(j, "noise_sigma", s, c.noise_sigma);
  c.region_grid = read_index(j, "region_grid", s, c.region_grid);
  c.scales = read_index(j, "scales", s, c.scales);
  c.background_components = read_index(j, "background_components", s, c.background_components);
  read(j, "view_noise", s, c.view_noise);
  read(j, "seed", s, c.seed);
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["data"] = to_json(c.data);
  j["sampling"] = {{"count", c.sampling.count},
                   {"ratios", c.sampling.ratios},
                   {"strategy", to_string(c.sampling.strategy)}};
  j["model"] = {{"variant", to_string(c.model.variant)},
                {"dim", c.model.dim},
                {"heads", c.model.heads},
                {"hidden", c.model.hidden},
                {"proj_dim", c.model.proj_dim},
                {"encoder_hidden", c.model.encoder_hidden},
                {"alpha", to_string(c.model.alpha)},
                {"ffn", c.model.ffn},
                {"frozen_encoder", c.model.frozen_encoder}};
  j["train"] = {{"optimizer", to_string(c.train.optimizer)},
                {"lr", c.train.lr},
                {"weight_decay", c.train.weight_decay},
                {"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size}};
  j["eval"] = {{"eval_samples", c.eval.eval_samples}, {"bootstrap", c.eval.bootstrap}};
  j["paths"] = {{"dataset", c.paths.dataset},
                {"checkpoint", c.paths.checkpoint},
                {"log", c.paths.log},
                {"output", c.paths.output}};
  j["seed"] = c.seed;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  reject_unknown(j, "", {"data", "sampling", "model", "train", "eval", "paths", "seed"});
  RunConfig c;
  if (j.contains("data")) c.data = dataset_config_from_json(j["data"]);

  if (j.contains("sampling")) {
    const json& s = j["sampling"];
    const std::string n = "sampling";
    reject_unknown(s, n, {"count", "ratios", "strategy"});
    c.sampling.count = read_index(s, "count", n, c.sampling.count);
    read(s, "ratios", n, c.sampling.ratios);
    if (s.contains("strategy")) c.sampling.strategy = parse_sampling_strategy(s["strategy"].get<std::string>());
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    const std::string n = "model";
    reject_unknown(m, n, {"variant", "dim", "heads", "hidden", "proj_dim", "encoder_hidden", "alpha",
                          "ffn", "frozen_encoder"});
    if (m.contains("variant")) c.model.variant = parse_variant(m["variant"].get<std::string>());
    c.model.dim = read_index(m, "dim", n, c.model.dim);
    c.model.heads = read_index(m, "heads", n, c.model.heads);
    c.model.hidden = read_index(m, "hidden", n, c.model.hidden);
    c.model.proj_dim = read_index(m, "proj_dim", n, c.model.proj_dim);
    c.model.encoder_hidden = read_index(m, "encoder_hidden", n, c.model.encoder_hidden);
    if (m.contains("alpha")) c.model.alpha = parse_alpha_mode(m["alpha"].get<std::string>());
    read(m, "ffn", n, c.model.ffn);
    read(m, "frozen_encoder", n, c.model.frozen_encoder);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    const std::string n = "train";
    reject_unknown(t, n, {"optimizer", "lr", "weight_decay", "epochs", "batch_size", "preset"});
    if (t.contains("preset")) {
      const std::string p = t["preset"].get<std::string>();
      if (p == "grading") c.train = grading_preset();
      else if (p == "subtyping") c.train = subtyping_preset();
      else throw ConfigError("train.preset: unknown preset '" + p + "' (grading | subtyping)");
    }
    if (t.contains("optimizer")) c.train.optimizer = parse_optimizer(t["optimizer"].get<std::string>());
    read(t, "lr", n, c.train.lr);
    read(t, "weight_decay", n, c.train.weight_decay);
    c.train.epochs = read_index(t, "epochs", n, c.train.epochs);
    c.train.batch_size = read_index(t, "batch_size", n, c.train.batch_size);
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    const std::string n = "eval";
    reject_unknown(e, n, {"eval_samples", "bootstrap"});
    c.eval.eval_samples = read_index(e, "eval_samples", n, c.eval.eval_samples);
    c.eval.bootstrap = read_index(e, "bootstrap", n, c.eval.bootstrap);
  }
  if (j.contains("paths")) {
    const json& p = j["paths"];
    const std::string n = "paths";
    reject_unknown(p, n, {"dataset", "checkpoint", "log", "output"});
    read(p, "dataset", n, c.paths.dataset);
    read(p, "checkpoint", n, c.paths.checkpoint);
    read(p, "log", n, c.paths.log);
    read(p, "output", n, c.paths.output);
  }
  read(j, "seed", "seed", c.seed);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

void apply_override(RunConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "': expected key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json j = to_json(config);
  const auto dot = key.find('.');
  if (dot == std::string::npos) {
    if (!j.contains(key) || j[key].is_object()) throw ConfigError(key + ": unknown key");
    j[key] = value;
  } else {
    const std::string section = key.substr(0, dot);
    const std::string field = key.substr(dot + 1);
    if (!j.contains(section) || !j[section].is_object()) throw ConfigError(section + ": unknown section");
    if (!j[section].contains(field) && !(section == "train" && field == "preset")) {
      throw ConfigError(key + ": unknown key");
    }
    if (section == "train" && field == "preset") {
      // Presets carry optimizer, lr and weight decay; drop the echoed values.
      for (const char* k : {"optimizer", "lr", "weight_decay"}) j["train"].erase(k);
    }
    j[section][field] = value;
  }
  config = run_config_from_json(j);
}

}  // namespace abx
