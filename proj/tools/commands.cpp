#include "commands.hpp"

#include "abx/analysis.hpp"
#include "abx/error.hpp"
#include "abx/gradcheck.hpp"
#include "abx/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

namespace abx::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t parse_seed(const std::string& text, const std::string& source) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used, 10);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError(source + ": expected an unsigned integer seed, got '" + text + "'");
  }
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  return os;
}

// Tables lead with one comment line carrying the resolved config.
std::ofstream open_table(const fs::path& path, const RunConfig& config) {
  std::ofstream os = open_output(path);
  os << "# config " << to_json(config).dump() << '\n';
  return os;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Dataset open_dataset(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) {
    throw ConfigError("paths.dataset: no dataset at '" + dir + "' (run gen-data first)");
  }
  return load_dataset(dir);
}

bool two_classes(const std::vector<int>& labels) {
  return std::any_of(labels.begin(), labels.end(), [&](int l) { return l != labels.front(); });
}

json interval(const BootstrapResult& b, double point) {
  return {{"point", point}, {"mean", b.mean}, {"lo", b.lo}, {"hi", b.hi}};
}

struct Metrics {
  double acc = 0.0;
  BootstrapResult acc_ci;
  double auc = std::numeric_limits<double>::quiet_NaN();
  BootstrapResult auc_ci;
  double sparsity = 0.0;
  double risk = 0.0;
};

Metrics summarize(const EvalResult& er, const RunConfig& config) {
  Metrics m;
  const std::vector<int> labels = er.labels();
  const Matrix probs = er.probabilities();
  Rng rng(derive_seed(config.seed, 3));
  m.acc = compute_metric(labels, probs, MetricKind::Accuracy);
  m.acc_ci = bootstrap_ci(labels, probs, MetricKind::Accuracy, config.eval.bootstrap, 0.95, rng);
  if (two_classes(labels)) {
    m.auc = compute_metric(labels, probs, MetricKind::Auc);
    m.auc_ci = bootstrap_ci(labels, probs, MetricKind::Auc, config.eval.bootstrap, 0.95, rng);
  }
  for (const SlideScore& s : er.slides) {
    m.sparsity += s.sparsity / static_cast<double>(er.slides.size());
    m.risk += s.risk / static_cast<double>(er.slides.size());
  }
  return m;
}

// Model, sampling and training come from the checkpoint; eval, paths and the
// data location from the command line.
struct Loaded {
  RunConfig config;
  Pipeline pipeline;
  Dataset dataset;
};

Loaded load_for_eval(const RunConfig& cli) {
  const Checkpoint ck = load_checkpoint(cli.paths.checkpoint);
  Loaded l{checkpoint_config(ck), restore_pipeline(ck), open_dataset(cli.paths.dataset)};
  l.config.eval = cli.eval;
  l.config.paths = cli.paths;
  if (l.dataset.config.raw_dim != l.pipeline.config.raw_dim) {
    throw DimensionError("checkpoint expects raw width " + std::to_string(l.pipeline.config.raw_dim) +
                         ", dataset has " + std::to_string(l.dataset.config.raw_dim));
  }
  if (l.dataset.config.classes != l.pipeline.config.classes) {
    throw DimensionError("checkpoint has " + std::to_string(l.pipeline.config.classes) +
                         " classes, dataset has " + std::to_string(l.dataset.config.classes));
  }
  return l;
}

std::vector<Index> noisy_positions(const Slide& slide, const std::vector<SampledInstance>& picks) {
  std::vector<Index> out;
  for (std::size_t k = 0; k < picks.size(); ++k)
    if (slide.roles[static_cast<std::size_t>(picks[k].instance)] == Role::Noisy) out.push_back(static_cast<Index>(k));
  return out;
}

Vector softmax(const Vector& z) {
  Vector e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

RunConfig resolve_config(const CommonOptions& options) {
  RunConfig c = options.config_path.empty() ? RunConfig{} : load_run_config(options.config_path);
  if (const char* env = std::getenv("ABX_SEED"); env != nullptr && *env != '\0') {
    c.seed = c.data.seed = parse_seed(env, "ABX_SEED");
  }
  for (const std::string& o : options.overrides) apply_override(c, o);
  if (options.variant) c.model.variant = parse_variant(*options.variant);
  if (options.seed) c.seed = c.data.seed = *options.seed;
  c.validate();
  return c;
}

int cmd_gen_data(const RunConfig& config, bool force, std::ostream& out) {
  const Dataset ds = make_dataset(config.data);
  save_dataset(config.paths.dataset, ds, force);
  const Manifest& m = ds.manifest;
  json summary{{"type", "dataset"},
               {"config", to_json(config)},
               {"path", config.paths.dataset},
               {"train", ds.train.size()},
               {"test", ds.test.size()},
               {"train_class_counts", m.train_class_counts},
               {"test_class_counts", m.test_class_counts},
               {"discriminative_instances", m.discriminative_instances},
               {"noisy_instances", m.noisy_instances}};
  out << summary.dump() << '\n';
  return kExitOk;
}

int cmd_train(const RunConfig& cli, std::ostream& out) {
  const Dataset ds = open_dataset(cli.paths.dataset);
  RunConfig config = cli;
  config.data = ds.config;
  config.validate();

  std::ofstream log = open_output(config.paths.log);
  log << json{{"type", "config"}, {"config", to_json(config)}}.dump() << '\n';
  TrainResult result;
  try {
    result = train(config, ds, [&](const RunRecord& r) {
      log << to_json(r).dump() << '\n';
      log.flush();
    });
  } catch (const DivergenceError& e) {
    log << json{{"type", "divergence"}, {"slide_id", e.slide_id()}, {"message", e.what()}}.dump() << '\n';
    throw;
  }
  save_checkpoint(config.paths.checkpoint, result.checkpoint);
  const RunRecord& last = result.records.back();
  const json summary{{"type", "summary"},
                     {"epochs", result.records.size()},
                     {"loss", last.loss},
                     {"acc", last.acc},
                     {"risk_mean", last.risk_mean},
                     {"alpha", last.alpha},
                     {"checkpoint", config.paths.checkpoint}};
  log << summary.dump() << '\n';
  out << summary.dump() << '\n';
  return kExitOk;
}

int cmd_eval(const RunConfig& cli, std::ostream& out) {
  Loaded l = load_for_eval(cli);
  const EvalResult er = evaluate(l.pipeline, l.dataset.test, l.config);
  const Metrics m = summarize(er, l.config);

  json metrics{{"type", "metrics"},
               {"config", to_json(l.config)},
               {"split", "test"},
               {"slides", er.slides.size()},
               {"bootstrap", l.config.eval.bootstrap},
               {"acc", interval(m.acc_ci, m.acc)},
               {"auc", std::isfinite(m.auc) ? interval(m.auc_ci, m.auc) : json(nullptr)},
               {"sparsity", m.sparsity},
               {"risk", m.risk}};
  const fs::path dir(l.config.paths.output);
  open_output(dir / "metrics.json") << metrics.dump(2) << '\n';

  std::ofstream pred = open_table(dir / "predictions.tsv", l.config);
  pred << "slide_id\tlabel";
  for (Index c = 0; c < l.pipeline.config.classes; ++c) pred << "\tp" << c;
  pred << "\tsparsity\trisk\n";
  for (const SlideScore& s : er.slides) {
    pred << s.id << '\t' << s.label;
    for (Index c = 0; c < s.probabilities.size(); ++c) pred << '\t' << fmt(s.probabilities(c));
    pred << '\t' << fmt(s.sparsity) << '\t' << fmt(s.risk) << '\n';
  }

  out << std::fixed << std::setprecision(4) << "acc " << m.acc << " [" << m.acc_ci.lo << ", " << m.acc_ci.hi
      << "]";
  if (std::isfinite(m.auc)) out << "  auc " << m.auc << " [" << m.auc_ci.lo << ", " << m.auc_ci.hi << "]";
  out << "  sparsity " << std::setprecision(2) << m.sparsity << "  risk " << std::setprecision(4) << m.risk
      << '\n';
  out.unsetf(std::ios::floatfield);
  return kExitOk;
}

int cmd_analyze(const RunConfig& cli, std::ostream& out) {
  Loaded l = load_for_eval(cli);
  const EvalResult er = evaluate(l.pipeline, l.dataset.test, l.config);
  const fs::path dir(l.config.paths.output);
  const bool has_alpha = l.pipeline.config.aggregator.variant == Variant::Abmilx &&
                         l.pipeline.config.aggregator.alpha_mode != AlphaMode::FixedZero;
  const bool decomposable = l.pipeline.config.aggregator.variant == Variant::Abmilx;

  std::ofstream records = open_output(dir / "analysis.jsonl");
  records << json{{"type", "config"}, {"config", to_json(l.config)}}.dump() << '\n';
  std::ofstream hist = open_table(dir / "histogram.tsv", l.config);
  hist << "slide_id\tbin\tlo\thi\tcount\n";

  double sparsity_sum = 0.0, risk_sum = 0.0, lambda_sum = 0.0;
  Index lambda_count = 0;
  for (std::size_t k = 0; k < er.slides.size(); ++k) {
    const SlideScore& score = er.slides[k];
    const Slide& slide = l.dataset.test[k];
    Tape tape;
    const BagForward fwd = forward_bag(tape, l.pipeline, gather_views(slide, score.picks), slide.label);
    const AttentionReport& rep = fwd.report;
    const std::vector<Index> noisy = noisy_positions(slide, score.picks);
    const RiskReport risk = multi_head_risk(rep.attention, noisy);

    json rec{{"type", "slide"},
             {"id", slide.id},
             {"label", slide.label},
             {"bag_size", rep.bag_size},
             {"sparsity", score.sparsity},
             {"risk", risk.risk},
             {"risk_bound", risk.bound},
             {"head_risks", risk.head_risks}};

    // Worst noisy instance under the unrefined attention, over all heads.
    // Without A+ the similarity is never formed; at alpha = 0 any stochastic U gives lambda = 1.
    const bool have_u = !rep.similarity.empty() || rep.alpha == 0.0;
    if (decomposable && !noisy.empty() && have_u) {
      std::size_t head = 0;
      Index worst = -1;
      double original = -1.0;
      for (std::size_t j = 0; j < rep.raw.size(); ++j) {
        const Vector a = softmax(rep.raw[j]);
        for (Index i : noisy)
          if (a(i) > original) {
            original = a(i);
            head = j;
            worst = i;
          }
      }
      const Matrix u = rep.similarity.empty() ? Matrix::Identity(rep.bag_size, rep.bag_size) : rep.similarity[head];
      const Decomposition d = decompose_refined_attention(rep.raw[head], u, rep.alpha, worst);
      json dec{{"head", head}, {"instance", worst}, {"original_risk", d.original}, {"product", d.product},
               {"refined", d.refined}};
      if (has_alpha) {
        dec["lambda"] = d.lambda;
        lambda_sum += d.lambda;
        ++lambda_count;
      }
      rec["decomposition"] = dec;
    }
    records << rec.dump() << '\n';
    sparsity_sum += score.sparsity;
    risk_sum += risk.risk;

    const Histogram h = attention_histogram(score.attention, 10);
    for (std::size_t b = 0; b < h.counts.size(); ++b)
      hist << slide.id << '\t' << b << '\t' << fmt(h.edges[b]) << '\t' << fmt(h.edges[b + 1]) << '\t' << h.counts[b]
           << '\n';
  }

  const double n = static_cast<double>(std::max<std::size_t>(er.slides.size(), 1));
  json summary{{"type", "summary"}, {"slides", er.slides.size()}, {"sparsity", sparsity_sum / n}, {"risk", risk_sum / n}};
  if (lambda_count > 0) summary["lambda"] = lambda_sum / static_cast<double>(lambda_count);
  records << summary.dump() << '\n';

  // Feature table: library export, then the config comment prepended.
  const fs::path features = dir / "features.tsv";
  export_features(l.pipeline, l.dataset.test, features);
  std::stringstream body;
  body << std::ifstream(features).rdbuf();
  open_table(features, l.config) << body.str();

  out << summary.dump() << '\n';
  return kExitOk;
}

std::vector<std::string> default_sweep_values(const std::string& axis) {
  if (axis == "m") return {"2", "4", "8", "16"};
  if (axis == "alpha-mode") return {"fixed-zero", "fixed-one", "learnable"};
  if (axis == "sample-count") return {"64", "128", "512"};
  if (axis == "sampling-strategy") return {"random", "mris", "regional"};
  if (axis == "ffn") return {"off", "on"};
  throw ConfigError("sweep axis '" + axis + "': expected m | alpha-mode | sample-count | sampling-strategy | ffn");
}

namespace {

void apply_axis(RunConfig& c, const std::string& axis, const std::string& value) {
  if (axis == "m") return apply_override(c, "model.heads=" + value);
  if (axis == "alpha-mode") return apply_override(c, "model.alpha=\"" + value + "\"");
  if (axis == "sample-count") return apply_override(c, "sampling.count=" + value);
  if (axis == "sampling-strategy") return apply_override(c, "sampling.strategy=\"" + value + "\"");
  if (axis == "ffn") {
    if (value == "on" || value == "true") return apply_override(c, "model.ffn=true");
    if (value == "off" || value == "false") return apply_override(c, "model.ffn=false");
    throw ConfigError("sweep ffn value '" + value + "': expected on | off");
  }
  default_sweep_values(axis);
}

struct SweepRow {
  Metrics metrics;
  double train_risk = 0.0;
  bool diverged = false;
  std::exception_ptr error;
};

}  // namespace

int cmd_sweep(const RunConfig& cli, const SweepOptions& options, std::ostream& out) {
  const std::vector<std::string> values =
      options.values.empty() ? default_sweep_values(options.axis) : options.values;
  const Dataset ds = open_dataset(cli.paths.dataset);

  std::vector<RunConfig> runs;
  for (std::size_t k = 0; k < values.size(); ++k) {
    RunConfig c = cli;
    c.data = ds.config;
    apply_axis(c, options.axis, values[k]);
    c.seed = derive_seed(cli.seed, k);
    c.validate();
    runs.push_back(c);
  }

  std::vector<SweepRow> rows(runs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < runs.size(); k = next++) {
      try {
        TrainResult tr = train(runs[k], ds);
        for (const RunRecord& r : tr.records) rows[k].train_risk += r.risk_mean / static_cast<double>(tr.records.size());
        rows[k].metrics = summarize(evaluate(tr.pipeline, ds.test, runs[k]), runs[k]);
      } catch (const DivergenceError&) {
        rows[k].diverged = true;
      } catch (...) {
        rows[k].error = std::current_exception();
      }
    }
  };
  const unsigned jobs = std::clamp<unsigned>(options.jobs, 1, static_cast<unsigned>(runs.size()));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  for (const SweepRow& r : rows)
    if (r.error) std::rethrow_exception(r.error);

  std::ofstream table = open_table(fs::path(cli.paths.output) / ("sweep_" + options.axis + ".tsv"), cli);
  const std::string header = "axis\tvalue\tseed\tacc\tacc_lo\tacc_hi\tauc\tsparsity\ttest_risk\ttrain_risk\tstatus\n";
  table << header;
  out << header;
  bool any_diverged = false;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const SweepRow& r = rows[k];
    std::ostringstream line;
    line << options.axis << '\t' << values[k] << '\t' << runs[k].seed << '\t';
    if (r.diverged) {
      line << "nan\tnan\tnan\tnan\tnan\tnan\tnan\tdiverged\n";
      any_diverged = true;
    } else {
      const Metrics& m = r.metrics;
      line << fmt(m.acc) << '\t' << fmt(m.acc_ci.lo) << '\t' << fmt(m.acc_ci.hi) << '\t' << fmt(m.auc) << '\t'
           << fmt(m.sparsity) << '\t' << fmt(m.risk) << '\t' << fmt(r.train_risk) << "\tok\n";
    }
    table << line.str();
    out << line.str();
  }
  return any_diverged ? kExitDivergence : kExitOk;
}

int cmd_grad_check(const RunConfig& config, const GradCheckCliOptions& options, std::ostream& out) {
  GradCheckOptions o;
  o.fault_parameter = options.fault_parameter;
  std::ofstream table = open_table(fs::path(config.paths.output) / "grad_check.tsv", config);
  const std::string header = "case\tstage\tgroup\tsize\tmax_error\tmax_abs_grad\tshrunk\tstatus\n";
  table << header;
  out << header;
  bool ok = true;
  for (const GradCheckCase& c : standard_grad_check_cases(8)) {
    for (const GradCheckReport& r : run_grad_check(c, o)) {
      for (const GroupCheck& g : r.groups) {
        std::ostringstream line;
        line << r.label << '\t' << r.stage << '\t' << g.name << '\t' << g.size << '\t' << fmt(g.max_error) << '\t'
             << fmt(g.max_abs_grad) << '\t' << g.shrunk << '\t' << (g.passed ? "pass" : "FAIL") << '\n';
        table << line.str();
        out << line.str();
        ok = ok && g.passed;
      }
    }
  }
  out << (ok ? "grad-check: all groups pass" : "grad-check: FAILED") << '\n';
  return ok ? kExitOk : kExitFailure;
}

int guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const DivergenceError& e) {
    err << "abx: divergence on slide " << e.slide_id() << ": " << e.what() << '\n';
    return kExitDivergence;
  } catch (const NumericError& e) {
    err << "abx: numeric error: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::invalid_argument& e) {
    err << "abx: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    err << "abx: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "abx: unexpected error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace abx::cli
