#include "abx/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace abx {

bool GradCheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [](const GroupCheck& g) { return g.passed; });
}

std::vector<GradCheckCase> standard_grad_check_cases(Index dim) {
  std::vector<GradCheckCase> out;
  AggregatorConfig base;
  base.input_dim = dim;
  base.hidden = 8;

  AggregatorConfig abmil = base;
  abmil.variant = Variant::Abmil;
  abmil.heads = 1;
  out.push_back({"abmil", abmil});

  for (Index m : {1, 4, 8}) {
    for (AlphaMode a : {AlphaMode::FixedZero, AlphaMode::FixedOne, AlphaMode::Learnable}) {
      for (bool ffn : {false, true}) {
        AggregatorConfig c = base;
        c.variant = Variant::Abmilx;
        c.heads = m;
        c.alpha_mode = a;
        c.ffn = ffn;
        out.push_back({"abmilx m=" + std::to_string(m) + " alpha=" + to_string(a) + (ffn ? " ffn" : ""), c});
      }
    }
  }

  AggregatorConfig global = base;
  global.variant = Variant::GlobalAttn;
  global.heads = 1;
  out.push_back({"global-attn", global});
  return out;
}

namespace {

struct Bag {
  Matrix views;
  int label = 0;
};

struct Probe {
  double loss = 0.0;
  std::uint64_t pattern = 0;
};

Probe probe(Pipeline& p, const Bag& bag) {
  Tape tape;
  const double loss = forward_bag(tape, p, bag.views, bag.label).loss.value()(0, 0);
  return {loss, tape.activation_pattern()};
}

GradCheckReport check_once(Pipeline& p, const Bag& bag, const GradCheckOptions& o) {
  for (Parameter* param : p.parameters()) param->zero_grad();
  {
    Tape tape;
    if (!o.fault_parameter.empty()) tape.inject_fault(o.fault_parameter, o.fault_factor);
    tape.backward(forward_bag(tape, p, bag.views, bag.label).loss);
  }
  const double h = o.fd_step;
  GradCheckReport report;
  for (Parameter* param : p.trainable_parameters()) {
    GroupCheck g;
    g.name = param->name;
    g.size = param->value.size();
    for (Index k = 0; k < param->value.size(); ++k) {
      double& x = param->value.data()[k];
      const double x0 = x;
      const std::uint64_t centre = probe(p, bag).pattern;
      double numeric = 0.0;
      for (int shrink = 0; shrink < 4; ++shrink) {
        const double step = h * std::pow(0.1, shrink);
        bool smooth = true;
        auto at = [&](double offset) {
          x = x0 + offset;
          const Probe r = probe(p, bag);
          smooth = smooth && r.pattern == centre;
          return r.loss;
        };
        const double near = at(step) - at(-step);
        const double far = at(2 * step) - at(-2 * step);
        numeric = (8 * near - far) / (12 * step);
        if (smooth) break;
        g.shrunk += shrink == 0;
      }
      x = x0;
      const double analytic = param->grad.data()[k];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), o.floor});
      g.max_error = std::max(g.max_error, std::abs(analytic - numeric) / denom);
      g.max_abs_grad = std::max(g.max_abs_grad, std::abs(analytic));
    }
    g.passed = g.max_error <= o.tolerance;
    report.groups.push_back(g);
  }
  return report;
}

}  // namespace

std::vector<GradCheckReport> run_grad_check(const GradCheckCase& c, const GradCheckOptions& o) {
  PipelineConfig pc;
  pc.raw_dim = o.raw_dim;
  pc.encoder_hidden = o.encoder_hidden;
  pc.aggregator = c.aggregator;
  pc.classes = o.classes;
  Rng rng(o.seed);
  Pipeline p = make_pipeline(pc, rng);

  auto draw_bag = [&] {
    Bag b;
    b.views = gaussian_matrix(o.bag_size, o.raw_dim, rng, 1.0);
    b.label = std::uniform_int_distribution<int>(0, static_cast<int>(o.classes) - 1)(rng);
    return b;
  };

  std::vector<GradCheckReport> out;
  out.push_back(check_once(p, draw_bag(), o));
  out.back().stage = "init";

  AdamState state;
  AdamHyper hyper;
  hyper.lr = o.train_lr;
  for (Index s = 0; s < o.steps; ++s) {
    const Bag b = draw_bag();
    for (Parameter* param : p.parameters()) param->zero_grad();
    Tape tape;
    tape.backward(forward_bag(tape, p, b.views, b.label).loss);
    std::vector<Parameter*> params = p.trainable_parameters();
    adamw_step(params, state, hyper);
  }
  out.push_back(check_once(p, draw_bag(), o));
  out.back().stage = "step" + std::to_string(o.steps);
  for (GradCheckReport& r : out) r.label = c.label;
  return out;
}

}  // namespace abx
