#include <doctest.h>

#include "abx/analysis.hpp"
#include "abx/error.hpp"
#include "abx/gradcheck.hpp"
#include "abx/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>

using namespace abx;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run(std::uint64_t seed = 3) {
  RunConfig c;
  c.data.slides = 10;
  c.data.min_instances = 20;
  c.data.max_instances = 30;
  c.data.raw_dim = 6;
  c.data.witness_rate = 0.2;
  c.data.seed = seed;
  c.model.dim = 8;
  c.model.heads = 2;
  c.model.hidden = 12;
  c.model.encoder_hidden = 8;
  c.sampling.count = 16;
  c.train.epochs = 3;
  c.train.lr = 1e-3;
  c.seed = seed;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("abx_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Pipeline fresh_pipeline(const RunConfig& c) {
  Rng rng(derive_seed(c.seed, 1));
  return make_pipeline(pipeline_config(c), rng);
}

Matrix layer_norm_rows(const Matrix& x, const Matrix& gain, const Matrix& shift) {
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (Index c = 0; c < x.cols(); ++c) mean += x(r, c);
    mean /= static_cast<double>(x.cols());
    double var = 0.0;
    for (Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= static_cast<double>(x.cols());
    for (Index c = 0; c < x.cols(); ++c)
      out(r, c) = (x(r, c) - mean) / std::sqrt(var + 1e-5) * gain(0, c) + shift(0, c);
  }
  return out;
}

}  // namespace

TEST_CASE("adam matches a hand-unrolled recurrence") {
  const double g[] = {0.3, -1.2, 0.7};
  for (OptimizerKind kind : {OptimizerKind::Adam, OptimizerKind::AdamW}) {
    AdamHyper h;
    h.kind = kind;
    h.lr = 0.05;
    h.weight_decay = 0.1;
    Parameter p("w", Matrix::Constant(1, 1, 0.8));
    Parameter* ps[] = {&p};
    AdamState state;

    double theta = 0.8, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
      p.grad = Matrix::Constant(1, 1, g[t - 1]);
      adamw_step(ps, state, h);

      double grad = g[t - 1];
      if (kind == OptimizerKind::Adam) grad += 0.1 * theta;
      m = 0.9 * m + 0.1 * grad;
      v = 0.999 * v + 0.001 * grad * grad;
      if (kind == OptimizerKind::AdamW) theta -= 0.05 * 0.1 * theta;
      const double mh = m / (1.0 - std::pow(0.9, t));
      const double vh = v / (1.0 - std::pow(0.999, t));
      theta -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(std::abs(p.value(0, 0) - theta) <= 1e-12);
    }
    CHECK(state.step == 3);
  }
}

TEST_CASE("adam trivial cases") {
  AdamHyper h;
  h.lr = 1e-3;
  Parameter p("w", Matrix::Constant(2, 3, 0.5));
  p.zero_grad();
  Parameter* ps[] = {&p};
  AdamState state;
  adamw_step(ps, state, h);
  CHECK(p.value == Matrix::Constant(2, 3, 0.5));

  Parameter q("q", Matrix::Zero(1, 2));
  q.grad = Matrix(1, 2);
  q.grad << 1e3, -1e3;
  Parameter* qs[] = {&q};
  AdamState s2;
  adamw_step(qs, s2, h);
  CHECK(std::abs(q.value(0, 0) + 1e-3) <= 1e-12);
  CHECK(std::abs(q.value(0, 1) - 1e-3) <= 1e-12);

  Parameter bad("bad", Matrix::Zero(2, 2));
  bad.grad = Matrix::Zero(3, 2);
  Parameter* bs[] = {&bad};
  CHECK_THROWS_AS(adamw_step(bs, state, h), DimensionError);
}

TEST_CASE("cosine_lr") {
  CHECK(cosine_lr(0, 100, 2e-4) == 2e-4);
  CHECK(std::abs(cosine_lr(50, 100, 2e-4) - 1e-4) <= 1e-18);
  CHECK(std::abs(cosine_lr(100, 100, 2e-4)) <= 1e-20);
  CHECK(cosine_lr(25, 100, 1.0) > cosine_lr(26, 100, 1.0));
}

TEST_CASE("task loss") {
  Tape tape;
  LayerSpec head = make_linear("head", Matrix::Identity(3, 3));
  Matrix z(1, 3);
  z << 1, 2, 3;
  const double expect = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  CHECK(std::abs(task_loss(tape, tape.constant(z), head, 2).value()(0, 0) - expect) <= 1e-12);
  CHECK(std::abs(task_loss(tape, tape.constant(Matrix::Constant(1, 3, 0.4)), head, 0).value()(0, 0) - std::log(3.0)) <= 1e-12);
  Matrix dom(1, 3);
  dom << 0, 100, 0;
  CHECK(task_loss(tape, tape.constant(dom), head, 1).value()(0, 0) < 1e-6);
  CHECK_THROWS(task_loss(tape, tape.constant(z), head, 3));
}

TEST_CASE("encoder") {
  RunConfig c = tiny_run();
  Pipeline p = fresh_pipeline(c);
  Rng rng(11);
  const Matrix x = gaussian_matrix(5, 6, rng);

  Tape tape;
  const Matrix out = encoder_forward(tape, tape.constant(x), p).value();
  const Matrix h = (x * p.encoder[0].weight.value).cwiseMax(0.0);
  const Matrix oracle = layer_norm_rows(h * p.encoder[2].weight.value, p.encoder[3].gain.value, p.encoder[3].shift.value);
  CHECK((out - oracle).cwiseAbs().maxCoeff() <= 1e-10);

  Matrix flipped = x.colwise().reverse();
  Tape t2;
  CHECK((encoder_forward(t2, t2.constant(flipped), p).value() - out.colwise().reverse()).cwiseAbs().maxCoeff() == 0.0);

  p.encoder[0].weight.value.setZero();
  p.encoder[2].weight.value.setZero();
  Tape t3;
  CHECK(encoder_forward(t3, t3.constant(x), p).value() == Matrix::Zero(5, 8));

  Tape t4;
  CHECK_THROWS_AS(encoder_forward(t4, t4.constant(Matrix::Zero(5, 7)), p), DimensionError);
}

TEST_CASE("lr = 0 leaves parameters bitwise unchanged") {
  RunConfig c = tiny_run();
  c.train.lr = 0.0;
  const Dataset ds = make_dataset(c.data);
  TrainResult r = train(c, ds);
  Pipeline fresh = fresh_pipeline(c);
  const auto a = r.pipeline.parameters();
  const auto b = fresh.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k]->value == b[k]->value);
}

TEST_CASE("one slide is memorized") {
  RunConfig c = tiny_run();
  c.train.epochs = 200;
  c.train.lr = 1e-2;
  Dataset full = make_dataset(c.data);
  Dataset one;
  one.config = full.config;
  for (const Slide& s : full.train)
    if (s.label == 1) {
      one.train.push_back(s);
      break;
    }
  REQUIRE(one.train.size() == 1);
  TrainResult r = train(c, one);
  CHECK(r.records.back().loss < 0.01);
  const EvalResult e = evaluate(r.pipeline, one.train, c);
  CHECK(compute_metric(e.labels(), e.probabilities(), MetricKind::Accuracy) == 1.0);
}

TEST_CASE("training is deterministic") {
  const RunConfig c = tiny_run();
  const Dataset ds = make_dataset(c.data);
  TrainResult a = train(c, ds);
  TrainResult b = train(c, ds);
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t k = 0; k < a.records.size(); ++k) CHECK(to_json(a.records[k]) == to_json(b.records[k]));
  const auto pa = a.pipeline.parameters();
  const auto pb = b.pipeline.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) CHECK(pa[k]->value == pb[k]->value);
  CHECK(a.records.size() == 3);
  CHECK(a.records.back().lr < a.records.front().lr);
}

TEST_CASE("evaluation") {
  RunConfig c = tiny_run();
  c.eval.eval_samples = 12;
  const Dataset ds = make_dataset(c.data);
  TrainResult r = train(c, ds);
  const EvalResult e = evaluate(r.pipeline, ds.test, c);
  REQUIRE(e.slides.size() == ds.test.size());
  for (const SlideScore& s : e.slides) {
    CHECK(std::abs(s.probabilities.sum() - 1.0) <= 1e-12);
    CHECK(s.picks.size() == 12);
  }

  std::vector<Slide> reversed(ds.test.rbegin(), ds.test.rend());
  const EvalResult back = evaluate(r.pipeline, reversed, c);
  for (const SlideScore& s : e.slides)
    for (const SlideScore& t : back.slides)
      if (s.id == t.id) CHECK(s.probabilities == t.probabilities);

  c.eval.eval_samples = 0;
  const EvalResult whole = evaluate(r.pipeline, ds.test, c);
  CHECK(static_cast<Index>(whole.slides[0].picks.size()) == ds.test[0].size() * c.data.scales);

  RunConfig wide = c;
  wide.data.raw_dim = 7;
  const Dataset other = make_dataset(wide.data);
  CHECK_THROWS_AS(evaluate(r.pipeline, other.test, c), DimensionError);
}

TEST_CASE("frozen encoder") {
  RunConfig c = tiny_run();
  c.model.frozen_encoder = true;
  const Dataset ds = make_dataset(c.data);
  TrainResult r = train(c, ds);
  Pipeline fresh = fresh_pipeline(c);
  for (std::size_t k = 0; k < fresh.encoder.size(); ++k) {
    const auto a = r.pipeline.encoder[k].parameters();
    const auto b = fresh.encoder[k].parameters();
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j]->value == b[j]->value);
  }
  CHECK(r.pipeline.head.weight.value != fresh.head.weight.value);
}

TEST_CASE("non-finite input aborts with the slide id") {
  RunConfig c = tiny_run();
  Dataset ds = make_dataset(c.data);
  for (Matrix& v : ds.train[2].views) v.setConstant(std::numeric_limits<double>::quiet_NaN());
  try {
    train(c, ds);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.slide_id() == ds.train[2].id);
  }
}

TEST_CASE("loss on a fixed batch falls over the first steps") {
  int monotone = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RunConfig c = tiny_run(seed);
    const Dataset ds = make_dataset(c.data);
    Pipeline p = fresh_pipeline(c);
    Rng rng(seed);
    std::vector<Matrix> bags;
    for (const Slide& s : ds.train) bags.push_back(gather_views(s, sample_bag(s, c.sampling, c.data, 16, rng)));
    AdamState state;
    AdamHyper h;
    h.lr = 1e-4;
    double previous = std::numeric_limits<double>::infinity();
    bool ok = true;
    for (int step = 0; step <= 10; ++step) {
      for (Parameter* q : p.parameters()) q->zero_grad();
      double loss = 0.0;
      for (std::size_t k = 0; k < bags.size(); ++k) {
        Tape tape;
        const BagForward f = forward_bag(tape, p, bags[k], ds.train[k].label);
        tape.backward(scale(f.loss, 1.0 / static_cast<double>(bags.size())));
        loss += f.loss.value()(0, 0) / static_cast<double>(bags.size());
      }
      ok = ok && loss <= previous;
      previous = loss;
      auto params = p.trainable_parameters();
      adamw_step(params, state, h);
    }
    monotone += ok;
  }
  CHECK(monotone >= 8);
}

TEST_CASE("checkpoint round-trip") {
  const RunConfig c = tiny_run();
  const Dataset ds = make_dataset(c.data);
  TrainResult r = train(c, ds);
  const fs::path dir = scratch("ckpt");
  save_checkpoint(dir / "a.abxc", r.checkpoint);
  const Checkpoint back = load_checkpoint(dir / "a.abxc");
  save_checkpoint(dir / "b.abxc", back);
  CHECK(slurp(dir / "a.abxc") == slurp(dir / "b.abxc"));
  CHECK(slurp(dir / "a.abxc").substr(0, 4) == "ABXC");
  CHECK(back.optimizer_step == r.optimizer.step);
  CHECK(back.epoch == 3);

  const RunConfig rc = checkpoint_config(back);
  CHECK(to_json(rc) == to_json(c));
  Pipeline restored = restore_pipeline(back);
  const EvalResult e1 = evaluate(r.pipeline, ds.test, c);
  const EvalResult e2 = evaluate(restored, ds.test, rc);
  for (std::size_t k = 0; k < e1.slides.size(); ++k) {
    CHECK(e1.slides[k].probabilities == e2.slides[k].probabilities);
    CHECK(e1.slides[k].attention == e2.slides[k].attention);
  }
  const AdamState opt = restore_optimizer(back);
  CHECK(opt.first.at("head") == r.optimizer.first.at("head"));

  const std::string bytes = slurp(dir / "a.abxc");
  std::ofstream(dir / "cut.abxc", std::ios::binary) << bytes.substr(0, bytes.size() - 9);
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.abxc"), IoError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.abxc"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("export_features") {
  const RunConfig c = tiny_run();
  const Dataset ds = make_dataset(c.data);
  Pipeline p = fresh_pipeline(c);
  const fs::path dir = scratch("features");
  export_features(p, std::span<const Slide>(), dir / "empty.tsv");
  CHECK(slurp(dir / "empty.tsv") == "slide_id\tinstance_id\trole\tf0\tf1\tf2\tf3\tf4\tf5\tf6\tf7\n");

  export_features(p, ds.test, dir / "a.tsv");
  export_features(p, ds.test, dir / "b.tsv");
  const std::string text = slurp(dir / "a.tsv");
  CHECK(text == slurp(dir / "b.tsv"));
  Index rows = 0;
  for (const Slide& s : ds.test) rows += s.size();
  CHECK(std::count(text.begin(), text.end(), '\n') == rows + 1);
  CHECK(text.find("discriminative") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("grad check flags a corrupted gradient") {
  GradCheckOptions o;
  o.steps = 0;
  o.fault_parameter = "head";
  AggregatorConfig a;
  a.variant = Variant::Abmil;
  a.heads = 1;
  a.input_dim = 8;
  a.hidden = 8;
  const auto reports = run_grad_check({"abmil", a}, o);
  REQUIRE(!reports.empty());
  for (const GroupCheck& g : reports.front().groups) CHECK(g.passed == (g.name != "head"));
  CHECK_FALSE(reports.front().passed());

  o.fault_parameter.clear();
  for (const GradCheckReport& r : run_grad_check({"abmil", a}, o)) CHECK(r.passed());
}
