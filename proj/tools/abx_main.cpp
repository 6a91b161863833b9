#include "commands.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace abx::cli;

namespace {

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON run config");
  cmd->add_option("-s,--set", o.overrides, "Override a config field, section.key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "Run seed (also seeds the dataset); overrides ABX_SEED");
  cmd->add_option("--variant", o.variant, "Aggregator: abmil | abmilx | mean | global-attn");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-pooling MIL on synthetic slides: data, training, evaluation, analysis"};
  app.require_subcommand(1);

  CommonOptions common;
  SweepOptions sweep;
  GradCheckCliOptions grad;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_common(gen, common);
  gen->add_flag("-f,--force", common.force, "Overwrite an existing dataset directory");
  CLI::App* train = app.add_subcommand("train", "Train end to end, writing a checkpoint and JSONL log");
  add_common(train, common);
  CLI::App* eval = app.add_subcommand("eval", "Test-split metrics with bootstrap intervals");
  add_common(eval, common);
  CLI::App* analyze = app.add_subcommand("analyze", "Per-slide sparsity, risk, modulation, histograms, features");
  add_common(analyze, common);
  CLI::App* sw = app.add_subcommand("sweep", "Train and evaluate one setting per axis value");
  add_common(sw, common);
  sw->add_option("--axis", sweep.axis, "m | alpha-mode | sample-count | sampling-strategy | ffn")->required();
  sw->add_option("--values", sweep.values, "Comma-separated axis values")->delimiter(',');
  sw->add_option("-j,--jobs", sweep.jobs, "Concurrent runs")->check(CLI::PositiveNumber);
  CLI::App* gc = app.add_subcommand("grad-check", "Finite-difference audit of every parameter group");
  add_common(gc, common);
  gc->add_option("--inject-fault", grad.fault_parameter, "Corrupt one parameter's gradient (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  return guarded(
      [&] {
        const abx::RunConfig config = resolve_config(common);
        if (gen->parsed()) return cmd_gen_data(config, common.force, std::cout);
        if (train->parsed()) return cmd_train(config, std::cout);
        if (eval->parsed()) return cmd_eval(config, std::cout);
        if (analyze->parsed()) return cmd_analyze(config, std::cout);
        if (sw->parsed()) return cmd_sweep(config, sweep, std::cout);
        return cmd_grad_check(config, grad, std::cout);
      },
      std::cerr);
}
