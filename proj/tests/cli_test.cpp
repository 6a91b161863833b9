#include <doctest.h>

#include "commands.hpp"

#include "abx/error.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

using namespace abx;
using namespace abx::cli;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "abx_cli_test";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<json> jsonl(const fs::path& p) {
  std::vector<json> out;
  std::ifstream is(p);
  for (std::string line; std::getline(is, line);) out.push_back(json::parse(line));
  return out;
}

// Tiny run rooted in its own directory.
RunConfig tiny(const std::string& name) {
  RunConfig c;
  c.data.slides = 10;
  c.data.min_instances = 20;
  c.data.max_instances = 30;
  c.data.raw_dim = 6;
  c.data.witness_rate = 0.2;
  c.model.dim = 8;
  c.model.heads = 2;
  c.model.hidden = 12;
  c.model.encoder_hidden = 8;
  c.sampling.count = 16;
  c.train.epochs = 2;
  c.train.lr = 1e-3;
  c.eval.bootstrap = 100;
  const fs::path dir = kRoot / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  c.paths.dataset = (dir / "data").string();
  c.paths.checkpoint = (dir / "model.abxc").string();
  c.paths.log = (dir / "train.jsonl").string();
  c.paths.output = (dir / "out").string();
  return c;
}

std::string hash_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const fs::path& f : files) all += fs::relative(f, dir).string() + '\n' + slurp(f);
  return all;
}

// Runs the real executable; returns its exit status.
int run_cli(const std::string& args, const fs::path& stderr_file = {}) {
  std::string cmd = std::string(ABX_CLI_PATH) + " " + args + " > /dev/null";
  cmd += stderr_file.empty() ? " 2>/dev/null" : " 2> '" + stderr_file.string() + "'";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const RunConfig& c, const std::string& name) {
  const fs::path p = kRoot / (name + ".json");
  std::ofstream(p) << to_json(c).dump();
  return p;
}

}  // namespace

TEST_CASE("gen-data") {
  RunConfig c = tiny("gen");
  std::ostringstream out;
  CHECK(cmd_gen_data(c, false, out) == kExitOk);
  CHECK(fs::is_directory(fs::path(c.paths.dataset) / "train"));
  CHECK(fs::is_directory(fs::path(c.paths.dataset) / "test"));
  const json summary = json::parse(out.str());
  CHECK(summary["train"] == 7);
  CHECK(summary["test"] == 3);
  CHECK(summary["config"] == to_json(c));
  CHECK_THROWS_AS(cmd_gen_data(c, false, out), UsageError);

  RunConfig again = c;
  again.paths.dataset = (kRoot / "gen" / "data2").string();
  cmd_gen_data(again, false, out);
  CHECK(hash_tree(c.paths.dataset) == hash_tree(again.paths.dataset));
}

TEST_CASE("train log") {
  RunConfig c = tiny("train");
  c.train.epochs = 1;
  std::ostringstream out;
  cmd_gen_data(c, false, out);
  CHECK(cmd_train(c, out) == kExitOk);
  const auto lines = jsonl(c.paths.log);
  CHECK(lines.front()["type"] == "config");
  CHECK(std::count_if(lines.begin(), lines.end(), [](const json& j) { return j["type"] == "epoch"; }) == 1);
  for (const char* key : {"epoch", "lr", "loss", "acc", "auc", "sparsity", "risk_mean", "alpha"}) CHECK(lines[1].contains(key));
  CHECK(lines[1]["variant"] == "abmilx");
  const std::string first = slurp(c.paths.log);
  const std::string ckpt = slurp(c.paths.checkpoint);

  cmd_train(c, out);
  CHECK(slurp(c.paths.log) == first);
  CHECK(slurp(c.paths.checkpoint) == ckpt);

  c.model.variant = Variant::Abmil;
  c.model.heads = 1;
  cmd_train(c, out);
  CHECK(jsonl(c.paths.log)[1]["variant"] == "abmil");
}

TEST_CASE("eval and analyze") {
  RunConfig c = tiny("eval");
  c.data.separation = 8.0;
  c.data.witness_rate = 0.5;
  c.train.epochs = 40;
  c.train.lr = 1e-2;
  c.model.alpha = AlphaMode::FixedZero;
  std::ostringstream out;
  cmd_gen_data(c, false, out);
  cmd_train(c, out);
  CHECK(cmd_eval(c, out) == kExitOk);
  const json m = json::parse(slurp(fs::path(c.paths.output) / "metrics.json"));
  for (const char* key : {"acc", "auc", "sparsity", "risk", "config"}) CHECK(m.contains(key));
  CHECK(m["acc"]["point"] == 1.0);
  CHECK(m["acc"]["mean"] == 1.0);
  CHECK(m["acc"]["lo"] == 1.0);
  CHECK(m["acc"]["hi"] == 1.0);

  c.eval.bootstrap = 1;
  cmd_eval(c, out);
  const json one = json::parse(slurp(fs::path(c.paths.output) / "metrics.json"));
  CHECK(one["acc"]["lo"] == one["acc"]["mean"]);
  CHECK(one["acc"]["hi"] == one["acc"]["mean"]);

  CHECK(cmd_analyze(c, out) == kExitOk);
  const auto records = jsonl(fs::path(c.paths.output) / "analysis.jsonl");
  CHECK(records.front()["type"] == "config");
  int slides = 0;
  for (const json& r : records) {
    if (r["type"] != "slide") continue;
    ++slides;
    CHECK(r.contains("sparsity"));
    CHECK(r.contains("risk"));
    REQUIRE(r.contains("decomposition"));
    CHECK_FALSE(r["decomposition"].contains("lambda"));
    CHECK(std::abs(r["decomposition"]["product"].get<double>() - r["decomposition"]["original_risk"].get<double>()) <= 1e-12);
  }
  CHECK(slides == 3);
  CHECK(slurp(fs::path(c.paths.output) / "features.tsv").rfind("# config ", 0) == 0);
}

TEST_CASE("analyze reports lambda when alpha is active") {
  RunConfig c = tiny("lambda");
  std::ostringstream out;
  cmd_gen_data(c, false, out);
  cmd_train(c, out);
  cmd_analyze(c, out);
  for (const json& r : jsonl(fs::path(c.paths.output) / "analysis.jsonl"))
    if (r["type"] == "slide" && r.contains("decomposition")) CHECK(r["decomposition"].contains("lambda"));
}

TEST_CASE("sweep") {
  RunConfig c = tiny("sweep");
  c.train.epochs = 1;
  std::ostringstream out;
  cmd_gen_data(c, false, out);
  SweepOptions o;
  o.axis = "m";
  o.values = {"1", "2", "4"};
  CHECK(cmd_sweep(c, o, out) == kExitOk);
  const fs::path table = fs::path(c.paths.output) / "sweep_m.tsv";
  const std::string serial = slurp(table);
  CHECK(std::count(serial.begin(), serial.end(), '\n') == 5);
  o.jobs = 3;
  cmd_sweep(c, o, out);
  CHECK(slurp(table) == serial);

  CHECK(default_sweep_values("m") == std::vector<std::string>{"2", "4", "8", "16"});
  CHECK(default_sweep_values("sample-count") == std::vector<std::string>{"64", "128", "512"});
  CHECK(default_sweep_values("alpha-mode").size() == 3);
  o.axis = "depth";
  CHECK_THROWS_AS(cmd_sweep(c, o, out), ConfigError);
  o.axis = "m";
  o.values = {"3"};
  CHECK_THROWS_AS(cmd_sweep(c, o, out), ConfigError);
}

TEST_CASE("config resolution") {
  const fs::path file = kRoot / "resolve.json";
  fs::create_directories(kRoot);
  std::ofstream(file) << R"({"seed": 4, "model": {"heads": 2}})";
  CommonOptions o;
  o.config_path = file.string();
  CHECK(resolve_config(o).seed == 4);
  setenv("ABX_SEED", "9", 1);
  CHECK(resolve_config(o).seed == 9);
  CHECK(resolve_config(o).data.seed == 9);
  o.seed = 11;
  CHECK(resolve_config(o).seed == 11);
  o.overrides = {"model.heads=3"};
  CHECK_THROWS_AS(resolve_config(o), ConfigError);
  o.overrides = {"model.heads=1"};
  o.variant = "abmil";
  CHECK(resolve_config(o).model.variant == Variant::Abmil);
  setenv("ABX_SEED", "nine", 1);
  CHECK_THROWS_AS(resolve_config(o), ConfigError);
  unsetenv("ABX_SEED");
}

TEST_CASE("exit codes") {
  RunConfig c = tiny("exit");
  const fs::path cfg = write_config(c, "exit");
  const fs::path err = kRoot / "exit" / "stderr.txt";
  CHECK(run_cli("gen-data -c " + cfg.string()) == 0);
  CHECK(run_cli("gen-data -c " + cfg.string()) == 2);
  CHECK(run_cli("gen-data -f -c " + cfg.string() + " --set data.witness_rate=1.5", err) == 2);
  CHECK(slurp(err).find("witness_rate") != std::string::npos);
  CHECK(run_cli("train -c " + cfg.string() + " --set paths.dataset=/nonexistent/abx") == 2);
  CHECK(run_cli("train -c " + cfg.string() + " --set train.lr=1e300", err) == 3);
  CHECK(slurp(err).find("slide") != std::string::npos);
  CHECK(run_cli("train -c " + cfg.string() + " --set model.bogus=1") == 2);
  CHECK(run_cli("frobnicate") == 2);
  CHECK(run_cli("--help") == 0);
}

TEST_CASE("grad-check command") {
  RunConfig c = tiny("gc");
  std::ostringstream out;
  GradCheckCliOptions o;
  CHECK(cmd_grad_check(c, o, out) == kExitOk);
  o.fault_parameter = "agg.attn.out";
  std::ostringstream bad;
  CHECK(cmd_grad_check(c, o, bad) == kExitFailure);
  std::istringstream lines(bad.str());
  for (std::string line; std::getline(lines, line);) {
    if (line.find("\tFAIL") != std::string::npos) CHECK(line.find("\tagg.attn.out\t") != std::string::npos);
  }
  CHECK(bad.str().find("FAIL") != std::string::npos);
}
