// promptdet: experiment driver.
//
//   promptdet train -c exp.json --set detector.epochs=4 -o runs/a
//   promptdet compare runs/a/report.json runs/b/report.json

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "promptdet/experiment.hpp"

namespace {

using promptdet::ExperimentKind;

constexpr int kExitFailure = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitDiverged = 3;

struct RunOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  std::string checkpoint;
  std::string heldout;
};

nlohmann::json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw std::invalid_argument(path + " is not valid JSON");
  return j;
}

// With no config file the run uses the two-dataset consolidation.
nlohmann::json default_config() {
  promptdet::ExperimentConfig c;
  c.datasets = {{"K-like", 200, 60}, {"W-like", 200, 60}};
  return promptdet::experiment_to_json(c);
}

int run(ExperimentKind kind, const RunOptions& opt) {
  nlohmann::json doc = opt.config_path.empty() ? default_config() : read_json(opt.config_path);
  doc["kind"] = promptdet::kind_name(kind);
  for (const auto& o : opt.overrides) promptdet::apply_override(doc, o);
  if (!opt.output_dir.empty()) doc["output_dir"] = opt.output_dir;
  if (!opt.checkpoint.empty()) doc["checkpoint"] = opt.checkpoint;
  if (!opt.heldout.empty()) doc["heldout"] = opt.heldout;

  promptdet::ExperimentConfig cfg = promptdet::experiment_from_json(doc);
  if (cfg.output_dir.empty()) throw std::invalid_argument("no output directory; pass --out or set output_dir");
  const auto result = promptdet::run_experiment(cfg);
  if (!result.rows.empty()) std::cout << promptdet::summary_csv(result);
  std::cerr << "artifacts written to " << cfg.output_dir.string() << "\n";
  return 0;
}

int compare(const std::string& a, const std::string& b, const std::string& out) {
  const auto ra = promptdet::report_from_json(read_json(a));
  const auto rb = promptdet::report_from_json(read_json(b));
  const std::string csv = promptdet::deltas_to_csv(promptdet::compare_reports(ra, rb));
  if (out.empty()) {
    std::cout << csv;
  } else {
    std::ofstream os(out);
    os << csv;
    if (!os.good()) throw std::runtime_error("failed writing " + out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-dataset 3D detection with dataset prompts"};
  app.require_subcommand(1);

  constexpr std::pair<ExperimentKind, const char*> kCommands[] = {
      {ExperimentKind::kGen, "generate synthetic train/test frames as JSONL"},
      {ExperimentKind::kTrain, "train jointly on the listed datasets and evaluate"},
      {ExperimentKind::kEval, "evaluate a checkpoint"},
      {ExperimentKind::kAblateStages, "add prompts stage by stage (4 runs)"},
      {ExperimentKind::kSweepAlpha, "sweep the mean-shift ratio alpha"},
      {ExperimentKind::kZeroshot, "train without the held-out dataset, then evaluate on it"},
  };
  std::vector<std::pair<CLI::App*, ExperimentKind>> run_cmds;
  RunOptions opt;
  for (const auto& [kind, help] : kCommands) {
    CLI::App* sub = app.add_subcommand(promptdet::kind_name(kind), help);
    sub->add_option("-c,--config", opt.config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--set", opt.overrides, "override a config key: dotted.path=value")->take_all();
    sub->add_option("-o,--out", opt.output_dir, "output directory");
    if (kind == ExperimentKind::kEval) sub->add_option("--checkpoint", opt.checkpoint, "checkpoint.bin to evaluate");
    if (kind == ExperimentKind::kZeroshot || kind == ExperimentKind::kEval)
      sub->add_option("--heldout", opt.heldout, "dataset excluded from training");
    run_cmds.emplace_back(sub, kind);
  }

  std::string report_a, report_b, delta_out;
  CLI::App* cmp = app.add_subcommand("compare", "per-cell AP deltas between two report.json files (b - a)");
  cmp->add_option("report_a", report_a)->required()->check(CLI::ExistingFile);
  cmp->add_option("report_b", report_b)->required()->check(CLI::ExistingFile);
  cmp->add_option("-o,--out", delta_out, "write the delta CSV here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmp->parsed()) return compare(report_a, report_b, delta_out);
    for (const auto& [sub, kind] : run_cmds)
      if (sub->parsed()) return run(kind, opt);
  } catch (const promptdet::TrainingDiverged& e) {
    std::cerr << "error: training diverged at step " << e.step() << ": " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
