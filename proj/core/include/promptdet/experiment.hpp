#pragma once

// Experiment driver: one JSON config in, artifacts (snapshot, logs,
// checkpoints, reports) out. Every run is a pure function of the config.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptdet/detector.hpp"
#include "promptdet/evalkit.hpp"
#include "promptdet/synthdata.hpp"

namespace promptdet {

enum class ExperimentKind { kGen, kTrain, kEval, kAblateStages, kSweepAlpha, kZeroshot };

const char* kind_name(ExperimentKind kind);
ExperimentKind kind_from_name(const std::string& name);

struct DatasetEntry {
  std::string spec;
  std::size_t train_frames = 200;
  std::size_t test_frames = 60;
};

struct ExperimentConfig {
  static constexpr int kSchemaVersion = 1;

  ExperimentKind kind = ExperimentKind::kTrain;
  /// Root seed: detector init, batch order and frame generation all derive from it.
  std::uint64_t seed = 0;
  std::vector<DatasetEntry> datasets;
  /// Name of a dataset that is never trained on; it is evaluated with its own
  /// range mask and with an uninformative all-ones mask. Required for zeroshot.
  std::string heldout;
  /// Extra specs beyond the built-in presets.
  std::vector<DatasetSpec> custom_specs;
  /// When set, training frames are rescaled toward this spec's size statistics.
  std::string sn_target;
  DetectorConfig detector = desk_config();  // json keys override this profile
  EvalOptions evaluation;
  std::vector<double> alphas{0.0, 0.1, 0.3, 0.5, 0.7, 1.0};
  std::filesystem::path output_dir;
  std::filesystem::path checkpoint;  // eval only; the checkpoint to score

  /// Throws std::invalid_argument on the first problem found.
  void validate() const;
  const DatasetSpec& resolve_spec(const std::string& name) const;
};

nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& j);

/// Applies `path=value` to a JSON document. Path segments are object keys
/// or array indices; the value is parsed as JSON and falls back to a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Name used in reports for the held-out dataset scored with the all-ones mask.
std::string uninformative_name(const std::string& dataset);

struct RunRow {
  std::string label;
  DetectorConfig detector;
  TrainResult train;
  EvalReport report;
};

struct ExperimentResult {
  std::vector<RunRow> rows;
};

/// Runs the experiment and writes its artifacts under output_dir (nothing is
/// written when output_dir is empty). Throws on invalid configs, training
/// divergence, non-finite metrics and I/O failures.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// One line per row: label, then mAP_3D and mAP_BEV for every evaluated dataset.
std::string summary_csv(const ExperimentResult& result);

struct DeltaCell {
  std::string dataset, class_name, metric;
  std::optional<double> a, b, delta;  // delta = b - a when both are present
};

/// Per-cell AP deltas and per-dataset mAP deltas. Throws std::invalid_argument
/// when the two reports do not share the dataset x class grid.
std::vector<DeltaCell> compare_reports(const EvalReport& a, const EvalReport& b);
std::string deltas_to_csv(const std::vector<DeltaCell>& cells);

}  // namespace promptdet
