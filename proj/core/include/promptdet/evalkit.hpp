#pragma once

// Detection metrics: greedy matching, R40 average precision, per-dataset
// reports and size-distribution statistics between predictions and GT.

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "promptdet/detector.hpp"
#include "promptdet/synthdata.hpp"

namespace promptdet {

using IouFn = std::function<double(const Box3D&, const Box3D&)>;

struct MatchResult {
  std::vector<bool> tp;  // one flag per prediction, prediction order
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (prediction, gt) for true positives
};

/// Predictions must be sorted by descending score. Each prediction takes the
/// highest-IoU unmatched GT of its class; it is a TP iff that IoU >= thresh,
/// and only a TP consumes the GT.
MatchResult match_predictions(const DetectionResult& preds, std::span<const Box3D> gts, const IouFn& iou, double thresh);

/// Mean over r = 1/40 .. 40/40 of the best precision at recall >= r. Absent when num_gt == 0.
std::optional<double> average_precision_40(std::span<const bool> tp_flags, std::size_t num_gt);

struct IouThresholds {
  std::array<double, kNumClasses> per_class{0.7, 0.5, 0.5};
};

struct DimensionStats {
  double pred_mean = 0, pred_std = 0, gt_mean = 0, gt_std = 0;
  std::optional<double> w1;  // absent when either side has fewer than 2 samples
};

struct SizeStats {
  int class_id = 0;
  std::size_t num_pred = 0, num_gt = 0;
  std::array<DimensionStats, 3> dims{};  // length, width, height
  bool degenerate = false;
};

/// Exact 1-Wasserstein distance between two empirical distributions
/// (integral of |F^-1 - G^-1| over the unit interval). Needs non-empty inputs.
double wasserstein1(std::vector<double> a, std::vector<double> b);

/// Per-dimension summaries and W1 for one class.
SizeStats size_distribution_stats(std::span<const Box3D> preds, std::span<const Box3D> gts, int class_id);

struct ClassMetrics {
  int class_id = 0;
  double iou_threshold = 0;
  std::size_t num_gt = 0, num_pred = 0;
  std::optional<double> ap_bev, ap_3d;
};

struct DatasetMetrics {
  int dataset_id = 0;
  std::string name;
  std::size_t num_frames = 0;
  std::vector<ClassMetrics> classes;
  std::optional<double> map_3d, map_bev;  // mean over classes with GT
  std::vector<SizeStats> sizes;
};

struct EvalReport {
  std::vector<DatasetMetrics> datasets;
  std::string config_fingerprint;
};

struct EvalOptions {
  IouThresholds thresholds;
  /// Predictions at or above this score enter the size statistics.
  double size_score_threshold = 0.3;
};

/// Scores one split. preds[i] and gts[i] describe the same frame.
DatasetMetrics evaluate(std::span<const DetectionResult> preds, std::span<const std::vector<Box3D>> gts,
                        int dataset_id, const std::string& name, const EvalOptions& options = {});

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);
/// One row per dataset x class x metric: dataset,class,metric,value.
std::string report_to_csv(const EvalReport& report);

}  // namespace promptdet
