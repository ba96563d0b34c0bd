#pragma once

// Toy two-stage voxel detector with switchable dataset prompts.
//
//   points -> linear(4 -> C0) -> [MSBN | BN] -> relu -> per-voxel max
//          -> BEV scatter -> 3 conv blocks (stride 1, 2, 1; mask channel
//             concatenated before each conv when enabled)
//          -> dense anchor head (1x1 conv) -> proposals (NMS, top-k)
//          -> RoI bilinear pooling -> [OCRL residual] -> refinement MLP.

#include <array>
#include <filesystem>
#include <stdexcept>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "promptdet/diffnum.hpp"
#include "promptdet/geometry.hpp"
#include "promptdet/optim.hpp"
#include "promptdet/prompts.hpp"
#include "promptdet/synthdata.hpp"

namespace promptdet {

struct AnchorSpec {
  std::array<double, 3> size{};  // l, w, h
  double center_z = 0.0;
};

struct DetectorConfig {
  // Prompt toggles; each switches only its own code path.
  bool msbn_enabled = false;
  bool mask_enabled = false;
  bool ocrl_enabled = false;
  double alpha = 0.5;
  double dis_loss_weight = 1.0;

  PointRange global_range = kGlobalRange;
  std::array<double, 3> voxel_size{0.8, 0.8, 6.0};  // 188 x 188 BEV over the global plane
  std::size_t max_points_per_voxel = 16;

  std::size_t point_channels = 32;     // encoder width, also first conv block
  std::size_t backbone_channels = 64;  // second and third conv blocks
  std::size_t roi_grid = 4;
  std::size_t roi_hidden = 64;
  std::size_t num_proposals = 32;
  std::size_t pre_nms_proposals = 256;

  std::array<AnchorSpec, kNumClasses> anchors{{{{4.2, 1.8, 1.6}, -0.8}, {{0.8, 0.7, 1.7}, -0.75}, {{1.75, 0.7, 1.7}, -0.75}}};
  double positive_iou = 0.5;
  double negative_iou = 0.35;
  double roi_foreground_iou = 0.5;
  std::array<double, 2> roi_quality_iou{0.25, 0.75};  // 3D IoU mapped linearly to score target [0, 1]

  double objectness_weight = 1.0;
  double regression_weight = 2.0;
  double class_weight = 1.0;
  double roi_weight = 1.0;
  double smooth_l1_beta = 1.0 / 9.0;

  double score_threshold = 0.1;
  double nms_iou = 0.5;

  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;

  std::size_t epochs = 10;
  std::size_t batch_size = 4;
  double learning_rate = 0.01;
  double weight_decay = 0.01;
  double grad_clip_norm = 10.0;  // global L2 norm, 0 disables
  std::uint64_t seed = 0;

  void validate() const;
};

/// Laptop-scale profile used by experiments: 1.6 m voxels (94 x 94 BEV) and
/// 8/16 channels, which trains 200 frames per dataset in a few minutes.
DetectorConfig desk_config();

nlohmann::json config_to_json(const DetectorConfig& cfg);
/// Reads keys present in `j` over the defaults in `base`; unknown keys throw.
DetectorConfig config_from_json(const nlohmann::json& j, DetectorConfig base = {});

struct DetectionResult {
  std::vector<Box3D> boxes;
  std::vector<double> scores;
  std::vector<int> class_ids;
  int dataset_id = 0;
  std::size_t frame_index = 0;
};

/// One frame fed to a forward pass.
struct BatchItem {
  const Frame* frame = nullptr;
  const VoxelGrid* grid = nullptr;
  const RangeMask* mask = nullptr;  // used only when mask_enabled
  int dataset_label = 0;            // discriminator target, index among training datasets
};

struct DenseOutput {
  /// Rows (n, i, j) over the output grid; columns: objectness[K],
  /// deltas[6K] (anchor k at 6k), class logits[K].
  DiffTensor rows;
  std::size_t batch = 0, height = 0, width = 0;
};

struct Proposal {
  Box3D box;
  double score = 0.0;
  int class_id = 0;
};

struct RoiOutput {
  DiffTensor features;  // x, [R x F]
  DiffTensor enhanced;  // x + r when OCRL is enabled, otherwise x
  DiffTensor residual;  // r, undefined when OCRL is disabled
  DiffTensor refinement;  // [R x 7]: deltas relative to the proposal, score logit
  std::vector<Proposal> rois;
  std::vector<std::size_t> roi_frame;
};

struct LossBreakdown {
  DiffTensor total;
  double l_det = 0.0;
  double l_dis = 0.0;
  double objectness = 0.0;
  double regression = 0.0;
  double classification = 0.0;
  double roi_score = 0.0;
  double roi_regression = 0.0;
  std::size_t num_positive = 0;
};

struct DenseTargets {
  std::vector<double> objectness, objectness_weight;
  std::vector<double> deltas, delta_weight;
  std::vector<int> class_label;
  std::vector<double> class_weight;
  std::size_t num_positive = 0;
};

class Detector {
 public:
  /// `num_datasets` sizes the OCRL discriminator.
  explicit Detector(DetectorConfig cfg, std::size_t num_datasets = 1);

  const DetectorConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  std::size_t num_datasets() const { return num_datasets_; }
  MSBNLayer& norm() { return norm_; }
  const OCRLHead* ocrl() const { return cfg_.ocrl_enabled ? &ocrl_ : nullptr; }

  std::size_t bev_height() const { return bev_h_; }
  std::size_t bev_width() const { return bev_w_; }
  std::size_t out_height() const { return out_h_; }
  std::size_t out_width() const { return out_w_; }
  std::size_t roi_feature_dim() const;

  VoxelGrid voxelize(const Frame& frame) const;
  RangeMask mask_for(const DatasetSpec& spec) const;
  Box3D anchor(int class_id, std::size_t i, std::size_t j) const;

  // Stages ---------------------------------------------------------------

  /// Voxel features [G x C0] for each frame; normalization statistics span the batch.
  std::vector<DiffTensor> encode_voxels(std::span<const BatchItem> batch, bool training);
  DiffTensor encode_voxels(const Frame& frame, const VoxelGrid& grid, bool training);
  /// Scatters per-frame voxel features to a [N x C0 x H x W] BEV batch.
  DiffTensor scatter_batch(std::span<const BatchItem> batch, const std::vector<DiffTensor>& voxel_features) const;
  /// [N x C x H x W] -> [N x C2 x H' x W']; masks are ignored unless mask_enabled.
  DiffTensor backbone_forward(const DiffTensor& bev, std::span<const RangeMask> masks) const;
  DenseOutput dense_head_forward(const DiffTensor& features) const;
  std::vector<std::vector<Proposal>> propose(const DenseOutput& dense) const;
  RoiOutput roi_head_forward(const DiffTensor& features, const std::vector<std::vector<Proposal>>& proposals) const;

  DenseTargets assign_targets(std::span<const BatchItem> batch) const;
  /// L_det (+ dis_loss_weight * L_dis when OCRL is on) for one forward pass.
  LossBreakdown compute_detection_loss(const DenseOutput& dense, const RoiOutput& roi,
                                       std::span<const BatchItem> batch) const;

  /// Full training forward. `fixed_proposals` pins the proposal set, which
  /// makes the loss a smooth function of the parameters for gradient checks.
  LossBreakdown training_loss(std::span<const BatchItem> batch,
                              const std::vector<std::vector<Proposal>>* fixed_proposals = nullptr,
                              std::vector<std::vector<Proposal>>* used_proposals = nullptr);

  DetectionResult predict(const Frame& frame, const DatasetSpec& prompt_spec);
  DetectionResult predict(const Frame& frame, const RangeMask& prompt_mask);

  // Running statistics travel with checkpoints.
  std::vector<std::pair<std::string, std::vector<double>>> buffers() const;
  void load_buffers(const std::vector<std::pair<std::string, std::vector<double>>>& buffers);
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  DiffTensor conv_weight(const std::string& name, std::size_t cout, std::size_t cin, bool with_mask);

  DetectorConfig cfg_;
  std::size_t num_datasets_;
  std::size_t bev_h_, bev_w_, out_h_, out_w_;
  ParameterStore params_;
  DiffTensor enc_w_, enc_b_;
  MSBNLayer norm_;
  std::array<DiffTensor, 3> conv_w_, conv_b_;
  DiffTensor head_w_, head_b_;
  DiffTensor roi_w1_, roi_b1_, roi_w2_, roi_b2_;
  OCRLHead ocrl_;
};

/// Greedy class-aware NMS over proposals; returns kept proposals.
std::vector<Proposal> nms_proposals(std::vector<Proposal> proposals, double iou_thresh, std::size_t keep);

/// [N x C x H x W] features sampled on a g x g grid over each RoI's BEV
/// footprint with bilinear interpolation (zero outside the map).
/// Output cell (i, j) is centered at origin + ((stride*i + 0.5) vx, (stride*j + 0.5) vy).
struct RoiPoolGeometry {
  double origin_x = 0, origin_y = 0;
  double cell_x = 0, cell_y = 0;  // input voxel size
  std::size_t stride = 2;
  std::size_t grid = 4;
};
DiffTensor roi_bilinear_pool(const DiffTensor& features, std::span<const Proposal> rois,
                             std::span<const std::size_t> roi_frame, const RoiPoolGeometry& geometry);

// Training ---------------------------------------------------------------

/// Aligned frames of one dataset, ready for training or evaluation.
struct DatasetFrames {
  DatasetSpec spec;
  std::vector<Frame> frames;
};

struct TrainLogRow {
  std::int64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double l_det = 0.0;
  double l_dis = 0.0;
  double total = 0.0;
  std::vector<int> dataset_ids;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::size_t steps = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::int64_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

/// Joint training over the merged datasets. Each batch interleaves datasets
/// round-robin; optimization is Adam with the one-cycle schedule.
/// `max_steps` (when nonzero) truncates the schedule; used by quick checks.
TrainResult train(Detector& detector, std::span<const DatasetFrames> datasets, std::size_t max_steps = 0,
                  const std::function<void(const TrainLogRow&)>& on_step = {});

std::string train_log_csv(const TrainResult& result);

}  // namespace promptdet
