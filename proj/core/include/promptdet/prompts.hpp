#pragma once

// Dataset-attribute prompts for the three detector stages:
//   voxelization - mean-shifted batch normalization of point features,
//   backbone     - per-dataset BEV range masks concatenated before each conv,
//   head         - object-conditional residuals on RoI features.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "promptdet/diffnum.hpp"
#include "promptdet/optim.hpp"
#include "promptdet/synthdata.hpp"

namespace promptdet {

// ---------------------------------------------------------------------------
// Mean-shifted batch normalization

/// Normalizes point features with a blend of the batch mean and the mean of
/// the frame each point came from:
///   p_hat = (p - alpha * mu_frame - (1 - alpha) * mu_batch) / sqrt(var_batch + eps)
/// followed by the usual gamma/beta. The variance is always the shared batch
/// (or running) variance around mu_batch.
struct MSBNLayer {
  std::size_t channels = 0;
  double alpha = 0.5;
  double epsilon = 1e-5;
  double momentum = 0.1;
  DiffTensor gamma;  // [C]
  DiffTensor beta;   // [C]
  std::vector<double> running_mean;
  std::vector<double> running_var;

  static MSBNLayer create(std::size_t channels, double alpha, double epsilon = 1e-5);
  void validate() const;
};

/// P is [rows x C]; frame_of_point assigns each row to a frame in [0, M).
/// In training mode batch statistics are used and running statistics are
/// updated; in inference mode the running statistics replace the batch mean
/// and variance while the frame mean is still taken from the incoming rows.
DiffTensor msbn_forward(const DiffTensor& points, std::span<const std::size_t> frame_of_point, MSBNLayer& layer,
                        bool training);

// ---------------------------------------------------------------------------
// BEV range masks

/// Plane extent (x1, y1, x2, y2) used to lay out the BEV grid.
struct PlaneRange {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  static PlaneRange from(const PointRange& r) { return {r.x1, r.y1, r.x2, r.y2}; }
};

struct RangeMask {
  std::size_t height = 0;  // along x
  std::size_t width = 0;   // along y
  std::vector<std::uint8_t> bits;  // row-major [height x width]
  int dataset_id = -1;
  /// Mapped corners (x1', y1', x2', y2'), inclusive, after clamping.
  std::array<std::int64_t, 4> corners{};

  bool at(std::size_t m, std::size_t n) const { return bits[m * width + n] != 0; }
  std::size_t count() const;
};

/// Maps the dataset's x-y range onto the H x W plane: floor on the lower
/// corner, ceil on the upper corner, clamp to the grid, then fills the
/// inclusive rectangle.
RangeMask compute_range_mask(const DatasetSpec& spec, const PlaneRange& global_range, std::size_t height,
                             std::size_t width);
RangeMask compute_range_mask(const PointRange& dataset_range, int dataset_id, const PlaneRange& global_range,
                             std::size_t height, std::size_t width);
RangeMask all_ones_mask(std::size_t height, std::size_t width);

/// Nearest-neighbor resampling: target cell i reads source cell floor(i * H / H').
RangeMask resample_nearest(const RangeMask& mask, std::size_t height, std::size_t width);

/// Appends one 0/1 mask channel per sample: x [N x C x H x W] -> [N x (C+1) x H x W].
/// Masks are resampled to H x W when their resolution differs. No gradient
/// reaches the masks.
DiffTensor apply_mask_concat(const DiffTensor& x, std::span<const RangeMask> masks);
DiffTensor apply_mask_concat(const DiffTensor& x, const RangeMask& mask);

std::string mask_to_pgm(const RangeMask& mask);
nlohmann::json mask_to_json(const RangeMask& mask);

// ---------------------------------------------------------------------------
// Object-conditional residual learning

/// r = f(SG(x)) with f a two-layer perceptron F -> F -> F, and a discriminator
/// D: F -> F/2 -> num_datasets trained to recover the source dataset from r.
struct OCRLHead {
  std::size_t feature_dim = 0;
  std::size_t num_datasets = 0;
  double dis_loss_weight = 1.0;
  DiffTensor f_w1, f_b1, f_w2, f_b2;
  DiffTensor d_w1, d_b1, d_w2, d_b2;

  /// Registers all parameters under `prefix` in `params`.
  static OCRLHead create(ParameterStore& params, const std::string& prefix, std::size_t feature_dim,
                         std::size_t num_datasets, std::uint64_t seed, double dis_loss_weight = 1.0);
};

struct OCRLOutput {
  DiffTensor enhanced;  // x + r
  DiffTensor residual;  // r
};

OCRLOutput ocrl_apply(const DiffTensor& roi_features, const OCRLHead& head);
DiffTensor ocrl_discriminator_logits(const DiffTensor& residual, const OCRLHead& head);
/// Unweighted cross-entropy of D(r) against the source dataset ids.
DiffTensor ocrl_discrimination_loss(const DiffTensor& residual, std::span<const int> dataset_ids,
                                    const OCRLHead& head);

}  // namespace promptdet
