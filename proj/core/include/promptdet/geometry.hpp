#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "promptdet/diffnum.hpp"
#include "promptdet/synthdata.hpp"

namespace promptdet {

struct VoxelGrid {
  struct Voxel {
    std::array<std::size_t, 3> index{};  // (ix, iy, iz)
    std::vector<std::size_t> points;     // rows into the source frame
  };

  PointRange range;
  std::array<double, 3> voxel_size{};
  std::array<std::size_t, 3> dims{};  // Dx, Dy, Dz
  /// Occupied voxels in order of first encounter.
  std::vector<Voxel> voxels;
  /// Voxel of each frame point, -1 when out of range or dropped by the cap.
  std::vector<std::int64_t> point_voxel;

  std::array<double, 3> voxel_lo(const Voxel& v) const;
  std::array<double, 3> voxel_center(const Voxel& v) const;
};

/// Cells along one axis: ceil(extent / size), tolerant to representation error.
std::size_t grid_cells(double lo, double hi, double size);

/// Points map to floor((p - origin) / size) per axis. Points past
/// `max_points_per_voxel` are dropped in encounter order.
VoxelGrid voxelize(const Frame& frame, const PointRange& range, const std::array<double, 3>& voxel_size,
                   std::size_t max_points_per_voxel = 16);

/// Dense bird's-eye-view feature plane, values laid out [C x H x W] with
/// H along x (Dx) and W along y (Dy).
struct BEVGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  DiffTensor values;
};

/// Voxels sharing (ix, iy) are combined by elementwise max over z; empty cells are zero.
BEVGrid bev_scatter(const VoxelGrid& grid, const DiffTensor& voxel_features);

double iou_bev(const Box3D& a, const Box3D& b);
double iou_3d(const Box3D& a, const Box3D& b);

using BoxDeltas = std::array<double, 6>;
/// ((cx-cxa)/la, (cy-cya)/wa, (cz-cza)/ha, log(l/la), log(w/wa), log(h/ha)).
BoxDeltas box_encode(const Box3D& gt, const Box3D& anchor);
Box3D box_decode(const BoxDeltas& deltas, const Box3D& anchor);

/// Greedy suppression at BEV IoU > iou_thresh in descending score order;
/// equal scores keep the lower index first. Returns kept indices in that order.
std::vector<std::size_t> nms_bev(std::span<const Box3D> boxes, std::span<const double> scores, double iou_thresh);

}  // namespace promptdet
