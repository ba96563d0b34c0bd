#include "promptdet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace promptdet {

std::size_t grid_cells(double lo, double hi, double size) {
  const double cells = (hi - lo) / size;
  return static_cast<std::size_t>(std::ceil(cells - 1e-9));
}

std::array<double, 3> VoxelGrid::voxel_lo(const Voxel& v) const {
  return {range.x1 + static_cast<double>(v.index[0]) * voxel_size[0],
          range.y1 + static_cast<double>(v.index[1]) * voxel_size[1],
          range.z1 + static_cast<double>(v.index[2]) * voxel_size[2]};
}

std::array<double, 3> VoxelGrid::voxel_center(const Voxel& v) const {
  auto lo = voxel_lo(v);
  for (int a = 0; a < 3; ++a) lo[a] += 0.5 * voxel_size[a];
  return lo;
}

VoxelGrid voxelize(const Frame& frame, const PointRange& range, const std::array<double, 3>& voxel_size,
                   std::size_t max_points_per_voxel) {
  if (!range.valid()) throw std::invalid_argument("voxelize: invalid range");
  if (!(voxel_size[0] > 0 && voxel_size[1] > 0 && voxel_size[2] > 0)) {
    throw std::invalid_argument("voxelize: voxel sizes must be positive");
  }
  VoxelGrid grid;
  grid.range = range;
  grid.voxel_size = voxel_size;
  grid.dims = {grid_cells(range.x1, range.x2, voxel_size[0]), grid_cells(range.y1, range.y2, voxel_size[1]),
               grid_cells(range.z1, range.z2, voxel_size[2])};
  grid.point_voxel.assign(frame.points.size(), -1);

  const std::array<double, 3> origin{range.x1, range.y1, range.z1};
  std::map<std::size_t, std::size_t> slot;  // linear voxel index -> position in grid.voxels
  for (std::size_t i = 0; i < frame.points.size(); ++i) {
    const Point& p = frame.points[i];
    if (!range.contains(p.x, p.y, p.z)) continue;
    const std::array<double, 3> c{p.x, p.y, p.z};
    std::array<std::size_t, 3> idx{};
    for (int a = 0; a < 3; ++a) {
      const auto k = static_cast<std::size_t>(std::floor((c[a] - origin[a]) / voxel_size[a]));
      idx[a] = std::min(k, grid.dims[a] - 1);
    }
    const std::size_t key = (idx[0] * grid.dims[1] + idx[1]) * grid.dims[2] + idx[2];
    auto [it, inserted] = slot.try_emplace(key, grid.voxels.size());
    if (inserted) grid.voxels.push_back({idx, {}});
    auto& vox = grid.voxels[it->second];
    if (vox.points.size() >= max_points_per_voxel) continue;
    vox.points.push_back(i);
    grid.point_voxel[i] = static_cast<std::int64_t>(it->second);
  }
  return grid;
}

BEVGrid bev_scatter(const VoxelGrid& grid, const DiffTensor& voxel_features) {
  if (voxel_features.rank() != 2 || voxel_features.dim(0) != grid.voxels.size()) {
    throw ShapeError("bev_scatter: " + std::to_string(grid.voxels.size()) + " occupied voxels but features " +
                     shape_str(voxel_features.shape()));
  }
  const std::size_t h = grid.dims[0], w = grid.dims[1], c = voxel_features.dim(1);
  const std::size_t hw = h * w;
  const auto fv = voxel_features.values();
  std::vector<double> out(c * hw, 0.0);
  // Source voxel per (channel, cell); -1 when empty.
  std::vector<std::int64_t> src(c * hw, -1);
  for (std::size_t v = 0; v < grid.voxels.size(); ++v) {
    const std::size_t cell = grid.voxels[v].index[0] * w + grid.voxels[v].index[1];
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double val = fv[v * c + ch];
      std::int64_t& s = src[ch * hw + cell];
      if (s < 0 || val > out[ch * hw + cell] ||
          (val == out[ch * hw + cell] && grid.voxels[v].index[2] < grid.voxels[static_cast<std::size_t>(s)].index[2])) {
        s = static_cast<std::int64_t>(v);
        out[ch * hw + cell] = val;
      }
    }
  }
  BEVGrid bev;
  bev.height = h;
  bev.width = w;
  bev.channels = c;
  bev.values = DiffTensor::make_result({c, h, w}, std::move(out), {voxel_features},
                                       [voxel_features, src = std::move(src), c, hw](std::span<const double> g) mutable {
                                         auto gf = voxel_features.grad_buffer();
                                         for (std::size_t ch = 0; ch < c; ++ch)
                                           for (std::size_t cell = 0; cell < hw; ++cell) {
                                             const std::int64_t s = src[ch * hw + cell];
                                             if (s >= 0) gf[static_cast<std::size_t>(s) * c + ch] += g[ch * hw + cell];
                                           }
                                       });
  return bev;
}

namespace {

double overlap(const Box3D& a, const Box3D& b, int axis) {
  return std::max(0.0, std::min(a.hi(axis), b.hi(axis)) - std::max(a.lo(axis), b.lo(axis)));
}

}  // namespace

double iou_bev(const Box3D& a, const Box3D& b) {
  const double inter = overlap(a, b, 0) * overlap(a, b, 1);
  const double uni = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

double iou_3d(const Box3D& a, const Box3D& b) {
  const double inter = overlap(a, b, 0) * overlap(a, b, 1) * overlap(a, b, 2);
  const double uni = a.size[0] * a.size[1] * a.size[2] + b.size[0] * b.size[1] * b.size[2] - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

BoxDeltas box_encode(const Box3D& gt, const Box3D& anchor) {
  if (!gt.valid() || !anchor.valid()) throw std::invalid_argument("box_encode: sizes must be positive");
  BoxDeltas d{};
  for (int a = 0; a < 3; ++a) {
    d[a] = (gt.center[a] - anchor.center[a]) / anchor.size[a];
    d[3 + a] = std::log(gt.size[a] / anchor.size[a]);
  }
  return d;
}

Box3D box_decode(const BoxDeltas& deltas, const Box3D& anchor) {
  if (!anchor.valid()) throw std::invalid_argument("box_decode: anchor sizes must be positive");
  Box3D b;
  b.class_id = anchor.class_id;
  for (int a = 0; a < 3; ++a) {
    b.center[a] = anchor.center[a] + deltas[a] * anchor.size[a];
    b.size[a] = anchor.size[a] * std::exp(deltas[3 + a]);
  }
  return b;
}

std::vector<std::size_t> nms_bev(std::span<const Box3D> boxes, std::span<const double> scores, double iou_thresh) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("nms_bev: boxes/scores size mismatch");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  std::vector<bool> suppressed(boxes.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou_bev(boxes[i], boxes[j]) > iou_thresh) suppressed[j] = true;
    }
  }
  return kept;
}

}  // namespace promptdet
