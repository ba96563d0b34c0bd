#pragma once

// Shared fixtures for unit tests and the acceptance binary.

#include <random>
#include <vector>

#include "promptdet/detector.hpp"
#include "promptdet/gradcheck.hpp"

namespace promptdet::testing {

inline std::vector<double> randv(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// 25.6 m square plane, 1.6 m voxels: 16 x 16 BEV, 8 x 8 output map.
inline DetectorConfig micro_config(std::uint64_t seed = 0) {
  DetectorConfig c;
  c.global_range = {-12.8, -12.8, -2.0, 12.8, 12.8, 4.0};
  c.voxel_size = {1.6, 1.6, 6.0};
  c.point_channels = 4;
  c.backbone_channels = 4;
  c.roi_grid = 2;
  c.roi_hidden = 8;
  c.num_proposals = 6;
  c.pre_nms_proposals = 32;
  c.max_points_per_voxel = 8;
  c.batch_size = 2;
  c.seed = seed;
  return c;
}

// A sparse dataset that fits the micro plane; `half` narrows its x range.
inline DatasetSpec micro_spec(int id, double x1 = -12.0, double x2 = 12.0) {
  DatasetSpec s = preset_spec("W-like");
  s.id = id;
  s.name = "micro" + std::to_string(id);
  s.point_range = {x1, -12.0, -2.0, x2, 12.0, 4.0};
  s.background_density = 0.03;
  s.points_per_object = 12;
  s.objects_per_frame = {2, 3};
  return s;
}

inline DatasetFrames micro_frames(int id, std::uint64_t seed, std::size_t count, double x1 = -12.0, double x2 = 12.0) {
  DatasetFrames d{micro_spec(id, x1, x2), {}};
  d.frames = generate_frames(d.spec, seed, count);
  return d;
}

// End-to-end finite differences of the full training loss with every prompt
// on. Proposals are pinned from a first pass so the loss is smooth in the
// parameters; MSBN running statistics are restored around each call.
inline GradCheckReport detector_gradcheck(std::uint64_t seed, std::size_t max_coords = 600) {
  DetectorConfig cfg = micro_config(seed);
  cfg.msbn_enabled = cfg.mask_enabled = cfg.ocrl_enabled = true;
  Detector det(cfg, 2);
  // Break the near-zero head init so every loss term carries gradient, and
  // the zero biases: on empty BEV cells they put conv outputs exactly on the
  // relu kink, where the loss is not differentiable.
  for (auto& [name, p] : det.params().entries()) {
    const bool bias = name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2");
    if (name == "head.w" || name == "roi.w2" || (bias && name != "head.b")) {
      const auto v = randv(p.numel(), seed * 31 + name.size(), -0.3, 0.3);
      std::copy(v.begin(), v.end(), p.mutable_values().begin());
    }
  }
  const DatasetFrames a = micro_frames(1, seed, 1), b = micro_frames(2, seed + 100, 1, -4.0, 12.0);
  const VoxelGrid ga = det.voxelize(a.frames[0]), gb = det.voxelize(b.frames[0]);
  const RangeMask ma = det.mask_for(a.spec), mb = det.mask_for(b.spec);
  const std::vector<BatchItem> batch{{&a.frames[0], &ga, &ma, 0}, {&b.frames[0], &gb, &mb, 1}};

  std::vector<std::vector<Proposal>> props;
  const auto mean0 = det.norm().running_mean, var0 = det.norm().running_var;
  det.training_loss(batch, nullptr, &props);
  std::vector<DiffTensor> leaves;
  for (auto& [name, p] : det.params().entries()) leaves.push_back(p);
  auto fn = [&] {
    det.norm().running_mean = mean0;
    det.norm().running_var = var0;
    return det.training_loss(batch, &props).total;
  };
  GradCheckOptions o;
  o.step = 1e-6;
  o.tolerance = 1e-3;
  o.max_coordinates = max_coords;
  return finite_diff_check(fn, leaves, o);
}

}  // namespace promptdet::testing
