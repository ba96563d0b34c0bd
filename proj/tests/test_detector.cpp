#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "promptdet/detector.hpp"
#include "support.hpp"

using namespace promptdet;
using promptdet::testing::micro_config;
using promptdet::testing::micro_frames;
using promptdet::testing::micro_spec;
using promptdet::testing::randv;

namespace {

Box3D box(double cx, double cy, double cz, double l, double w, double h, int cls) {
  Box3D b;
  b.center = {cx, cy, cz};
  b.size = {l, w, h};
  b.class_id = cls;
  return b;
}

void fill(DiffTensor& t, double v) { std::fill(t.mutable_values().begin(), t.mutable_values().end(), v); }

DiffTensor& param(Detector& d, const std::string& name) { return d.params().get(name); }

std::vector<double> values(const DiffTensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(DetectorConfig, ValidatesAndRoundTrips) {
  DetectorConfig c;
  EXPECT_NO_THROW(c.validate());
  c.alpha = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = DetectorConfig{};
  c.anchors[1].size[2] = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = micro_config(4);
  c.ocrl_enabled = true;
  c.alpha = 0.25;
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
  EXPECT_THROW(config_from_json(nlohmann::json{{"no_such_key", 1}}), std::invalid_argument);
}

TEST(DetectorShape, PlaneAndOutputSizes) {
  Detector full{DetectorConfig{}};
  EXPECT_EQ(full.bev_height(), 188u);
  EXPECT_EQ(full.out_height(), 94u);
  Detector desk{desk_config()};
  EXPECT_EQ(desk.bev_width(), 94u);
  EXPECT_EQ(desk.out_width(), 47u);
  Detector micro{micro_config()};
  EXPECT_EQ(micro.bev_height(), 16u);
  EXPECT_EQ(micro.out_height(), 8u);
  // Anchor (i, j) sits over the center of BEV cell (2i, 2j).
  const Box3D a = micro.anchor(kCar, 3, 5);
  EXPECT_DOUBLE_EQ(a.center[0], -12.8 + 6.5 * 1.6);
  EXPECT_DOUBLE_EQ(a.center[1], -12.8 + 10.5 * 1.6);
}

TEST(Encoder, SinglePointIsActivationOfNormOfLinear) {
  Detector det(micro_config(2));
  Frame f;
  f.points = {{1.1, -2.3, 0.4, 0.7}};
  const VoxelGrid g = det.voxelize(f);
  const DiffTensor out = det.encode_voxels(f, g, false);
  ASSERT_EQ(out.shape(), (Shape{1, 4}));
  const auto c = g.voxel_center(g.voxels[0]);
  const double p[4] = {1.1 - c[0], -2.3 - c[1], 0.4, 0.7};
  const auto w = values(param(det, "encoder.linear.w")), b = values(param(det, "encoder.linear.b"));
  const auto gm = values(param(det, "encoder.norm.gamma")), be = values(param(det, "encoder.norm.beta"));
  const MSBNLayer& n = det.norm();
  for (std::size_t j = 0; j < 4; ++j) {
    double h = b[j];
    for (std::size_t k = 0; k < 4; ++k) h += p[k] * w[k * 4 + j];
    const double z = (h - n.running_mean[j]) / std::sqrt(n.running_var[j] + n.epsilon) * gm[j] + be[j];
    EXPECT_NEAR(out.at(j), std::max(0.0, z), 1e-12);
  }
}

TEST(Encoder, DuplicatePointLeavesVoxelFeatureUnchanged) {
  Detector det(micro_config(3));
  Frame one, two;
  one.points = {{2.0, 3.0, 0.1, 0.4}};
  two.points = {one.points[0], one.points[0]};
  const auto a = det.encode_voxels(one, det.voxelize(one), false);
  const auto b = det.encode_voxels(two, det.voxelize(two), false);
  EXPECT_EQ(values(a), values(b));
}

TEST(Encoder, EmptyFrameGivesEmptyFeatures) {
  Detector det(micro_config());
  const Frame f;
  EXPECT_EQ(det.encode_voxels(f, det.voxelize(f), true).shape(), (Shape{0, 4}));
}

TEST(Encoder, GradCheckOnFivePointFrame) {
  for (std::uint64_t seed : {1, 2}) {
    DetectorConfig c = micro_config(seed);
    c.msbn_enabled = true;
    Detector det(c);
    Frame f;
    const auto v = randv(20, seed, -10, 10);
    for (int i = 0; i < 5; ++i) f.points.push_back({v[i * 4], v[i * 4 + 1], v[i * 4 + 2] * 0.2, (v[i * 4 + 3] + 10) / 20});
    const VoxelGrid g = det.voxelize(f);
    const auto proj = randv(g.voxels.size() * 4, seed + 9);
    const auto m0 = det.norm().running_mean, v0 = det.norm().running_var;
    auto r = finite_diff_check(
        [&] {
          det.norm().running_mean = m0;
          det.norm().running_var = v0;
          const DiffTensor y = det.encode_voxels(f, g, true);
          return sum(mul(y, DiffTensor::from(y.shape(), proj)));
        },
        {param(det, "encoder.linear.w"), param(det, "encoder.linear.b"), param(det, "encoder.norm.gamma"),
         param(det, "encoder.norm.beta")},
        {1e-6, 1e-3});
    EXPECT_LT(r.max_relative_error, 1e-3);
  }
}

TEST(Backbone, HalvesThePlane) {
  for (bool mask : {false, true}) {
    DetectorConfig c = micro_config();
    c.mask_enabled = mask;
    Detector det(c);
    const RangeMask ones = all_ones_mask(16, 16);
    const auto y = det.backbone_forward(DiffTensor::zeros({2, 4, 16, 16}), std::vector<RangeMask>{ones, ones});
    EXPECT_EQ(y.shape(), (Shape{2, 4, 8, 8}));
    for (double v : y.values()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Backbone, ZeroInputDependsOnlyOnMaskAndBiases) {
  DetectorConfig c = micro_config(5);
  c.mask_enabled = true;
  Detector det(c);
  const RangeMask half = det.mask_for(micro_spec(1, 0.0, 12.0)), ones = all_ones_mask(16, 16);
  const DiffTensor zero = DiffTensor::zeros({1, 4, 16, 16});
  // Mask taps are the last input channel of every conv.
  auto set_mask_taps = [&](double lo, double hi) {
    for (int b = 1; b <= 3; ++b) {
      DiffTensor& w = param(det, "backbone.conv" + std::to_string(b) + ".w");
      const std::size_t cin = w.dim(1);
      const auto r = randv(w.dim(0) * 9, 40 + b, lo, hi);
      for (std::size_t o = 0; o < w.dim(0); ++o)
        for (std::size_t k = 0; k < 9; ++k) w.mutable_values()[(o * cin + cin - 1) * 9 + k] = r[o * 9 + k];
    }
  };
  set_mask_taps(-0.5, 0.5);
  const auto a = values(det.backbone_forward(zero, std::vector<RangeMask>{half}));
  EXPECT_EQ(a, values(det.backbone_forward(zero, std::vector<RangeMask>{half})));
  EXPECT_NE(a, values(det.backbone_forward(zero, std::vector<RangeMask>{ones})));
  // Zeroing the mask taps and the biases leaves nothing to propagate.
  set_mask_taps(0.0, 0.0);
  for (int b = 1; b <= 3; ++b) fill(param(det, "backbone.conv" + std::to_string(b) + ".b"), 0.0);
  for (double v : det.backbone_forward(zero, std::vector<RangeMask>{half}).values()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, MaskPromptStartsAsNoOp) {
  DetectorConfig c = micro_config(6);
  Detector plain(c);
  c.mask_enabled = true;
  Detector masked(c);
  const DiffTensor x = DiffTensor::from({1, 4, 16, 16}, randv(4 * 16 * 16, 8));
  const RangeMask half = masked.mask_for(micro_spec(1, 0.0, 12.0));
  EXPECT_EQ(values(plain.backbone_forward(x, {})), values(masked.backbone_forward(x, std::vector<RangeMask>{half})));
}

TEST(Backbone, MaskCountMismatchThrows) {
  DetectorConfig c = micro_config();
  c.mask_enabled = true;
  Detector det(c);
  EXPECT_THROW(det.backbone_forward(DiffTensor::zeros({2, 4, 16, 16}), std::vector<RangeMask>{all_ones_mask(16, 16)}),
               std::invalid_argument);
}

TEST(Backbone, GradCheckThroughOneBlock) {
  DetectorConfig c = micro_config(6);
  c.mask_enabled = true;
  Detector det(c);
  for (int b = 1; b <= 3; ++b) {
    DiffTensor& bias = param(det, "backbone.conv" + std::to_string(b) + ".b");
    const auto v = randv(bias.numel(), b, -0.3, 0.3);
    std::copy(v.begin(), v.end(), bias.mutable_values().begin());
  }
  auto x = DiffTensor::from({1, 4, 16, 16}, randv(1024, 7, 0, 1), true);
  const std::vector<RangeMask> m{det.mask_for(micro_spec(1, -4.0, 12.0))};
  const auto proj = randv(4 * 8 * 8, 8);
  auto r = finite_diff_check([&] { return sum(mul(det.backbone_forward(x, m), DiffTensor::from({1, 4, 8, 8}, proj))); },
                             {x, param(det, "backbone.conv1.w"), param(det, "backbone.conv2.b")}, {1e-6, 1e-3});
  EXPECT_LT(r.max_relative_error, 1e-3);
}

TEST(DenseHead, ZeroWeightsGiveHalfObjectness) {
  Detector det(micro_config());
  fill(param(det, "head.w"), 0.0);
  fill(param(det, "head.b"), 0.0);
  const DenseOutput d = det.dense_head_forward(DiffTensor::from({2, 4, 8, 8}, randv(512, 1)));
  ASSERT_EQ(d.rows.shape(), (Shape{2 * 8 * 8, 8 * kNumClasses}));
  for (std::size_t r = 0; r < d.rows.dim(0); ++r)
    for (int k = 0; k < kNumClasses; ++k) EXPECT_EQ(1.0 / (1.0 + std::exp(-d.rows.at(r * 8 * kNumClasses + k))), 0.5);
  // Uniform class logits: every proposal scores 0.5 / K.
  for (const auto& frame : det.propose(d))
    for (const auto& p : frame) EXPECT_NEAR(p.score, 0.5 / kNumClasses, 1e-15);
}

TEST(Targets, SingleObjectMatchesBruteForceAssignment) {
  Detector det(micro_config());
  Frame f;
  f.boxes = {box(1.3, -2.2, -0.8, 4.6, 1.9, 1.6, kCar)};
  const VoxelGrid g = det.voxelize(f);
  const BatchItem item{&f, &g, nullptr, 0};
  const DenseTargets t = det.assign_targets(std::span<const BatchItem>(&item, 1));
  const std::size_t H = det.out_height(), W = det.out_width(), K = kNumClasses;
  double top = -1;
  std::size_t top_cell = 0;
  for (std::size_t c = 0; c < H * W; ++c) {
    const double iou = iou_bev(det.anchor(kCar, c / W, c % W), f.boxes[0]);
    if (iou > top) top = iou, top_cell = c;
  }
  std::size_t positives = 0;
  for (std::size_t c = 0; c < H * W; ++c) {
    const Box3D a = det.anchor(kCar, c / W, c % W);
    const double iou = iou_bev(a, f.boxes[0]);
    const bool pos = iou > 0.5 || c == top_cell;
    positives += pos;
    EXPECT_EQ(t.objectness[c * K + kCar], pos ? 1.0 : 0.0) << c;
    EXPECT_EQ(t.objectness_weight[c * K + kCar], pos || iou < 0.35 ? 1.0 : 0.0) << c;
    if (pos) {
      const auto d = box_encode(f.boxes[0], a);
      for (std::size_t q = 0; q < 6; ++q) EXPECT_DOUBLE_EQ(t.deltas[c * 6 * K + 6 * kCar + q], d[q]);
      EXPECT_EQ(t.class_label[c], kCar);
    }
    // Other classes see no object: all negatives.
    for (int k : {kPedestrian, kCyclist}) {
      EXPECT_EQ(t.objectness[c * K + k], 0.0);
      EXPECT_EQ(t.objectness_weight[c * K + k], 1.0);
    }
  }
  EXPECT_EQ(t.num_positive, positives);
  EXPECT_GE(positives, 1u);
}

TEST(Targets, ObjectBetweenAnchorsTakesNearestCell) {
  Detector det(micro_config());
  Frame f;
  // A 0.2 m pedestrian midway between anchor centers overlaps none of them.
  f.boxes = {box(-12.8 + 6.5 * 1.6 + 1.5, -12.8 + 4.5 * 1.6, -0.75, 0.2, 0.2, 1.7, kPedestrian)};
  const VoxelGrid g = det.voxelize(f);
  const BatchItem item{&f, &g, nullptr, 0};
  const DenseTargets t = det.assign_targets(std::span<const BatchItem>(&item, 1));
  ASSERT_EQ(t.num_positive, 1u);
  const std::size_t W = det.out_width();
  EXPECT_EQ(t.objectness[(3 * W + 2) * kNumClasses + kPedestrian], 1.0);
}

TEST(RoiPool, ProposalOnOneCellReadsThatCellTiled) {
  const auto fv = randv(2 * 3 * 5 * 5, 4);
  const DiffTensor feat = DiffTensor::from({2, 3, 5, 5}, fv);
  const RoiPoolGeometry geo{-4.0, -4.0, 0.8, 0.8, 2, 4};
  Proposal p;
  p.box = box(-4.0 + 4.5 * 0.8, -4.0 + 6.5 * 0.8, 0, 1e-9, 1e-9, 1, kCar);  // output cell (2, 3)
  const std::size_t frame[] = {1};
  const DiffTensor out = roi_bilinear_pool(feat, std::span<const Proposal>(&p, 1), frame, geo);
  ASSERT_EQ(out.shape(), (Shape{1, 3 * 16}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t b = 0; b < 16; ++b) EXPECT_NEAR(out.at(c * 16 + b), fv[((1 * 3 + c) * 5 + 2) * 5 + 3], 1e-8);
}

TEST(RoiPool, MatchesBilinearOracleAndZeroOutside) {
  const auto fv = randv(1 * 2 * 6 * 6, 5);
  const DiffTensor feat = DiffTensor::from({1, 2, 6, 6}, fv);
  const RoiPoolGeometry geo{0.0, 0.0, 1.0, 1.0, 2, 2};
  std::vector<Proposal> ps(2);
  ps[0].box = box(5.3, 4.1, 0, 2.2, 1.4, 1, kCar);
  ps[1].box = box(-40, -40, 0, 1, 1, 1, kCar);
  const std::size_t frame[] = {0, 0};
  const DiffTensor out = roi_bilinear_pool(feat, ps, frame, geo);
  auto at = [&](std::size_t c, long i, long j) { return i < 0 || j < 0 || i >= 6 || j >= 6 ? 0.0 : fv[(c * 6 + i) * 6 + j]; };
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t u = 0; u < 2; ++u)
      for (std::size_t v = 0; v < 2; ++v) {
        const double x = 5.3 - 1.1 + (u + 0.5) * 1.1, y = 4.1 - 0.7 + (v + 0.5) * 0.7;
        const double fi = (x - 0.5) / 2, fj = (y - 0.5) / 2;
        const long i0 = static_cast<long>(std::floor(fi)), j0 = static_cast<long>(std::floor(fj));
        const double ti = fi - i0, tj = fj - j0;
        const double ref = (1 - ti) * (1 - tj) * at(c, i0, j0) + ti * (1 - tj) * at(c, i0 + 1, j0) +
                           (1 - ti) * tj * at(c, i0, j0 + 1) + ti * tj * at(c, i0 + 1, j0 + 1);
        EXPECT_NEAR(out.at(c * 4 + u * 2 + v), ref, 1e-12);
        EXPECT_EQ(out.at(8 + c * 4 + u * 2 + v), 0.0);
      }
}

TEST(RoiHead, OcrlOffConsumesFeaturesDirectly) {
  Detector det(micro_config(2));
  EXPECT_EQ(det.ocrl(), nullptr);
  for (const auto& [name, p] : det.params().entries()) EXPECT_EQ(name.find("ocrl"), std::string::npos);
  std::vector<std::vector<Proposal>> props(1);
  props[0].push_back({box(1, 1, 0, 4, 2, 1.5, kCar), 0.5, kCar});
  props[0].push_back({box(-5, 3, 0, 1, 1, 1.5, kPedestrian), 0.4, kPedestrian});
  const RoiOutput o = det.roi_head_forward(DiffTensor::from({1, 4, 8, 8}, randv(256, 3, 0, 1)), props);
  EXPECT_EQ(values(o.enhanced), values(o.features));
  ASSERT_EQ(o.refinement.shape(), (Shape{2, 7}));
  EXPECT_EQ(o.features.shape(), (Shape{2, det.roi_feature_dim()}));
}

TEST(RoiHead, ZeroProposalsGiveEmptyOutputs) {
  DetectorConfig c = micro_config();
  c.ocrl_enabled = true;
  Detector det(c, 2);
  const RoiOutput o = det.roi_head_forward(DiffTensor::zeros({1, 4, 8, 8}), {{}});
  EXPECT_TRUE(o.rois.empty());
  EXPECT_EQ(o.refinement.dim(0), 0u);
}

TEST(RoiHead, GradCheckThroughRoiPath) {
  DetectorConfig c = micro_config(7);
  c.ocrl_enabled = true;
  Detector det(c, 2);
  for (const char* n : {"roi.b1", "roi.w2"}) {
    const auto v = randv(param(det, n).numel(), 11, -0.3, 0.3);
    std::copy(v.begin(), v.end(), param(det, n).mutable_values().begin());
  }
  auto feat = DiffTensor::from({1, 4, 8, 8}, randv(256, 3, 0, 1), true);
  std::vector<std::vector<Proposal>> props(1);
  props[0].push_back({box(1.2, 0.7, 0, 4, 2, 1.5, kCar), 0.5, kCar});
  props[0].push_back({box(-5.1, 3.3, 0, 1, 1, 1.5, kPedestrian), 0.4, kPedestrian});
  const auto proj = randv(14, 12);
  auto r = finite_diff_check(
      [&] { return sum(mul(det.roi_head_forward(feat, props).refinement, DiffTensor::from({2, 7}, proj))); },
      {feat, param(det, "roi.w1"), param(det, "roi.b2"), param(det, "roi.ocrl.f.w1")}, {1e-6, 1e-3});
  EXPECT_LT(r.max_relative_error, 1e-3);
}

TEST(DetectorGradient, EndToEndAllPromptsTwoFrames) {
  for (std::uint64_t seed : {11, 12}) {
    const GradCheckReport r = promptdet::testing::detector_gradcheck(seed, 300);
    EXPECT_GT(r.checked, 100u);
    EXPECT_LT(r.max_relative_error, 1e-3) << "seed " << seed;
  }
}

TEST(Loss, PerfectPredictionsAreNearZero) {
  Detector det(micro_config());
  Frame f;
  f.boxes = {box(1.3, -2.2, -0.8, 4.6, 1.9, 1.6, kCar), box(-6.0, 5.0, -0.75, 0.8, 0.7, 1.7, kPedestrian)};
  const VoxelGrid g = det.voxelize(f);
  const BatchItem item{&f, &g, nullptr, 0};
  const std::span<const BatchItem> batch(&item, 1);
  const DenseTargets t = det.assign_targets(batch);
  const std::size_t rows = det.out_height() * det.out_width(), K = kNumClasses;
  std::vector<double> v(rows * 8 * K, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < K; ++k) {
      v[r * 8 * K + k] = t.objectness[r * K + k] > 0 ? 30.0 : -30.0;
      for (std::size_t q = 0; q < 6; ++q) v[r * 8 * K + K + 6 * k + q] = t.deltas[r * 6 * K + 6 * k + q];
    }
    v[r * 8 * K + 7 * K + static_cast<std::size_t>(t.class_label[r])] = 30.0;
  }
  DenseOutput dense{DiffTensor::from({rows, 8 * K}, v), 1, det.out_height(), det.out_width()};
  // RoIs exactly on the objects: quality target 1, zero deltas.
  RoiOutput roi;
  for (const auto& b : f.boxes) {
    roi.rois.push_back({b, 0.9, b.class_id});
    roi.roi_frame.push_back(0);
  }
  roi.refinement = DiffTensor::from({2, 7}, {0, 0, 0, 0, 0, 0, 30, 0, 0, 0, 0, 0, 0, 30});
  const LossBreakdown lb = det.compute_detection_loss(dense, roi, batch);
  EXPECT_LT(lb.l_det, 0.01);
  EXPECT_EQ(lb.num_positive, t.num_positive);
}

TEST(Loss, EmptyFrameIsObjectnessOverNegativesOnly) {
  Detector det(micro_config(1));
  const Frame f;
  const VoxelGrid g = det.voxelize(f);
  const RangeMask m = all_ones_mask(16, 16);
  const BatchItem item{&f, &g, &m, 0};
  std::vector<std::vector<Proposal>> props;
  const LossBreakdown lb = det.training_loss(std::span<const BatchItem>(&item, 1), nullptr, &props);
  EXPECT_EQ(lb.num_positive, 0u);
  EXPECT_GT(lb.objectness, 0.0);
  EXPECT_EQ(lb.regression, 0.0);
  EXPECT_EQ(lb.classification, 0.0);
  EXPECT_EQ(lb.roi_regression, 0.0);
  EXPECT_TRUE(std::isfinite(lb.l_det));
  EXPECT_TRUE(det.predict(f, micro_spec(1)).boxes.empty());
}

TEST(Training, PinnedProposalLossDecreasesMonotonicallyFor50Steps) {
  // Proposal re-selection makes the RoI term piecewise; with the proposals
  // pinned the loss is smooth and a small Adam step must always descend.
  for (std::uint64_t seed : {0, 1, 2}) {
    DetectorConfig c = micro_config(seed);
    c.roi_hidden = 32;
    Detector det(c);
    const DatasetFrames d = micro_frames(1, 40 + seed, 1);
    const VoxelGrid g = det.voxelize(d.frames[0]);
    const BatchItem item{&d.frames[0], &g, nullptr, 0};
    const std::span<const BatchItem> batch(&item, 1);
    std::vector<std::vector<Proposal>> props(1);
    for (const auto& b : d.frames[0].boxes) props[0].push_back({b, 1.0, b.class_id});
    props[0].push_back({box(-8, -8, -0.8, 4.2, 1.8, 1.6, kCar), 0.1, kCar});
    OptimizerState opt = make_optimizer_state(det.params(), 1e-3);
    double prev = INFINITY;
    for (int step = 0; step < 50; ++step) {
      det.params().zero_grad();
      const LossBreakdown lb = det.training_loss(batch, &props);
      ASSERT_LT(lb.total.item(), prev) << "seed " << seed << " step " << step;
      prev = lb.total.item();
      backward(lb.total);
      adam_step(det.params(), opt, 1e-3);
    }
  }
}

TEST(Training, TinyDatasetLossFallsBelowQuarterIn200Steps) {
  for (std::uint64_t seed : {0, 1, 2}) {
    DetectorConfig c = micro_config(seed);
    c.roi_hidden = 32;
    c.epochs = 100;  // 4 frames, batch 2: 200 steps
    Detector det(c);
    const std::vector<DatasetFrames> d{micro_frames(1, 60 + seed, 4)};
    const TrainResult r = train(det, d);
    ASSERT_EQ(r.steps, 200u);
    auto avg = [&](std::size_t from) {
      double s = 0;
      for (std::size_t i = from; i < from + 5; ++i) s += r.log[i].total;
      return s / 5;
    };
    EXPECT_LT(avg(195), 0.25 * avg(0)) << "seed " << seed;
  }
}

TEST(Training, OverfitsSingleFrameAndDetectsIt) {
  for (std::uint64_t seed : {0, 1, 2}) {
    DetectorConfig c = micro_config(seed);
    c.roi_hidden = 32;
    c.batch_size = 1;
    c.epochs = 500;
    Detector det(c);
    const std::vector<DatasetFrames> d{micro_frames(1, 40 + seed, 1)};
    const TrainResult r = train(det, d);
    double best = INFINITY;
    for (const auto& row : r.log) best = std::min(best, row.l_det);
    EXPECT_LT(best, 0.05) << "seed " << seed;

    const Frame& f = d[0].frames[0];
    const DetectionResult p = det.predict(f, d[0].spec);
    double top = 0;
    for (std::size_t i = 0; i < p.boxes.size(); ++i)
      for (const auto& gt : f.boxes)
        if (gt.class_id == p.class_ids[i]) top = std::max(top, iou_3d(p.boxes[i], gt));
    EXPECT_GE(top, 0.5);
    EXPECT_TRUE(std::is_sorted(p.scores.begin(), p.scores.end(), std::greater<>()));
    for (std::size_t i = 0; i < p.boxes.size(); ++i) {
      EXPECT_GE(p.scores[i], 0.1);
      EXPECT_LE(p.scores[i], 1.0);
      EXPECT_TRUE(c.global_range.contains(p.boxes[i].center[0], p.boxes[i].center[1], p.boxes[i].center[2]));
    }
  }
}

TEST(Training, TwoDatasetsAppearInEveryEpoch) {
  DetectorConfig c = micro_config(4);
  c.epochs = 3;
  c.batch_size = 3;
  Detector det(c);
  const std::vector<DatasetFrames> d{micro_frames(1, 1, 5), micro_frames(2, 2, 2, -4.0, 12.0)};
  const TrainResult r = train(det, d);
  std::vector<std::set<int>> seen(3);
  for (const auto& row : r.log) seen[row.epoch].insert(row.dataset_ids.begin(), row.dataset_ids.end());
  for (const auto& s : seen) EXPECT_EQ(s, (std::set<int>{1, 2}));
  EXPECT_NE(train_log_csv(r).find("step,lr,L_det,L_dis,total"), std::string::npos);
}

TEST(Training, DeterministicAndCheckpointRoundTrip) {
  DetectorConfig c = micro_config(9);
  c.msbn_enabled = c.mask_enabled = c.ocrl_enabled = true;
  c.epochs = 2;
  const std::vector<DatasetFrames> d{micro_frames(1, 1, 3), micro_frames(2, 2, 3, -4.0, 12.0)};
  Detector a(c, 2), b(c, 2);
  EXPECT_EQ(train_log_csv(train(a, d)), train_log_csv(train(b, d)));

  const auto path = std::filesystem::temp_directory_path() / "promptdet_detector_ckpt.bin";
  a.save(path);
  Detector fresh(c, 2);
  fresh.load(path);
  std::filesystem::remove(path);
  for (std::size_t i = 0; i < a.params().entries().size(); ++i)
    EXPECT_EQ(values(a.params().entries()[i].second), values(fresh.params().entries()[i].second));
  EXPECT_EQ(a.norm().running_mean, fresh.norm().running_mean);
  EXPECT_EQ(a.norm().running_var, fresh.norm().running_var);
  const auto pa = a.predict(d[0].frames[0], d[0].spec), pf = fresh.predict(d[0].frames[0], d[0].spec);
  EXPECT_EQ(pa.scores, pf.scores);
}

TEST(Training, PromptTogglesAreIndependentOfPromptHyperparameters) {
  DetectorConfig base = micro_config(3);
  base.epochs = 2;
  const std::vector<DatasetFrames> d{micro_frames(1, 5, 4), micro_frames(2, 6, 4, -4.0, 12.0)};
  Detector plain(base, 1);
  const std::string ref = train_log_csv(train(plain, d));
  DetectorConfig other = base;
  other.alpha = 0.8;
  other.dis_loss_weight = 3.0;
  Detector off(other, 5);
  EXPECT_EQ(train_log_csv(train(off, d)), ref);
  // Turning one prompt on changes the trajectory.
  other.mask_enabled = true;
  Detector on(other, 2);
  EXPECT_NE(train_log_csv(train(on, d)), ref);
}

TEST(Training, NoDatasetsAndEmptyDatasetThrow) {
  Detector det(micro_config());
  EXPECT_THROW(train(det, std::vector<DatasetFrames>{}), std::invalid_argument);
  EXPECT_THROW(train(det, std::vector<DatasetFrames>{{micro_spec(1), {}}}), std::invalid_argument);
}

TEST(Predict, UnseenSpecRunsWithItsMask) {
  DetectorConfig c = micro_config(2);
  c.mask_enabled = true;
  c.epochs = 1;
  Detector det(c);
  train(det, std::vector<DatasetFrames>{micro_frames(1, 3, 2)});
  const DatasetFrames unseen = micro_frames(7, 4, 1, 0.0, 12.0);
  EXPECT_NO_THROW(det.predict(unseen.frames[0], unseen.spec));
}

TEST(NmsProposals, ClassAwareAndMatchesOracle) {
  std::vector<Proposal> ps;
  ps.push_back({box(0, 0, 0, 2, 2, 2, kCar), 0.9, kCar});
  ps.push_back({box(0, 0, 0, 2, 2, 2, kPedestrian), 0.8, kPedestrian});  // same box, other class: kept
  ps.push_back({box(0.1, 0, 0, 2, 2, 2, kCar), 0.7, kCar});              // suppressed
  ps.push_back({box(9, 9, 0, 2, 2, 2, kCar), 0.6, kCar});
  const auto kept = nms_proposals(ps, 0.5, 10);
  ASSERT_EQ(kept.size(), 3u);
  EXPECT_EQ(kept[0].score, 0.9);
  EXPECT_EQ(kept[1].score, 0.8);
  EXPECT_EQ(kept[2].score, 0.6);
  EXPECT_EQ(nms_proposals(ps, 0.5, 2).size(), 2u);
}
