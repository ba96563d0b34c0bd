#include "promptdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "promptdet/rng.hpp"

namespace promptdet {

namespace {

constexpr std::size_t kK = kNumClasses;
constexpr std::size_t kCols = 8 * kK;  // objectness K, deltas 6K, class logits K

double he(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

BoxDeltas clamp_deltas(BoxDeltas d) {
  for (int a = 0; a < 3; ++a) d[3 + a] = std::clamp(d[3 + a], -4.0, 4.0);
  return d;
}

}  // namespace

void DetectorConfig::validate() const {
  if (!global_range.valid()) throw std::invalid_argument("DetectorConfig: invalid global_range");
  for (double v : voxel_size)
    if (!(v > 0)) throw std::invalid_argument("DetectorConfig: voxel sizes must be positive");
  if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("DetectorConfig: alpha must be in [0, 1]");
  if (point_channels == 0 || backbone_channels == 0 || roi_hidden == 0 || roi_grid == 0)
    throw std::invalid_argument("DetectorConfig: channel widths must be positive");
  for (const auto& a : anchors)
    for (double s : a.size)
      if (!(s > 0)) throw std::invalid_argument("DetectorConfig: anchor sizes must be positive");
  if (batch_size == 0) throw std::invalid_argument("DetectorConfig: batch_size must be positive");
  if (max_points_per_voxel == 0) throw std::invalid_argument("DetectorConfig: max_points_per_voxel must be positive");
  if (!(learning_rate > 0)) throw std::invalid_argument("DetectorConfig: learning_rate must be positive");
  if (!(negative_iou <= positive_iou)) throw std::invalid_argument("DetectorConfig: negative_iou > positive_iou");
  if (!(roi_quality_iou[0] < roi_quality_iou[1])) throw std::invalid_argument("DetectorConfig: bad roi_quality_iou");
  if (!(dis_loss_weight >= 0)) throw std::invalid_argument("DetectorConfig: dis_loss_weight must be >= 0");
}

// ---------------------------------------------------------------------------
// Config JSON

DetectorConfig desk_config() {
  DetectorConfig c;
  c.voxel_size = {1.6, 1.6, 6.0};
  c.point_channels = 8;
  c.backbone_channels = 16;
  return c;
}

nlohmann::json config_to_json(const DetectorConfig& c) {
  nlohmann::json anchors = nlohmann::json::object();
  for (int k = 0; k < kNumClasses; ++k)
    anchors[class_name(k)] = {{"size", c.anchors[k].size}, {"center_z", c.anchors[k].center_z}};
  const auto& r = c.global_range;
  return {
      {"msbn_enabled", c.msbn_enabled},
      {"mask_enabled", c.mask_enabled},
      {"ocrl_enabled", c.ocrl_enabled},
      {"alpha", c.alpha},
      {"dis_loss_weight", c.dis_loss_weight},
      {"global_range", {r.x1, r.y1, r.z1, r.x2, r.y2, r.z2}},
      {"voxel_size", c.voxel_size},
      {"max_points_per_voxel", c.max_points_per_voxel},
      {"point_channels", c.point_channels},
      {"backbone_channels", c.backbone_channels},
      {"roi_grid", c.roi_grid},
      {"roi_hidden", c.roi_hidden},
      {"num_proposals", c.num_proposals},
      {"pre_nms_proposals", c.pre_nms_proposals},
      {"anchors", anchors},
      {"positive_iou", c.positive_iou},
      {"negative_iou", c.negative_iou},
      {"roi_foreground_iou", c.roi_foreground_iou},
      {"roi_quality_iou", c.roi_quality_iou},
      {"objectness_weight", c.objectness_weight},
      {"regression_weight", c.regression_weight},
      {"class_weight", c.class_weight},
      {"roi_weight", c.roi_weight},
      {"smooth_l1_beta", c.smooth_l1_beta},
      {"score_threshold", c.score_threshold},
      {"nms_iou", c.nms_iou},
      {"bn_epsilon", c.bn_epsilon},
      {"bn_momentum", c.bn_momentum},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"learning_rate", c.learning_rate},
      {"weight_decay", c.weight_decay},
      {"grad_clip_norm", c.grad_clip_norm},
      {"seed", c.seed},
  };
}

DetectorConfig config_from_json(const nlohmann::json& j, DetectorConfig c) {
  if (!j.is_object()) throw std::invalid_argument("detector config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "msbn_enabled") c.msbn_enabled = v.get<bool>();
    else if (key == "mask_enabled") c.mask_enabled = v.get<bool>();
    else if (key == "ocrl_enabled") c.ocrl_enabled = v.get<bool>();
    else if (key == "alpha") c.alpha = v.get<double>();
    else if (key == "dis_loss_weight") c.dis_loss_weight = v.get<double>();
    else if (key == "global_range") {
      const auto a = v.get<std::array<double, 6>>();
      c.global_range = {a[0], a[1], a[2], a[3], a[4], a[5]};
    } else if (key == "voxel_size") c.voxel_size = v.get<std::array<double, 3>>();
    else if (key == "max_points_per_voxel") c.max_points_per_voxel = v.get<std::size_t>();
    else if (key == "point_channels") c.point_channels = v.get<std::size_t>();
    else if (key == "backbone_channels") c.backbone_channels = v.get<std::size_t>();
    else if (key == "roi_grid") c.roi_grid = v.get<std::size_t>();
    else if (key == "roi_hidden") c.roi_hidden = v.get<std::size_t>();
    else if (key == "num_proposals") c.num_proposals = v.get<std::size_t>();
    else if (key == "pre_nms_proposals") c.pre_nms_proposals = v.get<std::size_t>();
    else if (key == "anchors") {
      for (const auto& [name, a] : v.items()) {
        auto& dst = c.anchors[static_cast<std::size_t>(class_from_name(name))];
        if (a.contains("size")) dst.size = a.at("size").get<std::array<double, 3>>();
        if (a.contains("center_z")) dst.center_z = a.at("center_z").get<double>();
      }
    } else if (key == "positive_iou") c.positive_iou = v.get<double>();
    else if (key == "negative_iou") c.negative_iou = v.get<double>();
    else if (key == "roi_foreground_iou") c.roi_foreground_iou = v.get<double>();
    else if (key == "roi_quality_iou") c.roi_quality_iou = v.get<std::array<double, 2>>();
    else if (key == "objectness_weight") c.objectness_weight = v.get<double>();
    else if (key == "regression_weight") c.regression_weight = v.get<double>();
    else if (key == "class_weight") c.class_weight = v.get<double>();
    else if (key == "roi_weight") c.roi_weight = v.get<double>();
    else if (key == "smooth_l1_beta") c.smooth_l1_beta = v.get<double>();
    else if (key == "score_threshold") c.score_threshold = v.get<double>();
    else if (key == "nms_iou") c.nms_iou = v.get<double>();
    else if (key == "bn_epsilon") c.bn_epsilon = v.get<double>();
    else if (key == "bn_momentum") c.bn_momentum = v.get<double>();
    else if (key == "epochs") c.epochs = v.get<std::size_t>();
    else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
    else if (key == "learning_rate") c.learning_rate = v.get<double>();
    else if (key == "weight_decay") c.weight_decay = v.get<double>();
    else if (key == "grad_clip_norm") c.grad_clip_norm = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw std::invalid_argument("unknown detector config key: " + key);
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Construction

Detector::Detector(DetectorConfig cfg, std::size_t num_datasets) : cfg_(std::move(cfg)), num_datasets_(num_datasets) {
  cfg_.validate();
  if (num_datasets_ == 0) throw std::invalid_argument("Detector: num_datasets must be positive");
  const auto& r = cfg_.global_range;
  bev_h_ = grid_cells(r.x1, r.x2, cfg_.voxel_size[0]);
  bev_w_ = grid_cells(r.y1, r.y2, cfg_.voxel_size[1]);
  out_h_ = (bev_h_ - 1) / 2 + 1;
  out_w_ = (bev_w_ - 1) / 2 + 1;

  const std::size_t c0 = cfg_.point_channels, c2 = cfg_.backbone_channels;
  auto normal = [&](const std::string& name, Shape shape, double sd) {
    return params_.add(name, DiffTensor::random_normal(std::move(shape), sd, mix_seed(cfg_.seed, hash_name(name)), true));
  };
  auto zeros = [&](const std::string& name, Shape shape) { return params_.add(name, DiffTensor::zeros(std::move(shape), true)); };

  enc_w_ = normal("encoder.linear.w", {4, c0}, he(4));
  enc_b_ = zeros("encoder.linear.b", {c0});
  norm_ = MSBNLayer::create(c0, cfg_.alpha, cfg_.bn_epsilon);
  norm_.momentum = cfg_.bn_momentum;
  params_.add("encoder.norm.gamma", norm_.gamma);
  params_.add("encoder.norm.beta", norm_.beta);

  const std::array<std::size_t, 3> cin{c0, c0, c2}, cout{c0, c2, c2};
  for (std::size_t b = 0; b < 3; ++b) {
    const std::string name = "backbone.conv" + std::to_string(b + 1);
    conv_w_[b] = conv_weight(name + ".w", cout[b], cin[b], cfg_.mask_enabled);
    conv_b_[b] = zeros(name + ".b", {cout[b]});
  }

  head_w_ = normal("head.w", {kCols, c2, 1, 1}, 0.01);
  head_b_ = zeros("head.b", {kCols});
  // Objectness prior of 1%, keeps the initial loss from being dominated by easy negatives.
  for (std::size_t k = 0; k < kK; ++k) head_b_.mutable_values()[k] = -std::log(99.0);

  const std::size_t f = roi_feature_dim();
  roi_w1_ = normal("roi.w1", {f, cfg_.roi_hidden}, he(f));
  roi_b1_ = zeros("roi.b1", {cfg_.roi_hidden});
  roi_w2_ = normal("roi.w2", {cfg_.roi_hidden, 7}, 0.01);
  roi_b2_ = zeros("roi.b2", {7});

  if (cfg_.ocrl_enabled) ocrl_ = OCRLHead::create(params_, "roi.ocrl.", f, num_datasets_, cfg_.seed, cfg_.dis_loss_weight);
}

DiffTensor Detector::conv_weight(const std::string& name, std::size_t cout, std::size_t cin, bool with_mask) {
  const double sd = he(cin * 9);
  const DiffTensor base = DiffTensor::random_normal({cout, cin, 3, 3}, sd, mix_seed(cfg_.seed, hash_name(name)));
  if (!with_mask) return params_.add(name, base.detached(true));
  // Mask taps start at zero, so the masked model initially computes exactly
  // what the unmasked one does. A dense all-ones channel at He scale would add
  // a large random offset to every in-range cell of a sparse BEV map.
  std::vector<double> v;
  v.reserve(cout * (cin + 1) * 9);
  const auto bv = base.values();
  for (std::size_t o = 0; o < cout; ++o) {
    v.insert(v.end(), bv.begin() + static_cast<std::ptrdiff_t>(o * cin * 9),
             bv.begin() + static_cast<std::ptrdiff_t>((o + 1) * cin * 9));
    v.insert(v.end(), 9, 0.0);
  }
  return params_.add(name, DiffTensor::from({cout, cin + 1, 3, 3}, std::move(v), true));
}

std::size_t Detector::roi_feature_dim() const { return cfg_.backbone_channels * cfg_.roi_grid * cfg_.roi_grid; }

VoxelGrid Detector::voxelize(const Frame& frame) const {
  return promptdet::voxelize(frame, cfg_.global_range, cfg_.voxel_size, cfg_.max_points_per_voxel);
}

RangeMask Detector::mask_for(const DatasetSpec& spec) const {
  return compute_range_mask(spec, PlaneRange::from(cfg_.global_range), bev_h_, bev_w_);
}

Box3D Detector::anchor(int class_id, std::size_t i, std::size_t j) const {
  const auto& a = cfg_.anchors[static_cast<std::size_t>(class_id)];
  Box3D b;
  b.class_id = class_id;
  b.center = {cfg_.global_range.x1 + (2.0 * static_cast<double>(i) + 0.5) * cfg_.voxel_size[0],
              cfg_.global_range.y1 + (2.0 * static_cast<double>(j) + 0.5) * cfg_.voxel_size[1], a.center_z};
  b.size = a.size;
  return b;
}

// ---------------------------------------------------------------------------
// Encoder

std::vector<DiffTensor> Detector::encode_voxels(std::span<const BatchItem> batch, bool training) {
  const std::size_t c0 = cfg_.point_channels;
  std::vector<double> feats;
  std::vector<std::size_t> frame_of_row;
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> voxel_begin(batch.size() + 1, 0);
  std::size_t compact = 0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const Frame& frame = *batch[n].frame;
    const VoxelGrid& grid = *batch[n].grid;
    if (grid.point_voxel.size() != frame.points.size()) throw std::invalid_argument("encode_voxels: grid not built from frame");
    bool any = false;
    for (const auto& vox : grid.voxels) {
      const auto c = grid.voxel_center(vox);
      std::vector<std::size_t> rows;
      for (std::size_t pi : vox.points) {
        const Point& p = frame.points[pi];
        rows.push_back(frame_of_row.size());
        feats.insert(feats.end(), {p.x - c[0], p.y - c[1], p.z, p.intensity});
        frame_of_row.push_back(compact);
        any = true;
      }
      groups.push_back(std::move(rows));
    }
    if (any) ++compact;
    voxel_begin[n + 1] = groups.size();
  }

  std::vector<DiffTensor> out;
  out.reserve(batch.size());
  if (frame_of_row.empty()) {
    for (std::size_t n = 0; n < batch.size(); ++n) out.push_back(DiffTensor::zeros({0, c0}));
    return out;
  }
  const std::size_t rows = frame_of_row.size();
  const DiffTensor x = DiffTensor::from({rows, 4}, std::move(feats));
  const DiffTensor h = linear(x, enc_w_, enc_b_);
  DiffTensor normed;
  if (cfg_.msbn_enabled) {
    normed = msbn_forward(h, frame_of_row, norm_, training);
  } else if (training) {
    std::vector<double> mu, var;
    normed = batch_norm(h, norm_.gamma, norm_.beta, norm_.epsilon, &mu, &var);
    for (std::size_t j = 0; j < c0; ++j) {
      norm_.running_mean[j] = (1.0 - norm_.momentum) * norm_.running_mean[j] + norm_.momentum * mu[j];
      norm_.running_var[j] = (1.0 - norm_.momentum) * norm_.running_var[j] + norm_.momentum * var[j];
    }
  } else {
    normed = batch_norm_inference(h, norm_.gamma, norm_.beta, norm_.running_mean, norm_.running_var, norm_.epsilon);
  }
  const DiffTensor pooled = group_max_pool(relu(normed), groups);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    std::vector<std::size_t> idx(voxel_begin[n + 1] - voxel_begin[n]);
    std::iota(idx.begin(), idx.end(), voxel_begin[n]);
    out.push_back(gather_rows(pooled, idx));
  }
  return out;
}

DiffTensor Detector::encode_voxels(const Frame& frame, const VoxelGrid& grid, bool training) {
  const BatchItem item{&frame, &grid, nullptr, 0};
  return encode_voxels(std::span<const BatchItem>(&item, 1), training).front();
}

DiffTensor Detector::scatter_batch(std::span<const BatchItem> batch, const std::vector<DiffTensor>& voxel_features) const {
  if (voxel_features.size() != batch.size()) throw std::invalid_argument("scatter_batch: one feature set per frame expected");
  std::vector<DiffTensor> planes;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const VoxelGrid& g = *batch[n].grid;
    if (g.dims[0] != bev_h_ || g.dims[1] != bev_w_) {
      throw ShapeError("scatter_batch: grid " + std::to_string(g.dims[0]) + "x" + std::to_string(g.dims[1]) +
                       " does not match the detector plane " + std::to_string(bev_h_) + "x" + std::to_string(bev_w_));
    }
    planes.push_back(bev_scatter(g, voxel_features[n]).values);
  }
  return stack(planes);
}

// ---------------------------------------------------------------------------
// Backbone and heads

DiffTensor Detector::backbone_forward(const DiffTensor& bev, std::span<const RangeMask> masks) const {
  if (bev.rank() != 4) throw ShapeError("backbone_forward: expected [N x C x H x W], got " + shape_str(bev.shape()));
  if (cfg_.mask_enabled && masks.size() != bev.dim(0)) {
    throw std::invalid_argument("backbone_forward: " + std::to_string(bev.dim(0)) + " frames but " +
                                std::to_string(masks.size()) + " masks");
  }
  DiffTensor x = bev;
  for (std::size_t b = 0; b < 3; ++b) {
    if (cfg_.mask_enabled) x = apply_mask_concat(x, masks);
    x = relu(conv2d(x, conv_w_[b], conv_b_[b], b == 1 ? 2 : 1, 1));
  }
  return x;
}

DenseOutput Detector::dense_head_forward(const DiffTensor& features) const {
  DenseOutput d;
  d.rows = nchw_to_rows(conv2d(features, head_w_, head_b_, 1, 0));
  d.batch = features.dim(0);
  d.height = features.dim(2);
  d.width = features.dim(3);
  return d;
}

std::vector<Proposal> nms_proposals(std::vector<Proposal> proposals, double iou_thresh, std::size_t keep) {
  std::vector<Proposal> kept;
  for (int k = 0; k < kNumClasses; ++k) {
    std::vector<Box3D> boxes;
    std::vector<double> scores;
    std::vector<std::size_t> src;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      if (proposals[i].class_id != k) continue;
      boxes.push_back(proposals[i].box);
      scores.push_back(proposals[i].score);
      src.push_back(i);
    }
    for (std::size_t i : nms_bev(boxes, scores, iou_thresh)) kept.push_back(proposals[src[i]]);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
  if (kept.size() > keep) kept.resize(keep);
  return kept;
}

std::vector<std::vector<Proposal>> Detector::propose(const DenseOutput& dense) const {
  const auto v = dense.rows.values();
  const std::size_t cells = dense.height * dense.width;
  std::vector<std::vector<Proposal>> out(dense.batch);
  for (std::size_t n = 0; n < dense.batch; ++n) {
    struct Cand {
      double score;
      std::size_t cell;
      std::size_t k;
    };
    std::vector<Cand> cands;
    cands.reserve(cells * kK);
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const double* row = &v[(n * cells + cell) * kCols];
      const double* cls = row + 7 * kK;
      const double mx = *std::max_element(cls, cls + kK);
      double z = 0;
      for (std::size_t k = 0; k < kK; ++k) z += std::exp(cls[k] - mx);
      for (std::size_t k = 0; k < kK; ++k) cands.push_back({sigmoid(row[k]) * std::exp(cls[k] - mx) / z, cell, k});
    }
    const std::size_t pre = std::min(cfg_.pre_nms_proposals, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(pre), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        return a.score != b.score ? a.score > b.score : (a.cell != b.cell ? a.cell < b.cell : a.k < b.k);
                      });
    std::vector<Proposal> props;
    for (std::size_t c = 0; c < pre; ++c) {
      const auto& cd = cands[c];
      const double* row = &v[(n * cells + cd.cell) * kCols];
      BoxDeltas d;
      std::copy(row + kK + 6 * cd.k, row + kK + 6 * cd.k + 6, d.begin());
      const int cls = static_cast<int>(cd.k);
      const Box3D box = box_decode(clamp_deltas(d), anchor(cls, cd.cell / dense.width, cd.cell % dense.width));
      props.push_back({box, cd.score, cls});
    }
    out[n] = nms_proposals(std::move(props), cfg_.nms_iou, cfg_.num_proposals);
  }
  return out;
}

DiffTensor roi_bilinear_pool(const DiffTensor& features, std::span<const Proposal> rois,
                             std::span<const std::size_t> roi_frame, const RoiPoolGeometry& geo) {
  if (features.rank() != 4) throw ShapeError("roi_bilinear_pool: expected [N x C x H x W], got " + shape_str(features.shape()));
  if (rois.size() != roi_frame.size()) throw std::invalid_argument("roi_bilinear_pool: rois/roi_frame size mismatch");
  const std::size_t nb = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  const std::size_t g = geo.grid, bins = g * g, f = c * bins, hw = h * w;
  struct Tap {
    std::size_t offset;  // into channel 0 of the frame
    double weight;
  };
  // Up to four taps per (roi, bin).
  std::vector<std::vector<Tap>> taps(rois.size() * bins);
  const double stride = static_cast<double>(geo.stride);
  for (std::size_t r = 0; r < rois.size(); ++r) {
    if (roi_frame[r] >= nb) throw std::invalid_argument("roi_bilinear_pool: roi frame out of range");
    const Box3D& b = rois[r].box;
    for (std::size_t u = 0; u < g; ++u)
      for (std::size_t vv = 0; vv < g; ++vv) {
        const double x = b.lo(0) + (static_cast<double>(u) + 0.5) / static_cast<double>(g) * b.size[0];
        const double y = b.lo(1) + (static_cast<double>(vv) + 0.5) / static_cast<double>(g) * b.size[1];
        const double fi = ((x - geo.origin_x) / geo.cell_x - 0.5) / stride;
        const double fj = ((y - geo.origin_y) / geo.cell_y - 0.5) / stride;
        const double i0 = std::floor(fi), j0 = std::floor(fj);
        const double ti = fi - i0, tj = fj - j0;
        auto& t = taps[r * bins + u * g + vv];
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            const double wt = (di ? ti : 1.0 - ti) * (dj ? tj : 1.0 - tj);
            const double ii = i0 + di, jj = j0 + dj;
            if (wt == 0.0 || ii < 0 || jj < 0 || ii >= static_cast<double>(h) || jj >= static_cast<double>(w)) continue;
            t.push_back({roi_frame[r] * c * hw + static_cast<std::size_t>(ii) * w + static_cast<std::size_t>(jj), wt});
          }
      }
  }
  const auto fv = features.values();
  std::vector<double> out(rois.size() * f, 0.0);
  for (std::size_t r = 0; r < rois.size(); ++r)
    for (std::size_t bin = 0; bin < bins; ++bin)
      for (const Tap& t : taps[r * bins + bin])
        for (std::size_t ch = 0; ch < c; ++ch) out[r * f + ch * bins + bin] += t.weight * fv[t.offset + ch * hw];
  const std::size_t nr = rois.size();
  return DiffTensor::make_result({nr, f}, std::move(out), {features},
                                 [features, taps = std::move(taps), nr, bins, c, f, hw](std::span<const double> gr) mutable {
                                   auto gf = features.grad_buffer();
                                   for (std::size_t r = 0; r < nr; ++r)
                                     for (std::size_t bin = 0; bin < bins; ++bin)
                                       for (const Tap& t : taps[r * bins + bin])
                                         for (std::size_t ch = 0; ch < c; ++ch)
                                           gf[t.offset + ch * hw] += t.weight * gr[r * f + ch * bins + bin];
                                 });
}

RoiOutput Detector::roi_head_forward(const DiffTensor& features, const std::vector<std::vector<Proposal>>& proposals) const {
  if (proposals.size() != features.dim(0)) throw std::invalid_argument("roi_head_forward: one proposal list per frame expected");
  RoiOutput o;
  for (std::size_t n = 0; n < proposals.size(); ++n)
    for (const auto& p : proposals[n]) {
      o.rois.push_back(p);
      o.roi_frame.push_back(n);
    }
  RoiPoolGeometry geo;
  geo.origin_x = cfg_.global_range.x1;
  geo.origin_y = cfg_.global_range.y1;
  geo.cell_x = cfg_.voxel_size[0];
  geo.cell_y = cfg_.voxel_size[1];
  geo.stride = 2;
  geo.grid = cfg_.roi_grid;
  o.features = roi_bilinear_pool(features, o.rois, o.roi_frame, geo);
  if (cfg_.ocrl_enabled) {
    auto r = ocrl_apply(o.features, ocrl_);
    o.enhanced = std::move(r.enhanced);
    o.residual = std::move(r.residual);
  } else {
    o.enhanced = o.features;
  }
  o.refinement = linear(relu(linear(o.enhanced, roi_w1_, roi_b1_)), roi_w2_, roi_b2_);
  return o;
}

// ---------------------------------------------------------------------------
// Targets and losses

DenseTargets Detector::assign_targets(std::span<const BatchItem> batch) const {
  const std::size_t cells = out_h_ * out_w_, rows = batch.size() * cells;
  DenseTargets t;
  t.objectness.assign(rows * kK, 0.0);
  t.objectness_weight.assign(rows * kK, 0.0);
  t.deltas.assign(rows * 6 * kK, 0.0);
  t.delta_weight.assign(rows * 6 * kK, 0.0);
  t.class_label.assign(rows, 0);
  t.class_weight.assign(rows, 0.0);

  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& boxes = batch[n].frame->boxes;
    std::vector<double> best(cells * kK, 0.0);
    std::vector<int> best_gt(cells * kK, -1);
    std::vector<int> forced(cells * kK, -1);
    for (std::size_t g = 0; g < boxes.size(); ++g) {
      const std::size_t k = static_cast<std::size_t>(boxes[g].class_id);
      double top = 0.0;
      std::size_t top_cell = 0;
      for (std::size_t cell = 0; cell < cells; ++cell) {
        const double iou = iou_bev(anchor(static_cast<int>(k), cell / out_w_, cell % out_w_), boxes[g]);
        if (iou > best[cell * kK + k]) {
          best[cell * kK + k] = iou;
          best_gt[cell * kK + k] = static_cast<int>(g);
        }
        if (iou > top) {
          top = iou;
          top_cell = cell;
        }
      }
      if (top == 0.0) {
        // No anchor overlaps: take the cell whose center is nearest.
        auto nearest = [](double c, double origin, double size, std::size_t cells_along) {
          const double idx = std::round(((c - origin) / size - 0.5) / 2.0);
          return static_cast<std::size_t>(std::clamp(idx, 0.0, static_cast<double>(cells_along - 1)));
        };
        top_cell = nearest(boxes[g].center[0], cfg_.global_range.x1, cfg_.voxel_size[0], out_h_) * out_w_ +
                   nearest(boxes[g].center[1], cfg_.global_range.y1, cfg_.voxel_size[1], out_w_);
      }
      forced[top_cell * kK + k] = static_cast<int>(g);
    }
    for (std::size_t cell = 0; cell < cells; ++cell) {
      const std::size_t row = n * cells + cell;
      for (std::size_t k = 0; k < kK; ++k) {
        const std::size_t a = cell * kK + k;
        int gt = -1;
        if (forced[a] >= 0) gt = forced[a];
        else if (best[a] > cfg_.positive_iou) gt = best_gt[a];
        const std::size_t oi = row * kK + k;
        if (gt >= 0) {
          t.objectness[oi] = 1.0;
          t.objectness_weight[oi] = 1.0;
          const auto d = box_encode(boxes[static_cast<std::size_t>(gt)], anchor(static_cast<int>(k), cell / out_w_, cell % out_w_));
          for (std::size_t q = 0; q < 6; ++q) {
            t.deltas[row * 6 * kK + 6 * k + q] = d[q];
            t.delta_weight[row * 6 * kK + 6 * k + q] = 1.0;
          }
          if (t.class_weight[row] == 0.0) {
            t.class_label[row] = static_cast<int>(k);
            t.class_weight[row] = 1.0;
          }
          ++t.num_positive;
        } else if (best[a] < cfg_.negative_iou) {
          t.objectness_weight[oi] = 1.0;
        }
      }
    }
  }
  return t;
}

LossBreakdown Detector::compute_detection_loss(const DenseOutput& dense, const RoiOutput& roi,
                                               std::span<const BatchItem> batch) const {
  if (dense.batch != batch.size()) throw std::invalid_argument("compute_detection_loss: batch size mismatch");
  const DenseTargets t = assign_targets(batch);
  const double norm = static_cast<double>(std::max<std::size_t>(1, t.num_positive));
  LossBreakdown lb;
  lb.num_positive = t.num_positive;

  const DiffTensor obj = sigmoid_bce_with_logits(slice_columns(dense.rows, 0, kK), t.objectness, t.objectness_weight, norm);
  const DiffTensor reg = smooth_l1(slice_columns(dense.rows, kK, 7 * kK), t.deltas, t.delta_weight, cfg_.smooth_l1_beta, norm);
  const DiffTensor cls =
      softmax_cross_entropy(slice_columns(dense.rows, 7 * kK, 8 * kK), t.class_label, t.class_weight, norm);
  lb.objectness = obj.item();
  lb.regression = reg.item();
  lb.classification = cls.item();
  DiffTensor det = add(add(scale(obj, cfg_.objectness_weight), scale(reg, cfg_.regression_weight)),
                       scale(cls, cfg_.class_weight));

  const std::size_t nr = roi.rois.size();
  if (nr > 0) {
    std::vector<double> quality(nr, 0.0), score_w(nr, 1.0), deltas(nr * 6, 0.0), delta_w(nr * 6, 0.0);
    std::size_t fg = 0;
    for (std::size_t r = 0; r < nr; ++r) {
      const Proposal& p = roi.rois[r];
      double best_bev = 0.0, best_3d = 0.0;
      const Box3D* match = nullptr;
      for (const Box3D& g : batch[roi.roi_frame[r]].frame->boxes) {
        if (g.class_id != p.class_id) continue;
        const double ib = iou_bev(p.box, g);
        if (ib > best_bev) {
          best_bev = ib;
          match = &g;
        }
        best_3d = std::max(best_3d, iou_3d(p.box, g));
      }
      const auto [lo, hi] = cfg_.roi_quality_iou;
      quality[r] = std::clamp((best_3d - lo) / (hi - lo), 0.0, 1.0);
      if (match != nullptr && best_bev >= cfg_.roi_foreground_iou) {
        const auto d = box_encode(*match, p.box);
        for (std::size_t q = 0; q < 6; ++q) {
          deltas[r * 6 + q] = d[q];
          delta_w[r * 6 + q] = 1.0;
        }
        ++fg;
      }
    }
    const DiffTensor rs = sigmoid_bce_with_logits(slice_columns(roi.refinement, 6, 7), quality, score_w, static_cast<double>(nr));
    const DiffTensor rr = smooth_l1(slice_columns(roi.refinement, 0, 6), deltas, delta_w, cfg_.smooth_l1_beta,
                                    static_cast<double>(std::max<std::size_t>(1, fg)));
    lb.roi_score = rs.item();
    lb.roi_regression = rr.item();
    det = add(det, scale(add(rs, rr), cfg_.roi_weight));
  }
  lb.l_det = det.item();
  lb.total = det;

  if (cfg_.ocrl_enabled && nr > 0) {
    std::vector<int> labels(nr);
    for (std::size_t r = 0; r < nr; ++r) labels[r] = batch[roi.roi_frame[r]].dataset_label;
    const DiffTensor dis = ocrl_discrimination_loss(roi.residual, labels, ocrl_);
    lb.l_dis = dis.item();
    lb.total = add(det, scale(dis, cfg_.dis_loss_weight));
  }
  return lb;
}

LossBreakdown Detector::training_loss(std::span<const BatchItem> batch,
                                      const std::vector<std::vector<Proposal>>* fixed_proposals,
                                      std::vector<std::vector<Proposal>>* used_proposals) {
  const auto vf = encode_voxels(batch, true);
  const DiffTensor bev = scatter_batch(batch, vf);
  std::vector<RangeMask> masks;
  if (cfg_.mask_enabled) {
    for (const auto& item : batch) {
      if (item.mask == nullptr) throw std::invalid_argument("training_loss: mask prompt enabled but a frame has no mask");
      masks.push_back(*item.mask);
    }
  }
  const DiffTensor feat = backbone_forward(bev, masks);
  const DenseOutput dense = dense_head_forward(feat);
  std::vector<std::vector<Proposal>> props = fixed_proposals ? *fixed_proposals : propose(dense);
  const RoiOutput roi = roi_head_forward(feat, props);
  if (used_proposals) *used_proposals = std::move(props);
  return compute_detection_loss(dense, roi, batch);
}

// ---------------------------------------------------------------------------
// Inference

DetectionResult Detector::predict(const Frame& frame, const DatasetSpec& prompt_spec) {
  return predict(frame, mask_for(prompt_spec));
}

DetectionResult Detector::predict(const Frame& frame, const RangeMask& prompt_mask) {
  DetectionResult res;
  res.dataset_id = frame.dataset_id;
  const VoxelGrid grid = voxelize(frame);
  if (grid.voxels.empty()) return res;  // nothing observed

  const BatchItem item{&frame, &grid, &prompt_mask, 0};
  const std::span<const BatchItem> batch(&item, 1);
  const auto vf = encode_voxels(batch, false);
  const DiffTensor bev = scatter_batch(batch, vf);
  const DiffTensor feat = backbone_forward(bev, std::span<const RangeMask>(&prompt_mask, cfg_.mask_enabled ? 1 : 0));
  const DenseOutput dense = dense_head_forward(feat);
  const RoiOutput roi = roi_head_forward(feat, propose(dense));

  const auto rv = roi.refinement.values();
  std::vector<Proposal> dets;
  for (std::size_t r = 0; r < roi.rois.size(); ++r) {
    BoxDeltas d;
    std::copy(rv.begin() + static_cast<std::ptrdiff_t>(r * 7), rv.begin() + static_cast<std::ptrdiff_t>(r * 7 + 6), d.begin());
    // Geometric mean of dense and RoI confidence; the RoI score alone ranks worse.
    const double score = std::sqrt(roi.rois[r].score * sigmoid(rv[r * 7 + 6]));
    if (!(score >= cfg_.score_threshold)) continue;
    Box3D box = box_decode(clamp_deltas(d), roi.rois[r].box);
    box.class_id = roi.rois[r].class_id;
    if (!cfg_.global_range.contains(box.center[0], box.center[1], box.center[2])) continue;
    dets.push_back({box, score, box.class_id});
  }
  for (const auto& p : nms_proposals(std::move(dets), cfg_.nms_iou, std::numeric_limits<std::size_t>::max())) {
    res.boxes.push_back(p.box);
    res.scores.push_back(p.score);
    res.class_ids.push_back(p.class_id);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Persistence

std::vector<std::pair<std::string, std::vector<double>>> Detector::buffers() const {
  return {{"encoder.norm.running_mean", norm_.running_mean}, {"encoder.norm.running_var", norm_.running_var}};
}

void Detector::load_buffers(const std::vector<std::pair<std::string, std::vector<double>>>& buffers) {
  for (const auto& [name, v] : buffers) {
    std::vector<double>* dst = nullptr;
    if (name == "encoder.norm.running_mean") dst = &norm_.running_mean;
    else if (name == "encoder.norm.running_var") dst = &norm_.running_var;
    else throw std::invalid_argument("unknown buffer in checkpoint: " + name);
    if (v.size() != dst->size()) throw ShapeError("buffer " + name + " has the wrong size");
    *dst = v;
  }
}

void Detector::save(const std::filesystem::path& path) const { save_checkpoint(params_, path, buffers()); }

void Detector::load(const std::filesystem::path& path) { load_buffers(load_checkpoint(params_, path)); }

// ---------------------------------------------------------------------------
// Training

namespace {

double global_grad_norm(ParameterStore& params) {
  double s = 0.0;
  for (auto& [name, p] : params.entries())
    if (p.has_grad())
      for (double g : p.grad_buffer()) s += g * g;
  return std::sqrt(s);
}

}  // namespace

TrainResult train(Detector& det, std::span<const DatasetFrames> datasets, std::size_t max_steps,
                  const std::function<void(const TrainLogRow&)>& on_step) {
  if (datasets.empty()) throw std::invalid_argument("train: at least one dataset is required");
  const DetectorConfig& cfg = det.config();
  const std::size_t nd = datasets.size();

  struct Prepared {
    std::vector<VoxelGrid> grids;
    RangeMask mask;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    Rng rng;
  };
  std::vector<Prepared> prep(nd);
  std::size_t total_frames = 0;
  for (std::size_t d = 0; d < nd; ++d) {
    if (datasets[d].frames.empty()) throw std::invalid_argument("train: dataset " + datasets[d].spec.name + " has no frames");
    auto& p = prep[d];
    for (const auto& f : datasets[d].frames) p.grids.push_back(det.voxelize(f));
    p.mask = det.mask_for(datasets[d].spec);
    p.order.resize(datasets[d].frames.size());
    std::iota(p.order.begin(), p.order.end(), std::size_t{0});
    p.rng.seed(mix_seed(cfg.seed, 0x7a11 + d));
    std::shuffle(p.order.begin(), p.order.end(), p.rng);
    total_frames += datasets[d].frames.size();
  }
  const std::size_t steps_per_epoch = (total_frames + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total_steps = steps_per_epoch * cfg.epochs;
  if (max_steps > 0) total_steps = std::min(total_steps, max_steps);

  AdamConfig adam;
  adam.weight_decay = cfg.weight_decay;
  OptimizerState opt = make_optimizer_state(det.params(), cfg.learning_rate, adam);

  TrainResult result;
  std::vector<BatchItem> batch(cfg.batch_size);
  for (std::size_t s = 0; s < total_steps; ++s) {
    TrainLogRow row;
    row.step = static_cast<std::int64_t>(s);
    row.epoch = s / steps_per_epoch;
    for (std::size_t j = 0; j < cfg.batch_size; ++j) {
      const std::size_t d = (s * cfg.batch_size + j) % nd;
      auto& p = prep[d];
      if (p.cursor == p.order.size()) {
        std::shuffle(p.order.begin(), p.order.end(), p.rng);
        p.cursor = 0;
      }
      const std::size_t fi = p.order[p.cursor++];
      batch[j] = {&datasets[d].frames[fi], &p.grids[fi], &p.mask, static_cast<int>(d)};
      row.dataset_ids.push_back(datasets[d].spec.id);
    }
    row.lr = onecycle_lr(static_cast<std::int64_t>(s), static_cast<std::int64_t>(total_steps), cfg.learning_rate);

    det.params().zero_grad();
    const LossBreakdown loss = det.training_loss(batch);
    const double total = loss.total.item();
    if (!std::isfinite(total)) {
      throw TrainingDiverged(row.step, "training diverged at step " + std::to_string(s) + ": non-finite loss");
    }
    backward(loss.total);
    if (cfg.grad_clip_norm > 0) {
      const double gn = global_grad_norm(det.params());
      if (!std::isfinite(gn)) throw TrainingDiverged(row.step, "training diverged at step " + std::to_string(s) + ": non-finite gradient");
      if (gn > cfg.grad_clip_norm) {
        const double f = cfg.grad_clip_norm / gn;
        for (auto& [name, p] : det.params().entries())
          if (p.has_grad())
            for (double& g : p.grad_buffer()) g *= f;
      }
    }
    adam_step(det.params(), opt, row.lr);

    row.l_det = loss.l_det;
    row.l_dis = loss.l_dis;
    row.total = total;
    if (on_step) on_step(row);
    result.log.push_back(std::move(row));
  }
  result.steps = total_steps;
  return result;
}

std::string train_log_csv(const TrainResult& result) {
  std::ostringstream os;
  os << "step,lr,L_det,L_dis,total,epoch,dataset_ids\n";
  char buf[256];
  for (const auto& r : result.log) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%zu,", static_cast<long long>(r.step), r.lr, r.l_det,
                  r.l_dis, r.total, r.epoch);
    os << buf;
    for (std::size_t i = 0; i < r.dataset_ids.size(); ++i) os << (i ? ";" : "") << r.dataset_ids[i];
    os << '\n';
  }
  return os.str();
}

}  // namespace promptdet
