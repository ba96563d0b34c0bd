#include "promptdet/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace promptdet {

MatchResult match_predictions(const DetectionResult& preds, std::span<const Box3D> gts, const IouFn& iou, double thresh) {
  if (preds.boxes.size() != preds.scores.size() || preds.boxes.size() != preds.class_ids.size()) {
    throw std::invalid_argument("match_predictions: boxes, scores and class ids differ in length");
  }
  MatchResult m;
  m.tp.assign(preds.boxes.size(), false);
  std::vector<bool> used(gts.size(), false);
  for (std::size_t p = 0; p < preds.boxes.size(); ++p) {
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].class_id != preds.class_ids[p]) continue;
      const double v = iou(preds.boxes[p], gts[g]);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best >= thresh) {
      m.tp[p] = true;
      used[best_g] = true;
      m.pairs.emplace_back(p, best_g);
    }
  }
  return m;
}

std::optional<double> average_precision_40(std::span<const bool> tp_flags, std::size_t num_gt) {
  if (num_gt == 0) return std::nullopt;
  // best[r] = max precision among cut-offs reaching recall r/40.
  std::array<double, 41> best{};
  std::size_t tp = 0;
  for (std::size_t i = 0; i < tp_flags.size(); ++i) {
    if (tp_flags[i]) ++tp;
    const double precision = static_cast<double>(tp) / static_cast<double>(i + 1);
    // recall >= r/40  <=>  40 tp >= r num_gt
    const std::size_t reached = std::min<std::size_t>(40, (40 * tp) / num_gt);
    for (std::size_t r = 1; r <= reached; ++r) best[r] = std::max(best[r], precision);
  }
  double sum = 0.0;
  for (std::size_t r = 1; r <= 40; ++r) sum += best[r];
  return sum / 40.0;
}

double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("wasserstein1: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  // Walk the merged quantile breakpoints i/na and j/nb.
  std::size_t i = 0, j = 0;
  double u = 0.0, total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next_a = static_cast<double>(i + 1) / na, next_b = static_cast<double>(j + 1) / nb;
    const double next = std::min(next_a, next_b);
    total += (next - u) * std::abs(a[i] - b[j]);
    u = next;
    // Exact comparison on the integer cross products avoids rounding drift.
    const std::size_t lhs = (i + 1) * b.size(), rhs = (j + 1) * a.size();
    if (lhs <= rhs) ++i;
    if (rhs <= lhs) ++j;
  }
  return total;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

}  // namespace

SizeStats size_distribution_stats(std::span<const Box3D> preds, std::span<const Box3D> gts, int class_id) {
  SizeStats s;
  s.class_id = class_id;
  std::array<std::vector<double>, 3> p, g;
  for (const auto& b : preds)
    if (b.class_id == class_id)
      for (int a = 0; a < 3; ++a) p[a].push_back(b.size[a]);
  for (const auto& b : gts)
    if (b.class_id == class_id)
      for (int a = 0; a < 3; ++a) g[a].push_back(b.size[a]);
  s.num_pred = p[0].size();
  s.num_gt = g[0].size();
  s.degenerate = s.num_pred < 2 || s.num_gt < 2;
  for (int a = 0; a < 3; ++a) {
    auto& d = s.dims[a];
    std::tie(d.pred_mean, d.pred_std) = mean_std(p[a]);
    std::tie(d.gt_mean, d.gt_std) = mean_std(g[a]);
    if (!s.degenerate) d.w1 = wasserstein1(p[a], g[a]);
  }
  return s;
}

DatasetMetrics evaluate(std::span<const DetectionResult> preds, std::span<const std::vector<Box3D>> gts, int dataset_id,
                        const std::string& name, const EvalOptions& options) {
  if (preds.size() != gts.size()) throw std::invalid_argument("evaluate: predictions and GT differ in frame count");
  if (preds.empty()) throw std::invalid_argument("evaluate: empty split");
  DatasetMetrics dm;
  dm.dataset_id = dataset_id;
  dm.name = name;
  dm.num_frames = preds.size();

  const IouFn bev = [](const Box3D& a, const Box3D& b) { return iou_bev(a, b); };
  const IouFn full = [](const Box3D& a, const Box3D& b) { return iou_3d(a, b); };

  std::vector<Box3D> all_gt, sized_preds;
  for (const auto& g : gts) all_gt.insert(all_gt.end(), g.begin(), g.end());
  for (const auto& p : preds)
    for (std::size_t i = 0; i < p.boxes.size(); ++i)
      if (p.scores[i] >= options.size_score_threshold) sized_preds.push_back(p.boxes[i]);

  double sum3d = 0, sumbev = 0;
  std::size_t present = 0;
  for (int k = 0; k < kNumClasses; ++k) {
    ClassMetrics cm;
    cm.class_id = k;
    cm.iou_threshold = options.thresholds.per_class[static_cast<std::size_t>(k)];
    // (score, tp) per prediction of class k across the split, for each IoU kind.
    std::vector<std::pair<double, bool>> scored_bev, scored_3d;
    for (std::size_t f = 0; f < preds.size(); ++f) {
      DetectionResult only;
      for (std::size_t i = 0; i < preds[f].boxes.size(); ++i) {
        if (preds[f].class_ids[i] != k) continue;
        only.boxes.push_back(preds[f].boxes[i]);
        only.scores.push_back(preds[f].scores[i]);
        only.class_ids.push_back(k);
      }
      // Stable descending order inside the frame.
      std::vector<std::size_t> order(only.boxes.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return only.scores[a] > only.scores[b]; });
      DetectionResult sorted;
      for (std::size_t i : order) {
        sorted.boxes.push_back(only.boxes[i]);
        sorted.scores.push_back(only.scores[i]);
        sorted.class_ids.push_back(k);
      }
      const auto mb = match_predictions(sorted, gts[f], bev, cm.iou_threshold);
      const auto m3 = match_predictions(sorted, gts[f], full, cm.iou_threshold);
      for (std::size_t i = 0; i < sorted.boxes.size(); ++i) {
        scored_bev.emplace_back(sorted.scores[i], mb.tp[i]);
        scored_3d.emplace_back(sorted.scores[i], m3.tp[i]);
      }
      for (const auto& g : gts[f])
        if (g.class_id == k) ++cm.num_gt;
    }
    cm.num_pred = scored_bev.size();
    // Order depends only on (score, flag): equal scores list FPs first, so
    // the result does not depend on frame order.
    auto ap = [&](std::vector<std::pair<double, bool>> v) {
      std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : (!a.second && b.second);
      });
      auto flags = std::make_unique<bool[]>(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) flags[i] = v[i].second;
      return average_precision_40(std::span<const bool>(flags.get(), v.size()), cm.num_gt);
    };
    cm.ap_bev = ap(scored_bev);
    cm.ap_3d = ap(scored_3d);
    if (cm.ap_3d) {
      sum3d += *cm.ap_3d;
      sumbev += *cm.ap_bev;
      ++present;
    }
    dm.classes.push_back(cm);
    dm.sizes.push_back(size_distribution_stats(sized_preds, all_gt, k));
  }
  if (present > 0) {
    dm.map_3d = sum3d / static_cast<double>(present);
    dm.map_bev = sumbev / static_cast<double>(present);
  }
  return dm;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

const char* kDimNames[3] = {"length", "width", "height"};

}  // namespace

nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json ds = nlohmann::json::array();
  for (const auto& d : report.datasets) {
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : d.classes) {
      classes.push_back({{"class", class_name(c.class_id)},
                         {"iou_threshold", c.iou_threshold},
                         {"num_gt", c.num_gt},
                         {"num_pred", c.num_pred},
                         {"ap_bev", opt(c.ap_bev)},
                         {"ap_3d", opt(c.ap_3d)}});
    }
    nlohmann::json sizes = nlohmann::json::array();
    for (const auto& s : d.sizes) {
      nlohmann::json dims = nlohmann::json::object();
      for (int a = 0; a < 3; ++a) {
        const auto& x = s.dims[a];
        dims[kDimNames[a]] = {{"pred_mean", x.pred_mean}, {"pred_std", x.pred_std}, {"gt_mean", x.gt_mean},
                              {"gt_std", x.gt_std}, {"w1", opt(x.w1)}};
      }
      sizes.push_back({{"class", class_name(s.class_id)},
                       {"num_pred", s.num_pred},
                       {"num_gt", s.num_gt},
                       {"degenerate", s.degenerate},
                       {"dims", dims}});
    }
    ds.push_back({{"dataset_id", d.dataset_id},
                  {"name", d.name},
                  {"num_frames", d.num_frames},
                  {"map_3d", opt(d.map_3d)},
                  {"map_bev", opt(d.map_bev)},
                  {"classes", classes},
                  {"sizes", sizes}});
  }
  return {{"schema_version", 1}, {"config_fingerprint", report.config_fingerprint}, {"datasets", ds}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != 1) throw std::invalid_argument("report: unsupported schema_version");
  EvalReport r;
  r.config_fingerprint = j.value("config_fingerprint", "");
  for (const auto& d : j.at("datasets")) {
    DatasetMetrics dm;
    dm.dataset_id = d.at("dataset_id").get<int>();
    dm.name = d.at("name").get<std::string>();
    dm.num_frames = d.value("num_frames", std::size_t{0});
    dm.map_3d = opt_from(d.at("map_3d"));
    dm.map_bev = opt_from(d.at("map_bev"));
    for (const auto& c : d.at("classes")) {
      ClassMetrics cm;
      cm.class_id = class_from_name(c.at("class").get<std::string>());
      cm.iou_threshold = c.at("iou_threshold").get<double>();
      cm.num_gt = c.at("num_gt").get<std::size_t>();
      cm.num_pred = c.at("num_pred").get<std::size_t>();
      cm.ap_bev = opt_from(c.at("ap_bev"));
      cm.ap_3d = opt_from(c.at("ap_3d"));
      dm.classes.push_back(cm);
    }
    if (d.contains("sizes")) {
      for (const auto& s : d.at("sizes")) {
        SizeStats st;
        st.class_id = class_from_name(s.at("class").get<std::string>());
        st.num_pred = s.at("num_pred").get<std::size_t>();
        st.num_gt = s.at("num_gt").get<std::size_t>();
        st.degenerate = s.at("degenerate").get<bool>();
        for (int a = 0; a < 3; ++a) {
          const auto& x = s.at("dims").at(kDimNames[a]);
          st.dims[a] = {x.at("pred_mean").get<double>(), x.at("pred_std").get<double>(), x.at("gt_mean").get<double>(),
                        x.at("gt_std").get<double>(), opt_from(x.at("w1"))};
        }
        dm.sizes.push_back(st);
      }
    }
    r.datasets.push_back(std::move(dm));
  }
  return r;
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "dataset,class,metric,value\n";
  char buf[64];
  auto row = [&](const std::string& ds, const std::string& cls, const std::string& metric, const std::optional<double>& v) {
    os << ds << ',' << cls << ',' << metric << ',';
    if (v) {
      std::snprintf(buf, sizeof buf, "%.10f", *v);
      os << buf;
    } else {
      os << "NA";
    }
    os << '\n';
  };
  for (const auto& d : report.datasets) {
    for (const auto& c : d.classes) {
      row(d.name, class_name(c.class_id), "AP_BEV", c.ap_bev);
      row(d.name, class_name(c.class_id), "AP_3D", c.ap_3d);
    }
    for (const auto& s : d.sizes)
      for (int a = 0; a < 3; ++a) row(d.name, class_name(s.class_id), std::string("W1_") + kDimNames[a], s.dims[a].w1);
    row(d.name, "all", "mAP_3D", d.map_3d);
    row(d.name, "all", "mAP_BEV", d.map_bev);
  }
  return os.str();
}

}  // namespace promptdet
