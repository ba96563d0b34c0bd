#include "promptdet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "promptdet/rng.hpp"

namespace promptdet {

using nlohmann::json;

namespace {

const std::array<std::string, kNumClasses> kClassNames{"car", "pedestrian", "cyclist"};

// Boxes keep this clearance from the range faces so that surface points stay
// inside the half-open range.
constexpr double kRangeMargin = 0.05;

}  // namespace

const std::string& class_name(int class_id) {
  if (class_id < 0 || class_id >= kNumClasses) throw std::out_of_range("unknown class id " + std::to_string(class_id));
  return kClassNames[static_cast<std::size_t>(class_id)];
}

int class_from_name(const std::string& name) {
  for (int c = 0; c < kNumClasses; ++c) {
    if (kClassNames[static_cast<std::size_t>(c)] == name) return c;
  }
  throw std::invalid_argument("unknown class '" + name + "'");
}

bool Box3D::contains(double x, double y, double z, double slack) const {
  const std::array<double, 3> p{x, y, z};
  for (int a = 0; a < 3; ++a) {
    if (p[a] < lo(a) - slack || p[a] > hi(a) + slack) return false;
  }
  return true;
}

void DatasetSpec::validate() const {
  const std::string who = "dataset spec '" + name + "': ";
  if (!point_range.valid()) throw SpecError(who + "point range must satisfy x1<x2, y1<y2, z1<z2");
  if (points_per_object < 8) throw SpecError(who + "points_per_object must be at least 8");
  if (background_density < 0) throw SpecError(who + "background_density must be non-negative");
  if (objects_per_frame[0] < 0 || objects_per_frame[0] > objects_per_frame[1]) {
    throw SpecError(who + "objects_per_frame must be 0 <= min <= max");
  }
  if (objects_per_frame[1] > 0 && class_stats.empty()) throw SpecError(who + "objects requested but no class stats");
  for (const auto& [cls, st] : class_stats) {
    class_name(cls);
    for (int a = 0; a < 3; ++a) {
      if (!(st.mean[a] > 0)) throw SpecError(who + "mean sizes must be positive for " + class_name(cls));
      if (st.stddev[a] < 0) throw SpecError(who + "std values must be non-negative for " + class_name(cls));
    }
    if (!(st.frequency > 0)) throw SpecError(who + "class frequency must be positive for " + class_name(cls));
  }
  for (const auto& iv : {background_intensity, object_intensity}) {
    if (iv[0] < 0 || iv[1] > 1 || iv[0] > iv[1]) throw SpecError(who + "intensity intervals must lie in [0, 1]");
  }
}

std::vector<DatasetSpec> preset_specs() {
  DatasetSpec k;
  k.id = 0;
  k.name = "K-like";
  k.point_range = {0.0, -40.0, -2.0, 70.4, 40.0, 4.0};
  k.points_per_object = 48;
  k.background_density = 0.12;
  k.objects_per_frame = {4, 10};
  k.ground_z = -1.6;
  k.background_intensity = {0.0, 0.4};
  k.object_intensity = {0.2, 0.6};
  k.class_stats = {{kCar, {{3.9, 1.6, 1.56}, {0.2, 0.1, 0.1}, 3.0}},
                   {kPedestrian, {{0.8, 0.6, 1.73}, {0.1, 0.08, 0.1}, 1.0}},
                   {kCyclist, {{1.76, 0.6, 1.73}, {0.15, 0.08, 0.1}, 1.0}}};

  DatasetSpec w;
  w.id = 1;
  w.name = "W-like";
  w.point_range = {-75.2, -75.2, -2.0, 75.2, 75.2, 4.0};
  w.points_per_object = 48;
  w.background_density = 0.05;
  w.objects_per_frame = {6, 14};
  w.ground_z = -1.6;
  w.background_intensity = {0.4, 0.8};
  w.object_intensity = {0.6, 1.0};
  w.class_stats = {{kCar, {{4.8, 2.1, 1.8}, {0.3, 0.15, 0.15}, 3.0}},
                   {kPedestrian, {{0.9, 0.85, 1.7}, {0.1, 0.08, 0.1}, 1.0}},
                   {kCyclist, {{1.8, 0.85, 1.75}, {0.15, 0.08, 0.1}, 1.0}}};

  DatasetSpec n;
  n.id = 2;
  n.name = "N-like";
  n.point_range = {-51.2, -51.2, -2.0, 51.2, 51.2, 4.0};
  n.points_per_object = 20;
  n.background_density = 0.03;
  n.objects_per_frame = {4, 10};
  n.ground_z = -1.6;
  n.background_intensity = {0.2, 0.6};
  n.object_intensity = {0.4, 0.8};
  n.class_stats = {{kCar, {{4.6, 1.95, 1.73}, {0.3, 0.12, 0.12}, 3.0}},
                   {kPedestrian, {{0.73, 0.67, 1.77}, {0.1, 0.08, 0.1}, 1.0}},
                   {kCyclist, {{1.7, 0.6, 1.28}, {0.15, 0.08, 0.1}, 1.0}}};
  return {k, w, n};
}

const DatasetSpec& preset_spec(const std::string& name) {
  static const std::vector<DatasetSpec> presets = preset_specs();
  for (const auto& s : presets) {
    if (s.name == name) return s;
  }
  throw std::invalid_argument("unknown dataset preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Generation

namespace {

double sample_size(Rng& rng, double mean, double sd) {
  if (sd == 0.0) return mean;
  std::normal_distribution<double> nd(0.0, 1.0);
  const double z = std::clamp(nd(rng), -3.0, 3.0);
  return std::max(0.1 * mean, mean + sd * z);
}

bool bev_overlaps(const Box3D& a, const Box3D& b, double gap) {
  for (int ax = 0; ax < 2; ++ax) {
    if (a.hi(ax) + gap <= b.lo(ax) || b.hi(ax) + gap <= a.lo(ax)) return false;
  }
  return true;
}

// Samples a point on the faces of `box` that face the sensor at the origin
// (the near x face, the near y face, and the top).
Point sample_visible_surface(Rng& rng, const Box3D& box, const std::array<double, 2>& intensity) {
  struct Face {
    int axis;
    double coord;
    double area;
  };
  std::vector<Face> faces;
  const auto& s = box.size;
  if (box.lo(0) > 0) faces.push_back({0, box.lo(0), s[1] * s[2]});
  if (box.hi(0) < 0) faces.push_back({0, box.hi(0), s[1] * s[2]});
  if (box.lo(1) > 0) faces.push_back({1, box.lo(1), s[0] * s[2]});
  if (box.hi(1) < 0) faces.push_back({1, box.hi(1), s[0] * s[2]});
  faces.push_back({2, box.hi(2), s[0] * s[1]});

  double total = 0;
  for (const auto& f : faces) total += f.area;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double pick = u01(rng) * total;
  const Face* face = &faces.back();
  for (const auto& f : faces) {
    if (pick < f.area) {
      face = &f;
      break;
    }
    pick -= f.area;
  }
  std::array<double, 3> p{};
  for (int a = 0; a < 3; ++a) {
    p[a] = a == face->axis ? face->coord : box.lo(a) + u01(rng) * box.size[a];
  }
  std::uniform_real_distribution<double> ui(intensity[0], intensity[1]);
  return {p[0], p[1], p[2], ui(rng)};
}

}  // namespace

Frame generate_frame(const DatasetSpec& spec, std::uint64_t rng_seed) {
  spec.validate();
  const PointRange& r = spec.point_range;
  for (const auto& [cls, st] : spec.class_stats) {
    for (int a = 0; a < 3; ++a) {
      const double extent = a == 0 ? r.x2 - r.x1 : a == 1 ? r.y2 - r.y1 : r.z2 - r.z1;
      if (st.mean[a] + 3.0 * st.stddev[a] + 2 * kRangeMargin > extent) {
        throw SpecError("dataset spec '" + spec.name + "': range cannot fit a mean+3 sigma " + class_name(cls));
      }
    }
  }

  Rng rng(mix_seed(static_cast<std::uint64_t>(spec.id), rng_seed));
  Frame frame;
  frame.dataset_id = spec.id;

  std::vector<int> classes;
  std::vector<double> weights;
  for (const auto& [cls, st] : spec.class_stats) {
    classes.push_back(cls);
    weights.push_back(st.frequency);
  }
  std::uniform_int_distribution<int> count_dist(spec.objects_per_frame[0], spec.objects_per_frame[1]);
  const int n_objects = count_dist(rng);
  for (int o = 0; o < n_objects; ++o) {
    std::discrete_distribution<std::size_t> cls_dist(weights.begin(), weights.end());
    const int cls = classes[cls_dist(rng)];
    const ClassStats& st = spec.class_stats.at(cls);
    Box3D box;
    box.class_id = cls;
    for (int a = 0; a < 3; ++a) box.size[a] = sample_size(rng, st.mean[a], st.stddev[a]);
    box.center[2] = std::clamp(spec.ground_z + 0.5 * box.size[2], r.z1 + 0.5 * box.size[2] + kRangeMargin,
                               r.z2 - 0.5 * box.size[2] - kRangeMargin);
    bool placed = false;
    for (int attempt = 0; attempt < 30 && !placed; ++attempt) {
      std::uniform_real_distribution<double> ux(r.x1 + 0.5 * box.size[0] + kRangeMargin,
                                                r.x2 - 0.5 * box.size[0] - kRangeMargin);
      std::uniform_real_distribution<double> uy(r.y1 + 0.5 * box.size[1] + kRangeMargin,
                                                r.y2 - 0.5 * box.size[1] - kRangeMargin);
      box.center[0] = ux(rng);
      box.center[1] = uy(rng);
      placed = std::none_of(frame.boxes.begin(), frame.boxes.end(),
                            [&](const Box3D& b) { return bev_overlaps(b, box, 0.5); });
    }
    if (!placed) continue;
    frame.boxes.push_back(box);
  }

  std::poisson_distribution<int> pts_dist(spec.points_per_object);
  for (std::size_t b = 0; b < frame.boxes.size(); ++b) {
    const int n = std::max(8, pts_dist(rng));
    for (int i = 0; i < n; ++i) {
      frame.points.push_back(sample_visible_surface(rng, frame.boxes[b], spec.object_intensity));
      frame.point_object.push_back(static_cast<int>(b));
    }
  }

  const double area = (r.x2 - r.x1) * (r.y2 - r.y1);
  const int n_bg = spec.background_density > 0
                       ? std::poisson_distribution<int>(spec.background_density * area)(rng)
                       : 0;
  std::uniform_real_distribution<double> bx(r.x1, r.x2), by(r.y1, r.y2), bz(r.z1, r.z2);
  std::uniform_real_distribution<double> bi(spec.background_intensity[0], spec.background_intensity[1]);
  for (int i = 0; i < n_bg; ++i) {
    Point p{bx(rng), by(rng), bz(rng), 0.0};
    p.intensity = bi(rng);
    frame.points.push_back(p);
    frame.point_object.push_back(-1);
  }

  // Interleave object and background points so per-voxel point caps do not
  // depend on generation order.
  std::vector<std::size_t> perm(frame.points.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i - 1], perm[pick(rng)]);
  }
  Frame shuffled;
  shuffled.dataset_id = frame.dataset_id;
  shuffled.boxes = std::move(frame.boxes);
  shuffled.points.reserve(perm.size());
  shuffled.point_object.reserve(perm.size());
  for (std::size_t i : perm) {
    shuffled.points.push_back(frame.points[i]);
    shuffled.point_object.push_back(frame.point_object[i]);
  }
  return shuffled;
}

std::vector<Frame> generate_frames(const DatasetSpec& spec, std::uint64_t seed, std::size_t count) {
  std::vector<Frame> frames;
  frames.reserve(count);
  for (std::size_t i = 0; i < count; ++i) frames.push_back(generate_frame(spec, mix_seed(seed, i)));
  return frames;
}

Frame align_point_range(const Frame& frame, const PointRange& global_range) {
  Frame out;
  out.dataset_id = frame.dataset_id;
  const bool owners = frame.point_object.size() == frame.points.size();
  std::vector<int> remap(frame.boxes.size(), -1);
  for (std::size_t b = 0; b < frame.boxes.size(); ++b) {
    const auto& c = frame.boxes[b].center;
    if (global_range.contains(c[0], c[1], c[2])) {
      remap[b] = static_cast<int>(out.boxes.size());
      out.boxes.push_back(frame.boxes[b]);
    }
  }
  for (std::size_t i = 0; i < frame.points.size(); ++i) {
    const Point& p = frame.points[i];
    if (!global_range.contains(p.x, p.y, p.z)) continue;
    out.points.push_back(p);
    if (owners) {
      const int o = frame.point_object[i];
      out.point_object.push_back(o < 0 ? -1 : remap[static_cast<std::size_t>(o)]);
    }
  }
  return out;
}

Frame apply_statistical_normalization(const Frame& frame, const DatasetSpec& source, const DatasetSpec& target) {
  std::vector<std::array<double, 3>> factors;
  for (const Box3D& b : frame.boxes) {
    const auto s = source.class_stats.find(b.class_id);
    const auto t = target.class_stats.find(b.class_id);
    if (s == source.class_stats.end()) {
      throw SpecError("statistical normalization: source '" + source.name + "' has no stats for class " +
                      class_name(b.class_id));
    }
    if (t == target.class_stats.end()) {
      throw SpecError("statistical normalization: target '" + target.name + "' has no stats for class " +
                      class_name(b.class_id));
    }
    factors.push_back({t->second.mean[0] / s->second.mean[0], t->second.mean[1] / s->second.mean[1],
                       t->second.mean[2] / s->second.mean[2]});
  }
  Frame out = frame;
  for (std::size_t i = 0; i < out.points.size(); ++i) {
    Point& p = out.points[i];
    for (std::size_t b = 0; b < frame.boxes.size(); ++b) {
      const Box3D& box = frame.boxes[b];
      if (!box.contains(p.x, p.y, p.z, 0.0)) continue;
      p.x = box.center[0] + (p.x - box.center[0]) * factors[b][0];
      p.y = box.center[1] + (p.y - box.center[1]) * factors[b][1];
      p.z = box.center[2] + (p.z - box.center[2]) * factors[b][2];
      break;
    }
  }
  for (std::size_t b = 0; b < out.boxes.size(); ++b) {
    for (int a = 0; a < 3; ++a) out.boxes[b].size[a] *= factors[b][a];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

json frame_to_json(const Frame& frame) {
  json pts = json::array();
  for (const Point& p : frame.points) pts.push_back({p.x, p.y, p.z, p.intensity});
  json boxes = json::array();
  for (const Box3D& b : frame.boxes) {
    boxes.push_back({{"c", {b.center[0], b.center[1], b.center[2]}},
                     {"s", {b.size[0], b.size[1], b.size[2]}},
                     {"cls", b.class_id}});
  }
  return {{"dataset_id", frame.dataset_id}, {"points", std::move(pts)}, {"boxes", std::move(boxes)}};
}

Frame frame_from_json(const json& j) {
  Frame f;
  f.dataset_id = j.at("dataset_id").get<int>();
  for (const auto& p : j.at("points")) {
    if (p.size() != 4) throw std::invalid_argument("frame json: point must have 4 values");
    f.points.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>(), p[3].get<double>()});
  }
  for (const auto& b : j.at("boxes")) {
    Box3D box;
    for (int a = 0; a < 3; ++a) {
      box.center[a] = b.at("c").at(a).get<double>();
      box.size[a] = b.at("s").at(a).get<double>();
    }
    box.class_id = b.at("cls").get<int>();
    f.boxes.push_back(box);
  }
  return f;
}

void write_frames_jsonl(std::ostream& os, const std::vector<Frame>& frames) {
  for (const Frame& f : frames) os << frame_to_json(f).dump() << '\n';
}

std::vector<Frame> read_frames_jsonl(std::istream& is) {
  std::vector<Frame> frames;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    frames.push_back(frame_from_json(json::parse(line)));
  }
  return frames;
}

json spec_to_json(const DatasetSpec& s) {
  json stats = json::object();
  for (const auto& [cls, st] : s.class_stats) {
    stats[class_name(cls)] = {{"mean", st.mean}, {"std", st.stddev}, {"frequency", st.frequency}};
  }
  const auto& r = s.point_range;
  return {{"id", s.id},
          {"name", s.name},
          {"point_range", {r.x1, r.y1, r.z1, r.x2, r.y2, r.z2}},
          {"points_per_object", s.points_per_object},
          {"background_density", s.background_density},
          {"objects_per_frame", s.objects_per_frame},
          {"ground_z", s.ground_z},
          {"background_intensity", s.background_intensity},
          {"object_intensity", s.object_intensity},
          {"class_stats", std::move(stats)}};
}

DatasetSpec spec_from_json(const json& j) {
  DatasetSpec s;
  s.id = j.at("id").get<int>();
  s.name = j.at("name").get<std::string>();
  const auto r = j.at("point_range").get<std::vector<double>>();
  if (r.size() != 6) throw SpecError("spec '" + s.name + "': point_range needs 6 values");
  s.point_range = {r[0], r[1], r[2], r[3], r[4], r[5]};
  s.points_per_object = j.at("points_per_object").get<int>();
  s.background_density = j.at("background_density").get<double>();
  s.objects_per_frame = j.at("objects_per_frame").get<std::array<int, 2>>();
  s.ground_z = j.value("ground_z", s.ground_z);
  s.background_intensity = j.value("background_intensity", s.background_intensity);
  s.object_intensity = j.value("object_intensity", s.object_intensity);
  for (const auto& [name, st] : j.at("class_stats").items()) {
    ClassStats cs;
    cs.mean = st.at("mean").get<std::array<double, 3>>();
    cs.stddev = st.at("std").get<std::array<double, 3>>();
    cs.frequency = st.value("frequency", 1.0);
    s.class_stats[class_from_name(name)] = cs;
  }
  s.validate();
  return s;
}

json registry_to_json(const std::vector<DatasetSpec>& specs) {
  json arr = json::array();
  for (const auto& s : specs) arr.push_back(spec_to_json(s));
  return {{"schema_version", 1}, {"specs", std::move(arr)}};
}

std::vector<DatasetSpec> registry_from_json(const json& j) {
  if (j.value("schema_version", 0) != 1) throw SpecError("spec registry: unsupported schema_version");
  std::vector<DatasetSpec> specs;
  std::set<int> ids;
  std::set<std::string> names;
  for (const auto& e : j.at("specs")) {
    specs.push_back(spec_from_json(e));
    if (!ids.insert(specs.back().id).second) {
      throw SpecError("spec registry: duplicate id " + std::to_string(specs.back().id));
    }
    if (!names.insert(specs.back().name).second) {
      throw SpecError("spec registry: duplicate name '" + specs.back().name + "'");
    }
  }
  return specs;
}

}  // namespace promptdet
