#pragma once

// Synthetic LiDAR-like scenes for multi-dataset training. Each DatasetSpec
// describes one domain (sensing range, density, object-size statistics,
// intensity calibration); generate_frame turns (spec, seed) into a Frame.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace promptdet {

enum ObjectClass : int { kCar = 0, kPedestrian = 1, kCyclist = 2 };
inline constexpr int kNumClasses = 3;
const std::string& class_name(int class_id);
int class_from_name(const std::string& name);

/// Axis-aligned 3D extent (x1, y1, z1, x2, y2, z2). Membership is closed at the
/// lower bound and open at the upper bound.
struct PointRange {
  double x1 = 0, y1 = 0, z1 = 0, x2 = 0, y2 = 0, z2 = 0;

  bool valid() const { return x1 < x2 && y1 < y2 && z1 < z2; }
  bool contains(double x, double y, double z) const {
    return x >= x1 && x < x2 && y >= y1 && y < y2 && z >= z1 && z < z2;
  }
  bool contains_xy(double x, double y) const { return x >= x1 && x < x2 && y >= y1 && y < y2; }
  bool operator==(const PointRange&) const = default;
};

/// The aligned plane used by every dataset after range alignment.
inline constexpr PointRange kGlobalRange{-75.2, -75.2, -2.0, 75.2, 75.2, 4.0};

struct Box3D {
  std::array<double, 3> center{};  // cx, cy, cz
  std::array<double, 3> size{};    // l (x), w (y), h (z)
  int class_id = kCar;

  double lo(int axis) const { return center[axis] - 0.5 * size[axis]; }
  double hi(int axis) const { return center[axis] + 0.5 * size[axis]; }
  bool contains(double x, double y, double z, double slack = 1e-9) const;
  bool valid() const { return size[0] > 0 && size[1] > 0 && size[2] > 0; }
  bool operator==(const Box3D&) const = default;
};

struct Point {
  double x = 0, y = 0, z = 0, intensity = 0;
  bool operator==(const Point&) const = default;
};

struct Frame {
  std::vector<Point> points;
  std::vector<Box3D> boxes;
  int dataset_id = 0;
  /// Index of the box each point was sampled on, -1 for background. Not persisted.
  std::vector<int> point_object;

  bool operator==(const Frame& o) const {
    return points == o.points && boxes == o.boxes && dataset_id == o.dataset_id;
  }
};

struct ClassStats {
  std::array<double, 3> mean{};  // l, w, h
  std::array<double, 3> stddev{};
  double frequency = 1.0;  // relative sampling weight
};

struct DatasetSpec {
  int id = 0;
  std::string name;
  PointRange point_range;
  int points_per_object = 32;
  double background_density = 0.05;  // points per square meter
  std::map<int, ClassStats> class_stats;
  std::array<int, 2> objects_per_frame{0, 0};
  // Domain attributes beyond range/density/size.
  double ground_z = -1.6;
  std::array<double, 2> background_intensity{0.0, 1.0};
  std::array<double, 2> object_intensity{0.0, 1.0};

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Built-in presets: "K-like" (front view, dense, small cars), "W-like"
/// (360 degrees, dense, large cars), "N-like" (360 degrees within 51.2 m,
/// sparse). All numbers are synthetic choices.
std::vector<DatasetSpec> preset_specs();
const DatasetSpec& preset_spec(const std::string& name);

Frame generate_frame(const DatasetSpec& spec, std::uint64_t rng_seed);
std::vector<Frame> generate_frames(const DatasetSpec& spec, std::uint64_t seed, std::size_t count);

/// Keeps exactly the points inside `global_range`; drops boxes whose centers fall outside.
Frame align_point_range(const Frame& frame, const PointRange& global_range);

/// Rescales each box (and the points inside it, about its center) by
/// target.mean / source.mean for its class.
Frame apply_statistical_normalization(const Frame& frame, const DatasetSpec& source, const DatasetSpec& target);

// Persistence -----------------------------------------------------------------

nlohmann::json frame_to_json(const Frame& frame);
Frame frame_from_json(const nlohmann::json& j);
void write_frames_jsonl(std::ostream& os, const std::vector<Frame>& frames);
std::vector<Frame> read_frames_jsonl(std::istream& is);

nlohmann::json spec_to_json(const DatasetSpec& spec);
DatasetSpec spec_from_json(const nlohmann::json& j);
/// Registry document: {"schema_version": 1, "specs": [...]}. Ids must be unique.
nlohmann::json registry_to_json(const std::vector<DatasetSpec>& specs);
std::vector<DatasetSpec> registry_from_json(const nlohmann::json& j);

}  // namespace promptdet
