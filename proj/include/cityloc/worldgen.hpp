#pragma once

// Synthetic labeled city maps, their tiling into overlapping square submaps,
// target poses, and the spatial hints that ground the text descriptions.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cityloc::world {

enum class SemanticClass : int {
  kRoad = 0,
  kSidewalk,
  kBuilding,
  kVegetation,
  kTerrain,
  kFence,
  kPole,
  kTrafficSign,
};
inline constexpr std::size_t kNumClasses = 8;

std::string_view class_name(SemanticClass c);
std::optional<SemanticClass> class_from_name(std::string_view name);
/// Classes a pose can stand "on top of".
bool is_ground_class(SemanticClass c);

struct NamedColor {
  std::string_view name;
  std::array<double, 3> rgb;
};
inline constexpr std::size_t kNumColors = 8;
const std::array<NamedColor, kNumColors>& palette();
std::optional<int> color_from_name(std::string_view name);

enum class Relation : int { kOnTop = 0, kNorth, kSouth, kEast, kWest };
inline constexpr std::size_t kNumRelations = 5;
std::string_view relation_name(Relation r);
std::optional<Relation> relation_from_name(std::string_view name);
/// east<->west, north<->south, on-top -> north.
Relation opposite(Relation r);

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Vec2&) const = default;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  bool operator==(const Vec3&) const = default;
};

struct Extent {
  double min_x = 0.0;
  double min_y = 0.0;
  double max_x = 0.0;
  double max_y = 0.0;

  double width() const { return max_x - min_x; }
  double height() const { return max_y - min_y; }
  bool contains(Vec2 p) const {
    return p.x >= min_x && p.x <= max_x && p.y >= min_y && p.y <= max_y;
  }
  bool operator==(const Extent&) const = default;
};

struct ObjectInstance {
  int id = 0;
  SemanticClass label = SemanticClass::kRoad;
  int color = 0;  // palette index
  std::array<double, 3> rgb{};
  std::vector<Vec3> points;
  Vec3 centroid;

  std::size_t point_count() const { return points.size(); }
  bool operator==(const ObjectInstance&) const = default;
};

/// Arithmetic mean of the points.
Vec3 centroid_of(const std::vector<Vec3>& points);

struct Submap {
  int id = 0;
  Vec2 center;
  double cell_size = 0.0;
  std::vector<int> instance_ids;
  bool operator==(const Submap&) const = default;
};

struct TargetPose {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const TargetPose&) const = default;
};

struct Hint {
  int instance_id = 0;
  Relation relation = Relation::kOnTop;
  SemanticClass label = SemanticClass::kRoad;
  int color = 0;
  bool includes_color = true;
  bool includes_class = true;
  bool operator==(const Hint&) const = default;
};

/// Ground-truth pair: a target pose, its submap and a handle into the
/// description files (one description per level shares the handle).
struct PosePair {
  int id = 0;
  TargetPose pose;
  int submap_id = 0;
  std::vector<Hint> hints;
  bool operator==(const PosePair&) const = default;
};

struct ReferenceMap {
  Extent extent;
  std::vector<ObjectInstance> instances;  // instance id == index
  std::vector<Submap> submaps;            // submap id == index
  std::vector<PosePair> pairs;            // pair id == index

  const ObjectInstance& instance(int id) const { return instances.at(static_cast<std::size_t>(id)); }
  const Submap& submap(int id) const { return submaps.at(static_cast<std::size_t>(id)); }
  bool operator==(const ReferenceMap&) const = default;
};

class WorldError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---- generation --------------------------------------------------------------

struct ClassSpec {
  double min_per_ha = 0.0;  // instances per hectare
  double max_per_ha = 0.0;
  std::size_t min_points = 1;
  std::size_t max_points = 1;
};

struct SceneConfig {
  std::array<ClassSpec, kNumClasses> classes;

  static SceneConfig defaults();
  static SceneConfig empty();
};

/// Instances only; deterministic for a fixed seed. Class counts are
/// round(area_ha * density) with density drawn in [min_per_ha, max_per_ha].
ReferenceMap generate_scene(std::uint64_t seed, const Extent& extent, const SceneConfig& config);

// ---- tiling / poses / hints ----------------------------------------------------

inline constexpr double kDefaultCellSize = 30.0;
inline constexpr double kDefaultStride = 10.0;
inline constexpr double kDefaultOnTopRadius = 3.0;
inline constexpr std::size_t kDefaultHints = 6;

/// Cells at origins extent_min + i*stride lying fully inside the extent;
/// a centroid on a cell boundary belongs to every cell touching it. Empty
/// cells are dropped and ids are assigned in row-major (y, then x) order.
std::vector<Submap> slice_submaps(const ReferenceMap& map, double cell_size = kDefaultCellSize,
                                  double stride = kDefaultStride);

/// Uniform inside the central half of the submap footprint.
TargetPose sample_target(const Submap& submap, std::uint64_t seed);

/// The n_h instances nearest to the pose (horizontal distance, ties by id),
/// each with the direction of the pose relative to the instance.
std::vector<Hint> compute_hints(const TargetPose& pose, const Submap& submap,
                                const ReferenceMap& map, std::size_t n_hints = kDefaultHints,
                                double on_top_radius = kDefaultOnTopRadius);

/// Relation rule alone, for a pose and one instance.
Relation relation_of(const TargetPose& pose, const ObjectInstance& instance,
                     double on_top_radius = kDefaultOnTopRadius);

/// Submap whose center is closest to the pose; ties go to the lowest index.
std::size_t ground_truth_submap(const TargetPose& pose, const std::vector<Submap>& submaps);

struct PairConfig {
  std::size_t poses_per_submap = 5;
  std::size_t n_hints = kDefaultHints;
  double on_top_radius = kDefaultOnTopRadius;
};

/// For every submap, samples poses_per_submap targets; each pair is assigned
/// to its ground-truth (closest-center) submap and described by hints from
/// that submap. Poses whose submap has fewer than n_hints instances are skipped.
std::vector<PosePair> sample_pose_pairs(const ReferenceMap& map, const PairConfig& config,
                                        std::uint64_t seed);

}  // namespace cityloc::world
