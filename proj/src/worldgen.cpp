#include "cityloc/worldgen.hpp"

#include "cityloc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cityloc::world {

namespace {

constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "road", "sidewalk", "building", "vegetation", "terrain", "fence", "pole", "traffic-sign"};

constexpr std::array<std::string_view, kNumRelations> kRelationNames = {"on-top", "north", "south",
                                                                        "east", "west"};

constexpr std::array<NamedColor, kNumColors> kPalette = {{
    {"gray", {0.50, 0.50, 0.50}},
    {"dark-green", {0.13, 0.33, 0.13}},
    {"green", {0.30, 0.65, 0.25}},
    {"black", {0.08, 0.08, 0.08}},
    {"white", {0.92, 0.92, 0.90}},
    {"red", {0.75, 0.20, 0.15}},
    {"brown", {0.50, 0.35, 0.20}},
    {"yellow", {0.90, 0.80, 0.20}},
}};

// Plausible palette entries per class.
const std::array<std::vector<int>, kNumClasses>& class_colors() {
  static const std::array<std::vector<int>, kNumClasses> table = {{
      {0, 3, 6},        // road: gray black brown
      {0, 4, 5, 6},     // sidewalk
      {4, 0, 5, 6, 7},  // building
      {2, 1, 6, 7},     // vegetation
      {2, 1, 6},        // terrain
      {0, 1, 6, 4, 3},  // fence
      {0, 3, 4},        // pole
      {5, 7, 4},        // traffic-sign
  }};
  return table;
}

struct Footprint {
  enum Kind { kRect, kDisc } kind;
  double a_min, a_max;  // rect length or disc radius
  double b_min, b_max;  // rect width (unused for discs)
  double z_lo_min, z_lo_max;
  double z_hi_min, z_hi_max;
};

// Geometry per class: rectangles for buildings/roads, discs for vegetation,
// thin columns for poles.
Footprint footprint_of(SemanticClass c) {
  switch (c) {
    case SemanticClass::kRoad: return {Footprint::kRect, 20, 40, 5, 8, 0, 0, 0.05, 0.15};
    case SemanticClass::kSidewalk: return {Footprint::kRect, 15, 30, 2, 3.5, 0, 0, 0.1, 0.25};
    case SemanticClass::kBuilding: return {Footprint::kRect, 8, 20, 8, 15, 0, 0, 6, 20};
    case SemanticClass::kVegetation: return {Footprint::kDisc, 1.5, 5, 0, 0, 0.3, 1.0, 2, 8};
    case SemanticClass::kTerrain: return {Footprint::kDisc, 3, 8, 0, 0, 0, 0, 0.1, 0.4};
    case SemanticClass::kFence: return {Footprint::kRect, 5, 15, 0.15, 0.3, 0, 0, 1, 2};
    case SemanticClass::kPole: return {Footprint::kDisc, 0.1, 0.2, 0, 0, 0, 0, 4, 8};
    case SemanticClass::kTrafficSign: return {Footprint::kDisc, 0.2, 0.4, 0, 0, 1.5, 2, 2.5, 3.2};
  }
  return {};
}

double dist2(Vec2 a, Vec2 b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  return dx * dx + dy * dy;
}

}  // namespace

std::string_view class_name(SemanticClass c) { return kClassNames.at(static_cast<std::size_t>(c)); }

std::optional<SemanticClass> class_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i) {
    if (kClassNames[i] == name) return static_cast<SemanticClass>(i);
  }
  return std::nullopt;
}

bool is_ground_class(SemanticClass c) {
  return c == SemanticClass::kRoad || c == SemanticClass::kSidewalk ||
         c == SemanticClass::kTerrain || c == SemanticClass::kVegetation;
}

const std::array<NamedColor, kNumColors>& palette() { return kPalette; }

std::optional<int> color_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kPalette.size(); ++i) {
    if (kPalette[i].name == name) return static_cast<int>(i);
  }
  return std::nullopt;
}

std::string_view relation_name(Relation r) { return kRelationNames.at(static_cast<std::size_t>(r)); }

std::optional<Relation> relation_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kRelationNames.size(); ++i) {
    if (kRelationNames[i] == name) return static_cast<Relation>(i);
  }
  return std::nullopt;
}

Relation opposite(Relation r) {
  switch (r) {
    case Relation::kEast: return Relation::kWest;
    case Relation::kWest: return Relation::kEast;
    case Relation::kNorth: return Relation::kSouth;
    case Relation::kSouth: return Relation::kNorth;
    case Relation::kOnTop: return Relation::kNorth;
  }
  return r;
}

Vec3 centroid_of(const std::vector<Vec3>& points) {
  Vec3 c;
  for (const auto& p : points) {
    c.x += p.x;
    c.y += p.y;
    c.z += p.z;
  }
  const double n = static_cast<double>(points.size());
  c.x /= n;
  c.y /= n;
  c.z /= n;
  return c;
}

SceneConfig SceneConfig::defaults() {
  SceneConfig cfg;
  cfg.classes = {{
      {12, 20, 1100, 1600},  // road
      {15, 25, 1050, 1400},  // sidewalk
      {12, 20, 600, 1200},   // building
      {40, 60, 1050, 1400},  // vegetation
      {20, 30, 1050, 1400},  // terrain
      {15, 25, 150, 450},    // fence
      {30, 45, 60, 300},     // pole
      {15, 25, 40, 150},     // traffic-sign
  }};
  return cfg;
}

SceneConfig SceneConfig::empty() {
  SceneConfig cfg = defaults();
  for (auto& c : cfg.classes) c.min_per_ha = c.max_per_ha = 0.0;
  return cfg;
}

ReferenceMap generate_scene(std::uint64_t seed, const Extent& extent, const SceneConfig& config) {
  if (!(extent.width() > 0.0) || !(extent.height() > 0.0)) {
    throw WorldError("generate_scene: extent has zero area");
  }
  for (const auto& spec : config.classes) {
    if (spec.min_per_ha < 0.0 || spec.max_per_ha < spec.min_per_ha) {
      throw WorldError("generate_scene: densities must satisfy 0 <= min <= max");
    }
    if (spec.min_points < 1 || spec.max_points < spec.min_points) {
      throw WorldError("generate_scene: point ranges must satisfy 1 <= min <= max");
    }
  }
  ReferenceMap map;
  map.extent = extent;
  const double area_ha = extent.width() * extent.height() / 1e4;

  for (std::size_t ci = 0; ci < kNumClasses; ++ci) {
    const auto label = static_cast<SemanticClass>(ci);
    const ClassSpec& spec = config.classes[ci];
    Rng rng(mix_seed(seed, ci));
    const double density = rng.uniform(spec.min_per_ha, spec.max_per_ha);
    const auto count = static_cast<std::size_t>(std::llround(area_ha * density));
    const Footprint fp = footprint_of(label);
    const auto& colors = class_colors()[ci];

    for (std::size_t k = 0; k < count; ++k) {
      ObjectInstance inst;
      inst.id = static_cast<int>(map.instances.size());
      inst.label = label;
      inst.color = colors[rng.index(colors.size())];
      for (int c = 0; c < 3; ++c) {
        inst.rgb[c] = std::clamp(kPalette[inst.color].rgb[c] + rng.uniform(-0.04, 0.04), 0.0, 1.0);
      }
      const Vec2 center{rng.uniform(extent.min_x, extent.max_x),
                        rng.uniform(extent.min_y, extent.max_y)};
      const double yaw = rng.uniform(0.0, std::numbers::pi);
      const double a = rng.uniform(fp.a_min, fp.a_max);
      const double b = rng.uniform(fp.b_min, fp.b_max);
      const double z_lo = rng.uniform(fp.z_lo_min, fp.z_lo_max);
      const double z_hi = std::max(z_lo + 0.05, rng.uniform(fp.z_hi_min, fp.z_hi_max));
      const auto n_points =
          static_cast<std::size_t>(rng.between(static_cast<long long>(spec.min_points),
                                               static_cast<long long>(spec.max_points)));
      inst.points.reserve(n_points);
      const double cy = std::cos(yaw);
      const double sy = std::sin(yaw);
      for (std::size_t p = 0; p < n_points; ++p) {
        double u;
        double v;
        if (fp.kind == Footprint::kRect) {
          u = rng.uniform(-a / 2, a / 2);
          v = rng.uniform(-b / 2, b / 2);
        } else {
          const double r = a * std::sqrt(rng.uniform());
          const double th = rng.uniform(0.0, 2.0 * std::numbers::pi);
          u = r * std::cos(th);
          v = r * std::sin(th);
        }
        Vec3 pt;
        pt.x = std::clamp(center.x + cy * u - sy * v, extent.min_x, extent.max_x);
        pt.y = std::clamp(center.y + sy * u + cy * v, extent.min_y, extent.max_y);
        pt.z = rng.uniform(z_lo, z_hi);
        inst.points.push_back(pt);
      }
      inst.centroid = centroid_of(inst.points);
      map.instances.push_back(std::move(inst));
    }
  }
  return map;
}

std::vector<Submap> slice_submaps(const ReferenceMap& map, double cell_size, double stride) {
  if (!(stride > 0.0)) throw WorldError("slice_submaps: stride must be positive");
  if (!(cell_size > 0.0)) throw WorldError("slice_submaps: cell size must be positive");
  if (stride > cell_size) throw WorldError("slice_submaps: stride exceeds cell size");
  constexpr double kEps = 1e-9;
  auto origins = [&](double lo, double hi) {
    std::vector<double> out;
    for (std::size_t i = 0;; ++i) {
      const double o = lo + static_cast<double>(i) * stride;
      if (o + cell_size > hi + kEps) break;
      out.push_back(o);
    }
    return out;
  };
  const auto xs = origins(map.extent.min_x, map.extent.max_x);
  const auto ys = origins(map.extent.min_y, map.extent.max_y);

  std::vector<Submap> submaps;
  for (double oy : ys) {
    for (double ox : xs) {
      Submap s;
      s.center = {ox + cell_size / 2, oy + cell_size / 2};
      s.cell_size = cell_size;
      for (const auto& inst : map.instances) {
        const auto& c = inst.centroid;
        if (c.x >= ox && c.x <= ox + cell_size && c.y >= oy && c.y <= oy + cell_size) {
          s.instance_ids.push_back(inst.id);
        }
      }
      if (s.instance_ids.empty()) continue;
      s.id = static_cast<int>(submaps.size());
      submaps.push_back(std::move(s));
    }
  }
  return submaps;
}

TargetPose sample_target(const Submap& submap, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7a47));
  const double q = submap.cell_size / 4.0;
  TargetPose pose;
  pose.x = rng.uniform(submap.center.x - q, submap.center.x + q);
  pose.y = rng.uniform(submap.center.y - q, submap.center.y + q);
  return pose;
}

Relation relation_of(const TargetPose& pose, const ObjectInstance& instance, double on_top_radius) {
  const double dx = pose.x - instance.centroid.x;
  const double dy = pose.y - instance.centroid.y;
  if (is_ground_class(instance.label) && std::hypot(dx, dy) < on_top_radius) {
    return Relation::kOnTop;
  }
  if (std::abs(dx) >= std::abs(dy)) return dx > 0 ? Relation::kEast : Relation::kWest;
  return dy > 0 ? Relation::kNorth : Relation::kSouth;
}

std::vector<Hint> compute_hints(const TargetPose& pose, const Submap& submap,
                                const ReferenceMap& map, std::size_t n_hints,
                                double on_top_radius) {
  if (n_hints < 1) throw WorldError("compute_hints: n_hints must be >= 1");
  if (submap.instance_ids.size() < n_hints) {
    throw WorldError("compute_hints: submap " + std::to_string(submap.id) + " has " +
                     std::to_string(submap.instance_ids.size()) + " instances, need " +
                     std::to_string(n_hints));
  }
  const Vec2 p{pose.x, pose.y};
  std::vector<std::pair<double, int>> by_distance;
  for (int id : submap.instance_ids) {
    const auto& c = map.instance(id).centroid;
    by_distance.emplace_back(dist2(p, {c.x, c.y}), id);
  }
  std::sort(by_distance.begin(), by_distance.end());
  std::vector<Hint> hints;
  for (std::size_t k = 0; k < n_hints; ++k) {
    const auto& inst = map.instance(by_distance[k].second);
    Hint h;
    h.instance_id = inst.id;
    h.relation = relation_of(pose, inst, on_top_radius);
    h.label = inst.label;
    h.color = inst.color;
    hints.push_back(h);
  }
  return hints;
}

std::size_t ground_truth_submap(const TargetPose& pose, const std::vector<Submap>& submaps) {
  if (submaps.empty()) throw WorldError("ground_truth_submap: no submaps");
  std::size_t best = 0;
  double best_d = dist2({pose.x, pose.y}, submaps[0].center);
  for (std::size_t i = 1; i < submaps.size(); ++i) {
    const double d = dist2({pose.x, pose.y}, submaps[i].center);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

std::vector<PosePair> sample_pose_pairs(const ReferenceMap& map, const PairConfig& config,
                                        std::uint64_t seed) {
  std::vector<PosePair> pairs;
  for (const auto& source : map.submaps) {
    for (std::size_t k = 0; k < config.poses_per_submap; ++k) {
      const std::uint64_t s = mix_seed(seed, static_cast<std::uint64_t>(source.id) * 1000003ULL + k);
      const TargetPose pose = sample_target(source, s);
      const Submap& gt = map.submaps[ground_truth_submap(pose, map.submaps)];
      if (gt.instance_ids.size() < config.n_hints) continue;
      PosePair pair;
      pair.id = static_cast<int>(pairs.size());
      pair.pose = pose;
      pair.submap_id = gt.id;
      pair.hints = compute_hints(pose, gt, map, config.n_hints, config.on_top_radius);
      pairs.push_back(std::move(pair));
    }
  }
  return pairs;
}

}  // namespace cityloc::world
