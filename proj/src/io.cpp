#include "cityloc/io.hpp"

#include "cityloc/checkpoint.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace cityloc::io {

using nlohmann::json;

namespace {

constexpr const char* kSceneFile = "scene.json";
constexpr const char* kPointsFile = "points.bin";
constexpr const char* kSubmapsFile = "submaps.json";

// Field access with errors that name the file and key.
const json& field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw IoError(where + ": missing field '" + key + "'");
  return j.at(key);
}

template <typename T>
T get(const json& j, const char* key, const std::string& where) {
  try {
    return field(j, key, where).get<T>();
  } catch (const json::exception& e) {
    throw IoError(where + ": field '" + key + "': " + e.what());
  }
}

world::SemanticClass class_or_throw(const std::string& name, const std::string& where) {
  auto c = world::class_from_name(name);
  if (!c) throw IoError(where + ": unknown class '" + name + "'");
  return *c;
}

int color_or_throw(const std::string& name, const std::string& where) {
  auto c = world::color_from_name(name);
  if (!c) throw IoError(where + ": unknown color '" + name + "'");
  return *c;
}

world::Relation relation_or_throw(const std::string& name, const std::string& where) {
  auto r = world::relation_from_name(name);
  if (!r) throw IoError(where + ": unknown relation '" + name + "'");
  return *r;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::string format_double(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

// ---- scenes ---------------------------------------------------------------------------

json hint_to_json(const world::Hint& h) {
  return {{"instance", h.instance_id},
          {"relation", world::relation_name(h.relation)},
          {"class", world::class_name(h.label)},
          {"color", world::palette().at(static_cast<std::size_t>(h.color)).name},
          {"includes_color", h.includes_color},
          {"includes_class", h.includes_class}};
}

world::Hint hint_from_json(const json& j) {
  const std::string where = "hint";
  world::Hint h;
  h.instance_id = get<int>(j, "instance", where);
  h.relation = relation_or_throw(get<std::string>(j, "relation", where), where);
  h.label = class_or_throw(get<std::string>(j, "class", where), where);
  h.color = color_or_throw(get<std::string>(j, "color", where), where);
  h.includes_color = get<bool>(j, "includes_color", where);
  h.includes_class = get<bool>(j, "includes_class", where);
  return h;
}

void save_scene(const fs::path& dir, const world::ReferenceMap& map) {
  std::size_t total = 0;
  for (const auto& inst : map.instances) total += inst.points.size();
  Checkpoint points;
  points.meta = {{"kind", "scene-points"}};
  ng::Array xyz({total, 3});
  std::size_t row = 0;
  json instances = json::array();
  for (const auto& inst : map.instances) {
    for (const auto& p : inst.points) {
      xyz.at(row, 0) = p.x;
      xyz.at(row, 1) = p.y;
      xyz.at(row, 2) = p.z;
      ++row;
    }
    instances.push_back({{"id", inst.id},
                         {"class", world::class_name(inst.label)},
                         {"color", world::palette().at(static_cast<std::size_t>(inst.color)).name},
                         {"rgb", inst.rgb},
                         {"centroid", {inst.centroid.x, inst.centroid.y, inst.centroid.z}},
                         {"point_count", inst.points.size()}});
  }
  points.arrays.emplace_back("points", std::move(xyz));

  json pairs = json::array();
  for (const auto& p : map.pairs) {
    json hints = json::array();
    for (const auto& h : p.hints) hints.push_back(hint_to_json(h));
    pairs.push_back({{"id", p.id}, {"pose", {p.pose.x, p.pose.y}}, {"submap", p.submap_id}, {"hints", hints}});
  }
  const json scene = {{"format", "cityloc-scene"},
                      {"version", kSceneVersion},
                      {"extent", {map.extent.min_x, map.extent.min_y, map.extent.max_x, map.extent.max_y}},
                      {"points_file", kPointsFile},
                      {"instances", instances},
                      {"pairs", pairs}};

  json submaps = json::array();
  for (const auto& s : map.submaps) {
    submaps.push_back({{"id", s.id},
                       {"center", {s.center.x, s.center.y}},
                       {"cell_size", s.cell_size},
                       {"instances", s.instance_ids}});
  }
  save_json(dir / kSceneFile, scene);
  save_checkpoint(dir / kPointsFile, points);
  save_json(dir / kSubmapsFile, {{"format", "cityloc-submaps"}, {"version", kSceneVersion}, {"submaps", submaps}});
}

world::ReferenceMap load_scene(const fs::path& dir) {
  const std::string where = (dir / kSceneFile).string();
  const json scene = load_json(dir / kSceneFile);
  if (get<std::string>(scene, "format", where) != "cityloc-scene" ||
      get<int>(scene, "version", where) != kSceneVersion) {
    throw IoError(where + ": not a version " + std::to_string(kSceneVersion) + " scene file");
  }
  world::ReferenceMap map;
  const auto ext = get<std::vector<double>>(scene, "extent", where);
  if (ext.size() != 4) throw IoError(where + ": extent needs 4 numbers");
  map.extent = {ext[0], ext[1], ext[2], ext[3]};

  const Checkpoint points = load_checkpoint(dir / get<std::string>(scene, "points_file", where));
  const ng::Array* xyz = points.find("points");
  if (xyz == nullptr || xyz->cols() != 3) throw IoError(where + ": point sidecar lacks an n x 3 'points' array");
  std::size_t row = 0;
  for (const auto& ij : field(scene, "instances", where)) {
    world::ObjectInstance inst;
    inst.id = get<int>(ij, "id", where);
    if (inst.id != static_cast<int>(map.instances.size())) throw IoError(where + ": instance ids must be 0..n-1");
    inst.label = class_or_throw(get<std::string>(ij, "class", where), where);
    inst.color = color_or_throw(get<std::string>(ij, "color", where), where);
    inst.rgb = get<std::array<double, 3>>(ij, "rgb", where);
    const auto c = get<std::array<double, 3>>(ij, "centroid", where);
    inst.centroid = {c[0], c[1], c[2]};
    const auto n = get<std::size_t>(ij, "point_count", where);
    if (row + n > xyz->rows()) throw IoError(where + ": point sidecar is shorter than the instance counts");
    for (std::size_t i = 0; i < n; ++i, ++row) {
      inst.points.push_back({xyz->at(row, 0), xyz->at(row, 1), xyz->at(row, 2)});
    }
    map.instances.push_back(std::move(inst));
  }
  if (row != xyz->rows()) throw IoError(where + ": point sidecar has extra rows");

  for (const auto& pj : field(scene, "pairs", where)) {
    world::PosePair p;
    p.id = get<int>(pj, "id", where);
    const auto pose = get<std::array<double, 2>>(pj, "pose", where);
    p.pose = {pose[0], pose[1]};
    p.submap_id = get<int>(pj, "submap", where);
    for (const auto& hj : field(pj, "hints", where)) p.hints.push_back(hint_from_json(hj));
    map.pairs.push_back(std::move(p));
  }

  const std::string swhere = (dir / kSubmapsFile).string();
  const json submaps = load_json(dir / kSubmapsFile);
  for (const auto& sj : field(submaps, "submaps", swhere)) {
    world::Submap s;
    s.id = get<int>(sj, "id", swhere);
    if (s.id != static_cast<int>(map.submaps.size())) throw IoError(swhere + ": submap ids must be 0..n-1");
    const auto c = get<std::array<double, 2>>(sj, "center", swhere);
    s.center = {c[0], c[1]};
    s.cell_size = get<double>(sj, "cell_size", swhere);
    s.instance_ids = get<std::vector<int>>(sj, "instances", swhere);
    for (int id : s.instance_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= map.instances.size()) {
        throw IoError(swhere + ": submap " + std::to_string(s.id) + " lists unknown instance " + std::to_string(id));
      }
    }
    map.submaps.push_back(std::move(s));
  }
  return map;
}

// ---- descriptions -----------------------------------------------------------------------

json description_to_json(const lang::Description& d) {
  json hints = json::array();
  for (const auto& h : d.hints) hints.push_back(hint_to_json(h));
  return {{"pair", d.pair_id},
          {"level", lang::level_name(d.level)},
          {"submap", d.submap_id},
          {"pose", {d.pose.x, d.pose.y}},
          {"sentences", d.sentences},
          {"hints", hints},
          {"hint_sentence", d.hint_sentence}};
}

lang::Description description_from_json(const json& j) {
  const std::string where = "description";
  lang::Description d;
  d.pair_id = get<int>(j, "pair", where);
  const auto level = lang::level_from_name(get<std::string>(j, "level", where));
  if (!level) throw IoError(where + ": unknown level");
  d.level = *level;
  d.submap_id = get<int>(j, "submap", where);
  const auto pose = get<std::array<double, 2>>(j, "pose", where);
  d.pose = {pose[0], pose[1]};
  d.sentences = get<std::vector<std::string>>(j, "sentences", where);
  for (const auto& hj : field(j, "hints", where)) d.hints.push_back(hint_from_json(hj));
  d.hint_sentence = get<std::vector<int>>(j, "hint_sentence", where);
  if (d.hint_sentence.size() != d.hints.size()) throw IoError(where + ": one hint_sentence entry per hint");
  return d;
}

fs::path descriptions_path(const fs::path& dir, lang::Level level) {
  return dir / ("descriptions_" + std::string(lang::level_name(level)) + ".jsonl");
}

void save_descriptions(const fs::path& path, const std::vector<lang::Description>& descriptions) {
  std::string out;
  for (const auto& d : descriptions) out += description_to_json(d).dump() + "\n";
  write_text(path, out);
}

std::vector<lang::Description> load_descriptions(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<lang::Description> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(description_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---- tables -----------------------------------------------------------------------------

std::string to_csv(const CsvRow& header, const std::vector<CsvRow>& rows) {
  auto line = [](const CsvRow& r) {
    std::string s;
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) s += ',';
      if (r[i].find_first_of(",\"\n") != std::string::npos) {
        s += '"';
        for (char c : r[i]) s += (c == '"') ? std::string("\"\"") : std::string(1, c);
        s += '"';
      } else {
        s += r[i];
      }
    }
    return s + "\n";
  };
  std::string out = line(header);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw IoError("CSV row width does not match the header");
    out += line(r);
  }
  return out;
}

void save_csv(const fs::path& path, const CsvRow& header, const std::vector<CsvRow>& rows) {
  write_text(path, to_csv(header, rows));
}

void save_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json load_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---- config files -----------------------------------------------------------------------

std::map<std::string, std::string> parse_config(const std::string& text, const std::string& source) {
  std::map<std::string, std::string> out;
  std::optional<std::string> schema;
  std::istringstream in(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string at = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw IoError(at + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw IoError(at + ": empty key");
    if (key == "schema") {
      schema = value;
      continue;
    }
    if (!out.emplace(key, value).second) throw IoError(at + ": duplicate key '" + key + "'");
  }
  if (!schema) throw IoError(source + ": missing 'schema = " + std::to_string(kConfigSchema) + "'");
  if (*schema != std::to_string(kConfigSchema)) {
    throw IoError(source + ": unsupported config schema '" + *schema + "' (expected " +
                  std::to_string(kConfigSchema) + ")");
  }
  return out;
}

std::map<std::string, std::string> load_config(const fs::path& path) {
  return parse_config(read_text(path), path.string());
}

}  // namespace cityloc::io
