#pragma once

// On-disk formats: scene JSON + point sidecar, submap listing, description
// JSONL, CSV tables and flat key=value config files.

#include "cityloc/langgen.hpp"
#include "cityloc/worldgen.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace cityloc::io {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kSceneVersion = 1;
inline constexpr int kConfigSchema = 1;

std::string read_text(const fs::path& path);
/// Creates parent directories; throws IoError naming the path on failure.
void write_text(const fs::path& path, const std::string& text);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double x);

// ---- scenes ---------------------------------------------------------------------------

nlohmann::json hint_to_json(const world::Hint& h);
world::Hint hint_from_json(const nlohmann::json& j);

/// Writes scene.json, points.bin and submaps.json into `dir`.
void save_scene(const fs::path& dir, const world::ReferenceMap& map);
world::ReferenceMap load_scene(const fs::path& dir);

// ---- descriptions -----------------------------------------------------------------------

nlohmann::json description_to_json(const lang::Description& d);
lang::Description description_from_json(const nlohmann::json& j);

fs::path descriptions_path(const fs::path& dir, lang::Level level);
void save_descriptions(const fs::path& path, const std::vector<lang::Description>& descriptions);
std::vector<lang::Description> load_descriptions(const fs::path& path);

// ---- tables -----------------------------------------------------------------------------

using CsvRow = std::vector<std::string>;
std::string to_csv(const CsvRow& header, const std::vector<CsvRow>& rows);
void save_csv(const fs::path& path, const CsvRow& header, const std::vector<CsvRow>& rows);

/// Pretty JSON with a trailing newline.
void save_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json load_json(const fs::path& path);

// ---- config files -----------------------------------------------------------------------

/// Flat `key = value` lines; '#' starts a comment. The file must declare
/// `schema = 1`; the schema key itself is not returned.
std::map<std::string, std::string> parse_config(const std::string& text, const std::string& source);
std::map<std::string, std::string> load_config(const fs::path& path);

}  // namespace cityloc::io
