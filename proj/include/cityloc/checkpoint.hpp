#pragma once

// Self-describing binary container for named arrays:
//   "CITYLOC\0" | u32 format | u64 header bytes | JSON header | float64 payload (little-endian)
// The JSON header lists array names and shapes in payload order plus free-form metadata.

#include "cityloc/nn.hpp"
#include "cityloc/numgrad.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cityloc {

inline constexpr std::uint32_t kCheckpointFormat = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, ng::Array>> arrays;

  const ng::Array* find(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a-64 of the encoded bytes, as 16 hex digits.
std::string checkpoint_digest(const Checkpoint& ckpt);

/// Appends every array of `store` under "<prefix>/<name>".
void export_store(Checkpoint& ckpt, const nn::ParamStore& store, const std::string& prefix);
/// Overwrites `store` from "<prefix>/<name>" entries; a missing array or a
/// shape mismatch throws CheckpointError naming the array.
void import_store(const Checkpoint& ckpt, nn::ParamStore& store, const std::string& prefix);

}  // namespace cityloc
