#pragma once

// Dual-branch encoder: instance embeddings from point sets, attention +
// max-pool submap descriptors, and the hierarchical (intra/inter sentence)
// text encoder. Batched forwards run on a tape; the single-item helpers
// evaluate with constants.

#include "cityloc/langgen.hpp"
#include "cityloc/nn.hpp"
#include "cityloc/numgrad.hpp"
#include "cityloc/worldgen.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace cityloc::enc {

struct EncoderConfig {
  std::size_t width = 256;        // shared embedding width d
  std::size_t branch_width = 128; // hidden/output width of the four instance branches
  std::size_t heads = 4;
  std::size_t ffn_mult = 2;
  std::size_t text_width = lang::kDefaultTextWidth;
  std::size_t intra_blocks = 1;
  std::size_t inter_blocks = 1;
  std::size_t max_points = 64;   // per-instance point budget after subsampling
  double point_scale = 10.0;     // meters per unit for point offsets
  double position_scale = 15.0;  // meters per unit for instance positions
  bool use_color = true;
  bool use_number = true;

  bool operator==(const EncoderConfig&) const = default;
};

class EncoderError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---- cached inputs -----------------------------------------------------------------

/// Encoder-ready view of one instance in the frame of a given submap.
struct InstanceInput {
  int instance_id = 0;
  ng::Array points;                 // P x 6: offsets from centroid, then rgb
  std::array<double, 3> color{};    // mean rgb (zeros without color)
  std::array<double, 3> position{}; // centroid relative to the frame center
  double log_count = 0.0;           // log(1 + full point count)
};

/// Points are put in a canonical order and subsampled at a uniform stride,
/// so the result does not depend on the stored point order.
InstanceInput prepare_instance(const world::ObjectInstance& instance, world::Vec2 frame_center,
                               const EncoderConfig& config);

struct SubmapInput {
  int submap_id = 0;
  world::Vec2 center;
  std::vector<InstanceInput> instances;
};

SubmapInput prepare_submap(const world::ReferenceMap& map, const world::Submap& submap,
                           const EncoderConfig& config);
std::vector<SubmapInput> prepare_submaps(const world::ReferenceMap& map, const EncoderConfig& config);

struct TextInput {
  ng::Array tokens;                       // T x text_width, sentences stacked
  std::vector<std::size_t> sentence_lengths;
};

/// Rejects an empty description and sentences without tokens.
TextInput prepare_text(const std::vector<std::string>& sentences, const lang::Featurizer& featurizer);

// ---- modules -------------------------------------------------------------------------

struct InstanceEncoder {
  nn::Mlp point, color, position, number, projection;
  bool use_number = true;

  static InstanceEncoder create(nn::ParamStore& store, const std::string& name,
                                const EncoderConfig& config, std::uint64_t seed);
  /// One row per instance.
  ng::DiffArray operator()(nn::Binding& p, std::span<const InstanceInput* const> instances) const;
};

struct SubmapAggregator {
  nn::Attention attention;

  static SubmapAggregator create(nn::ParamStore& store, const std::string& name,
                                 const EncoderConfig& config, std::uint64_t seed);
  /// Residual self-attention within each segment, max pool, L2 normalize.
  ng::DiffArray operator()(nn::Binding& p, const ng::DiffArray& embeddings,
                           const ng::Offsets& offsets) const;
};

struct TextOutput {
  ng::DiffArray descriptors;  // one unit row per description
  ng::DiffArray sentences;    // one unit row per sentence
  ng::Offsets sentence_offsets;  // sentence rows of each description
};

/// Low-rank adapter applied to every token vector before the projection.
struct TokenAdapter {
  ng::DiffArray a;
  ng::DiffArray b;
};

struct TextEncoder {
  nn::Linear token_proj;
  std::vector<nn::EncoderBlock> intra, inter;
  std::size_t width = 0;

  static TextEncoder create(nn::ParamStore& store, const std::string& name,
                            const EncoderConfig& config, std::uint64_t seed);
  TextOutput operator()(nn::Binding& p, std::span<const TextInput* const> texts,
                        const std::optional<TokenAdapter>& adapter = std::nullopt) const;
};

/// Parameters and modules of the retrieval model.
class CoarseModel {
 public:
  CoarseModel(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const InstanceEncoder& instance_encoder() const { return instances_; }
  const SubmapAggregator& aggregator() const { return aggregator_; }
  const TextEncoder& text_encoder() const { return text_; }

  /// Submap descriptors for a batch (one row per submap, instance order as given).
  ng::DiffArray encode_submaps(nn::Binding& p, std::span<const SubmapInput* const> submaps) const;

 private:
  EncoderConfig config_;
  nn::ParamStore params_;
  InstanceEncoder instances_;
  SubmapAggregator aggregator_;
  TextEncoder text_;
};

// ---- single-item evaluation ------------------------------------------------------------

ng::Array encode_instance(const CoarseModel& model, const InstanceInput& instance);
ng::Array aggregate_submap(const CoarseModel& model, const ng::Array& embeddings);
ng::Array encode_submap(const CoarseModel& model, const SubmapInput& submap);

struct TextEmbedding {
  ng::Array descriptor;  // {d}
  ng::Array sentences;   // sentences x d
};
TextEmbedding encode_text(const CoarseModel& model, const TextInput& text);

}  // namespace cityloc::enc
