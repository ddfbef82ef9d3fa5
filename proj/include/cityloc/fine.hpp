#pragma once

// Fine localization: neighbouring-submap cloning for training, cascaded
// cross-attention between instance and sentence features, and regression of
// the target position relative to the submap center.

#include "cityloc/encoders.hpp"
#include "cityloc/langgen.hpp"
#include "cityloc/nn.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace cityloc::fine {

class FineError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---- submap cloning ------------------------------------------------------------------

struct PmcConfig {
  double alpha = 15.0;           // center-to-center bound, meters (inf-norm, strict)
  double beta = 10.0;            // center-to-target bound, meters (inf-norm, strict)
  std::size_t max_mismatch = 1;  // described instances a candidate may lack

  /// Throws FineError for negative or non-finite bounds.
  void validate() const;
};

/// Ids of submaps near the source and the target that still contain all but
/// max_mismatch of the described instances, ascending. May be empty.
std::vector<int> pmc_candidates(const world::TargetPose& target, const world::Submap& source,
                                const std::vector<int>& described, const std::vector<world::Submap>& submaps,
                                const PmcConfig& config);

/// Uniform pick from candidates; `fallback` when there are none.
int sample_training_submap(const std::vector<int>& candidates, int fallback, std::uint64_t seed);

// ---- model -----------------------------------------------------------------------------

struct FineConfig {
  enc::EncoderConfig encoder;
  std::size_t ccat_blocks = 2;
  double output_scale = 15.0;  // meters per regressor output unit
};

/// Cross-attention of queries onto keys with a residual, then a residual FFN,
/// both on layer-normalized inputs.
struct CatLayer {
  nn::LayerNorm ln_query, ln_key, ln_ffn;
  nn::Attention att;
  nn::FeedForward ffn;

  static CatLayer create(nn::ParamStore& store, const std::string& name, std::size_t width,
                         std::size_t heads, std::size_t hidden, std::uint64_t seed);
  ng::DiffArray operator()(nn::Binding& p, const ng::DiffArray& queries, const ng::DiffArray& keys,
                           const ng::Offsets& q_offsets, const ng::Offsets& kv_offsets) const;
};

/// Points attend to text, then text attends to the refined points.
struct CcatBlock {
  CatLayer points_from_text;
  CatLayer text_from_points;
};

/// Runs the cascade and max-pools the refined text features of each segment.
/// points/text: feature rows grouped by the per-example offsets.
ng::DiffArray ccat_fuse(nn::Binding& p, const std::vector<CcatBlock>& blocks, ng::DiffArray points,
                        const ng::Offsets& point_offsets, ng::DiffArray text, const ng::Offsets& text_offsets);

class FineModel {
 public:
  FineModel(const FineConfig& config, std::uint64_t seed);

  const FineConfig& config() const { return config_; }
  const nn::ParamStore& params() const { return params_; }
  nn::ParamStore& params() { return params_; }
  const nn::Mlp& regressor() const { return regressor_; }

  /// One fused vector per (submap, text) pair.
  ng::DiffArray fuse(nn::Binding& p, std::span<const enc::SubmapInput* const> submaps,
                     std::span<const enc::TextInput* const> texts) const;
  /// Target offsets from each submap's center, meters, one row per pair.
  ng::DiffArray forward(nn::Binding& p, std::span<const enc::SubmapInput* const> submaps,
                        std::span<const enc::TextInput* const> texts) const;

 private:
  FineConfig config_;
  nn::ParamStore params_;
  enc::InstanceEncoder instances_;
  enc::TextEncoder text_;
  std::vector<CcatBlock> blocks_;
  nn::Mlp regressor_;
};

/// Scene-frame position from an offset relative to a submap center.
world::Vec2 to_scene(world::Vec2 relative, world::Vec2 center);

/// Mean over rows of the Euclidean distance between target and prediction rows.
ng::DiffArray regression_loss(const ng::DiffArray& target, const ng::DiffArray& predicted);

/// Scene-frame predictions for each (submap, text) pair.
std::vector<world::Vec2> predict(const FineModel& model, const std::vector<const enc::SubmapInput*>& submaps,
                                 const std::vector<const enc::TextInput*>& texts);

// ---- training ---------------------------------------------------------------------------

struct Example {
  enc::TextInput text;
  int submap_id = 0;  // ground truth
  world::TargetPose pose;
  std::vector<int> described;  // distinct described instance ids
};

struct Dataset {
  std::vector<world::Submap> layout;      // by submap id
  std::vector<enc::SubmapInput> submaps;  // by submap id
  std::vector<Example> examples;
};

Dataset make_dataset(const world::ReferenceMap& map, const std::vector<lang::Description>& descriptions,
                     const enc::EncoderConfig& config);

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  PmcConfig pmc;
};

struct TrainResult {
  std::vector<double> epoch_loss;
};

TrainResult train_fine(FineModel& model, const Dataset& data, const TrainConfig& config);

/// Distance from each example's pose to the prediction made on its
/// ground-truth submap, and to that submap's center.
struct GroundTruthErrors {
  std::vector<double> model;
  std::vector<double> center;
};
GroundTruthErrors ground_truth_errors(const FineModel& model, const Dataset& data,
                                      const std::vector<std::size_t>& examples);

// ---- evaluation -------------------------------------------------------------------------

inline const std::vector<double> kEpsilons = {5.0, 10.0, 15.0};
inline const std::vector<std::size_t> kLocalizationKs = {1, 5, 10};

/// recall[e][j]: fraction of queries with any of their first ks[j] errors
/// strictly below epsilons[e]. errors[q] holds one entry per retrieved submap, best rank first.
struct RecallTable {
  std::vector<double> epsilons;
  std::vector<std::size_t> ks;
  std::vector<std::vector<double>> recall;
};

RecallTable localization_recall(const std::vector<std::vector<double>>& errors,
                                const std::vector<double>& epsilons = kEpsilons,
                                const std::vector<std::size_t>& ks = kLocalizationKs);

}  // namespace cityloc::fine
