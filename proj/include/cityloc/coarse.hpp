#pragma once

// Submap retrieval: descriptor index, top-k search, recall@k, contrastive
// training with masked submaps, and distillation of a new text path toward a
// frozen one.

#include "cityloc/encoders.hpp"
#include "cityloc/langgen.hpp"
#include "cityloc/mhcl.hpp"
#include "cityloc/nn.hpp"

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace cityloc::coarse {

class CoarseError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---- retrieval ---------------------------------------------------------------------

struct RetrievalIndex {
  ng::Array descriptors;  // one unit row per submap
  std::vector<int> ids;   // submap id of each row

  std::size_t size() const { return ids.size(); }
};

RetrievalIndex build_index(const enc::CoarseModel& model, const std::vector<enc::SubmapInput>& submaps);

struct Ranked {
  int id = 0;
  double score = 0.0;
};

/// Descending cosine similarity; equal scores rank the lower id first.
std::vector<Ranked> retrieve_topk(const ng::Array& query, const RetrievalIndex& index, std::size_t k);

/// 1-based rank of `truth` among all index rows for the query.
std::size_t rank_of(const ng::Array& query, const RetrievalIndex& index, int truth);

/// Fraction of ranks <= k for each k.
std::vector<double> recall_from_ranks(const std::vector<std::size_t>& ranks,
                                      const std::vector<std::size_t>& ks);

/// queries: one row per query; truth: ground-truth submap id per query.
std::vector<double> recall_at_k(const ng::Array& queries, const std::vector<int>& truth,
                                const RetrievalIndex& index, const std::vector<std::size_t>& ks);

inline const std::vector<std::size_t> kRecallKs = {1, 3, 5};

// ---- data ----------------------------------------------------------------------------

struct Example {
  enc::TextInput text;
  int submap_id = 0;
  std::vector<int> hint_instances;  // described instance per hint
  std::vector<int> hint_sentence;   // sentence per hint, -1 when absent
};

Example make_example(const lang::Description& description, const lang::Featurizer& featurizer);

struct Dataset {
  std::vector<world::Submap> layout;         // by submap id
  std::vector<enc::SubmapInput> submaps;     // by submap id
  std::vector<Example> examples;
};

Dataset make_dataset(const world::ReferenceMap& map, const std::vector<lang::Description>& descriptions,
                     const enc::EncoderConfig& config);

/// Batches of distinct submaps from a seeded shuffle; batches smaller than two are dropped.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<int>& submap_of_example,
                                                   std::size_t batch_size, std::uint64_t seed);

// ---- training --------------------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  mhcl::LossConfig loss;
};

struct TrainResult {
  std::vector<double> epoch_loss;
};

TrainResult train_coarse(enc::CoarseModel& model, const Dataset& data, const TrainConfig& config);

/// Text descriptors of the coarse model, one row per description.
ng::Array encode_queries(const enc::CoarseModel& model, const std::vector<const enc::TextInput*>& texts);

// ---- distillation ------------------------------------------------------------------------

/// New text path: a copy of the frozen text encoder plus a low-rank token adapter.
struct TextStudent {
  enc::EncoderConfig config;
  nn::ParamStore params;
  enc::TextEncoder text;
  nn::ParamId adapter_a = 0;
  nn::ParamId adapter_b = 0;

  static TextStudent from_frozen(const enc::CoarseModel& frozen, std::size_t rank, std::uint64_t seed);
  /// Same layout as from_frozen, weights left at their fresh initialization (for loading).
  static TextStudent blank(const enc::EncoderConfig& config, std::size_t rank);
};

ng::Array encode_queries(const TextStudent& student, const std::vector<const enc::TextInput*>& texts);

struct DistillConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  double lr = 1e-3;
  double temperature = 0.07;
  std::uint64_t seed = 0;
};

/// pairs: (simple text, content-equivalent harder text). The frozen model is
/// only read; the student is trained so its embedding of the harder text
/// matches the frozen embedding of the simple one.
TrainResult distill_text(const enc::CoarseModel& frozen, TextStudent& student,
                         const std::vector<std::pair<const enc::TextInput*, const enc::TextInput*>>& pairs,
                         const DistillConfig& config);

}  // namespace cityloc::coarse
