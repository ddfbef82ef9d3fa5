#pragma once

// Text side of the pipeline: rendering hints as descriptions at three
// complexity levels, tokenization, the frozen hashed sentence featurizer and
// its low-rank adapter, and the perturbations used for robustness sweeps.

#include "cityloc/numgrad.hpp"
#include "cityloc/worldgen.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cityloc::lang {

enum class Level : int { kSimple = 0, kModerate, kComplex };
std::string_view level_name(Level level);
std::optional<Level> level_from_name(std::string_view name);

struct Description {
  Level level = Level::kSimple;
  std::vector<std::string> sentences;
  std::vector<world::Hint> hints;
  // Sentence that introduces each hint (-1 once that sentence is discarded).
  std::vector<int> hint_sentence;
  world::TargetPose pose;
  int submap_id = -1;
  int pair_id = -1;

  bool operator==(const Description&) const = default;
};

class TextError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kColorOmissionProb = 0.3;
inline constexpr double kClassSynonymProb = 0.3;

/// simple: one "The pose is <relation> of a <color> <class>." per hint.
/// moderate: hints grouped by relation into compound sentences with pronoun
/// references. complex: free-form clauses with fillers, shuffled order,
/// seeded color omission and class synonyms.
Description render_description(const std::vector<world::Hint>& hints, Level level,
                               std::uint64_t seed);
Description describe(const world::PosePair& pair, Level level, std::uint64_t seed);

/// One recovered mention: relation is the pose's relation to the object.
struct Mention {
  world::Relation relation = world::Relation::kOnTop;
  world::SemanticClass label = world::SemanticClass::kRoad;
  std::optional<int> color;
  auto operator<=>(const Mention&) const = default;
};

/// Inverse of render_description for every level: one mention per described object.
std::vector<Mention> parse_description(const std::vector<std::string>& sentences);

std::vector<std::string> tokenize(std::string_view text);

// ---- featurization -------------------------------------------------------------

inline constexpr std::size_t kDefaultTextWidth = 64;

struct SentenceFeature {
  ng::Array vector;  // unit norm, shape {width}
  int sentence_index = 0;
};

/// Frozen stand-in for a pretrained sentence encoder. Each token maps, via
/// FNV-1a-64 and a splitmix64 stream, to a fixed pseudo-Gaussian vector;
/// a sentence is the L2-normalized mean of its token vectors.
class Featurizer {
 public:
  explicit Featurizer(std::size_t width = kDefaultTextWidth) : width_(width) {}

  std::size_t width() const { return width_; }
  ng::Array token_vector(std::string_view token) const;
  /// T x width matrix of token vectors.
  ng::Array token_matrix(const std::vector<std::string>& tokens) const;
  SentenceFeature featurize(const std::vector<std::string>& tokens, int sentence_index = 0) const;

 private:
  std::size_t width_;
};

/// Low-rank residual adapter v -> v + v A B. B starts at zero so the adapted
/// path initially equals the frozen one.
struct AdapterParams {
  ng::Array a;  // width x rank
  ng::Array b;  // rank x width
  std::size_t rank() const { return a.rank() == 2 ? a.cols() : 0; }

  static AdapterParams init(std::size_t width, std::size_t rank, std::uint64_t seed);
};

SentenceFeature adapted_featurize(const Featurizer& featurizer,
                                  const std::vector<std::string>& tokens,
                                  const AdapterParams& adapter, int sentence_index = 0);

/// Differentiable residual adapter applied row-wise: X + X A B.
ng::DiffArray apply_adapter(const ng::DiffArray& x, const ng::DiffArray& a, const ng::DiffArray& b);

// ---- robustness perturbations ----------------------------------------------------

enum class ChangeType : int { kColor = 0, kDirection, kSemanticClass, kDiscard };
inline constexpr std::size_t kNumChangeTypes = 4;
std::string_view change_name(ChangeType c);
std::optional<ChangeType> change_from_name(std::string_view name);

/// Alters n_sentences sentences chosen by a seeded permutation; for a fixed
/// seed the altered set for n is a prefix of the set for n + 1. Hints are kept
/// as the unmodified source.
Description perturb_description(const Description& desc, ChangeType change,
                                std::size_t n_sentences, std::uint64_t seed);

}  // namespace cityloc::lang
