#pragma once

// Masked instance training and the hierarchical contrastive objective:
// text-submap, hint-instance, text-text and submap-vs-masked-submap terms.
// Batch matrices hold one L2-normalized row per item.

#include "cityloc/numgrad.hpp"
#include "cityloc/worldgen.hpp"

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace cityloc::mhcl {

class LossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LossConfig {
  double temperature = 0.07;
  std::array<double, 4> alpha = {1.0, 1.0, 1.0, 1.0};  // cross, instance, submap, text
  std::size_t hint_pairs = 3;  // instance pairs per description

  void validate() const;
};

// ---- masking ---------------------------------------------------------------------

inline constexpr double kMinKeepFraction = 0.5;
inline constexpr double kMaxKeepFraction = 1.0;

struct MaskedSubmap {
  int submap_id = 0;
  std::vector<int> kept;       // in the submap's instance order
  std::vector<int> described;
  std::vector<int> masked;
};

/// Keeps every described instance plus round(f * |others|) of the others,
/// f ~ U[0.5, 1], chosen uniformly.
MaskedSubmap mask_submap(const world::Submap& submap, const std::vector<int>& described,
                         std::uint64_t seed);

// ---- losses ----------------------------------------------------------------------

/// Per-row symmetric InfoNCE: -log softmax(A B^T / tau)[i][i] - log softmax(B A^T / tau)[i][i].
ng::DiffArray pair_contrastive_terms(const ng::DiffArray& a, const ng::DiffArray& b, double tau);
ng::DiffArray pair_contrastive(std::size_t i, const ng::DiffArray& a, const ng::DiffArray& b,
                               double tau);

/// Per-row double contrastive term: the positive S_i.S'_i competes against
/// S_i.S'_j (all j) and S'_i.S'_j (j != i); the second half swaps S and S'.
ng::DiffArray double_contrastive_terms(const ng::DiffArray& s, const ng::DiffArray& s2, double tau);
ng::DiffArray double_contrastive(std::size_t i, const ng::DiffArray& s, const ng::DiffArray& s2,
                                 double tau);

ng::DiffArray cross_modal_loss(const ng::DiffArray& text, const ng::DiffArray& masked_submaps,
                               double tau);
ng::DiffArray instance_loss(const ng::DiffArray& hint_text, const ng::DiffArray& hint_instances,
                            double tau);
ng::DiffArray text_loss(const ng::DiffArray& text, double tau);
ng::DiffArray submap_loss(const ng::DiffArray& masked_submaps, const ng::DiffArray& submaps,
                          double tau);

struct LossParts {
  ng::DiffArray cross;
  ng::DiffArray instance;
  ng::DiffArray submap;
  ng::DiffArray text;
};

ng::DiffArray combined_loss(const LossParts& parts, const LossConfig& config);

}  // namespace cityloc::mhcl
