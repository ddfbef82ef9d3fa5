#include "cityloc/mhcl.hpp"

#include "cityloc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cityloc::mhcl {

void LossConfig::validate() const {
  if (!(temperature > 0.0)) throw LossError("temperature must be positive");
  for (double a : alpha) {
    if (a < 0.0) throw LossError("loss weights must be non-negative");
  }
  if (hint_pairs < 1) throw LossError("hint_pairs must be at least 1");
}

MaskedSubmap mask_submap(const world::Submap& submap, const std::vector<int>& described,
                         std::uint64_t seed) {
  const auto& ids = submap.instance_ids;
  for (int d : described) {
    if (std::find(ids.begin(), ids.end(), d) == ids.end()) {
      throw LossError("described instance " + std::to_string(d) + " is not in submap " +
                      std::to_string(submap.id));
    }
  }
  auto is_described = [&](int id) {
    return std::find(described.begin(), described.end(), id) != described.end();
  };
  std::vector<int> others;
  for (int id : ids) {
    if (!is_described(id)) others.push_back(id);
  }
  Rng rng(seed);
  const double f = rng.uniform(kMinKeepFraction, kMaxKeepFraction);
  const auto n_keep = static_cast<std::size_t>(std::llround(f * static_cast<double>(others.size())));
  rng.shuffle(others);
  std::vector<int> kept_others(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(n_keep));

  MaskedSubmap m;
  m.submap_id = submap.id;
  m.described = described;
  for (int id : ids) {
    const bool keep = is_described(id) ||
                      std::find(kept_others.begin(), kept_others.end(), id) != kept_others.end();
    (keep ? m.kept : m.masked).push_back(id);
  }
  return m;
}

namespace {

void check_batch(const ng::DiffArray& a, const ng::DiffArray& b, double tau, const char* what) {
  if (!(tau > 0.0)) throw LossError(std::string(what) + ": temperature must be positive");
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.rows() == 0) {
    throw LossError(std::string(what) + ": expected non-empty batch matrices");
  }
  if (a.shape() != b.shape()) {
    throw LossError(std::string(what) + ": batch shapes " + ng::shape_str(a.shape()) + " and " +
                    ng::shape_str(b.shape()) + " differ");
  }
}

ng::Array identity(std::size_t n) {
  ng::Array eye({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye.at(i, i) = 1.0;
  return eye;
}

// Negated diagonal of a square (or leading square block of a) matrix.
ng::DiffArray neg_diagonal(const ng::DiffArray& m, std::size_t n) {
  ng::Tape& t = *m.tape();
  auto sq = m.cols() == n ? m : ng::slice_cols(m, 0, n);
  return ng::neg(ng::sum(ng::mul(sq, t.constant(identity(n))), 1));
}

ng::DiffArray similarities(const ng::DiffArray& a, const ng::DiffArray& b, double tau) {
  return ng::scale(ng::matmul(a, ng::transpose(b)), 1.0 / tau);
}

ng::DiffArray double_half(const ng::DiffArray& s, const ng::DiffArray& s2, double tau) {
  const std::size_t n = s.rows();
  const ng::DiffArray parts[] = {similarities(s, s2, tau), similarities(s2, s2, tau)};
  ng::Array mask({n, 2 * n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) mask.at(i, n + i) = 0.0;
  return neg_diagonal(ng::log_softmax_rows(ng::concat_cols(parts), &mask), n);
}

}  // namespace

ng::DiffArray pair_contrastive_terms(const ng::DiffArray& a, const ng::DiffArray& b, double tau) {
  check_batch(a, b, tau, "pair_contrastive");
  const std::size_t n = a.rows();
  return ng::add(neg_diagonal(ng::log_softmax_rows(similarities(a, b, tau)), n),
                 neg_diagonal(ng::log_softmax_rows(similarities(b, a, tau)), n));
}

ng::DiffArray pair_contrastive(std::size_t i, const ng::DiffArray& a, const ng::DiffArray& b,
                               double tau) {
  auto terms = pair_contrastive_terms(a, b, tau);
  if (i >= a.rows()) throw LossError("pair_contrastive: index out of range");
  return ng::element(terms, 0, i);
}

ng::DiffArray double_contrastive_terms(const ng::DiffArray& s, const ng::DiffArray& s2, double tau) {
  check_batch(s, s2, tau, "double_contrastive");
  return ng::add(double_half(s, s2, tau), double_half(s2, s, tau));
}

ng::DiffArray double_contrastive(std::size_t i, const ng::DiffArray& s, const ng::DiffArray& s2,
                                 double tau) {
  auto terms = double_contrastive_terms(s, s2, tau);
  if (i >= s.rows()) throw LossError("double_contrastive: index out of range");
  return ng::element(terms, 0, i);
}

ng::DiffArray cross_modal_loss(const ng::DiffArray& text, const ng::DiffArray& masked_submaps,
                               double tau) {
  return ng::mean(pair_contrastive_terms(text, masked_submaps, tau));
}

ng::DiffArray instance_loss(const ng::DiffArray& hint_text, const ng::DiffArray& hint_instances,
                            double tau) {
  if (hint_text.rows() != hint_instances.rows()) {
    throw LossError("instance_loss: " + std::to_string(hint_text.rows()) + " hint rows vs " +
                    std::to_string(hint_instances.rows()) + " instance rows");
  }
  return ng::mean(pair_contrastive_terms(hint_text, hint_instances, tau));
}

ng::DiffArray text_loss(const ng::DiffArray& text, double tau) {
  return ng::mean(pair_contrastive_terms(text, text, tau));
}

ng::DiffArray submap_loss(const ng::DiffArray& masked_submaps, const ng::DiffArray& submaps,
                          double tau) {
  return ng::mean(double_contrastive_terms(masked_submaps, submaps, tau));
}

ng::DiffArray combined_loss(const LossParts& parts, const LossConfig& config) {
  config.validate();
  auto total = ng::scale(parts.cross, config.alpha[0]);
  total = ng::add(total, ng::scale(parts.instance, config.alpha[1]));
  total = ng::add(total, ng::scale(parts.submap, config.alpha[2]));
  return ng::add(total, ng::scale(parts.text, config.alpha[3]));
}

}  // namespace cityloc::mhcl
