#pragma once

// Named parameter storage, layers built on numgrad, and the Adam optimizer.

#include "cityloc/numgrad.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cityloc::nn {

using ParamId = std::size_t;

/// Ordered, named arrays. Insertion order is the serialization order.
class ParamStore {
 public:
  ParamId add(std::string name, ng::Array value);

  std::size_t size() const { return values_.size(); }
  const std::string& name(ParamId id) const { return names_.at(id); }
  const ng::Array& value(ParamId id) const { return values_.at(id); }
  ng::Array& value(ParamId id) { return values_.at(id); }
  std::optional<ParamId> find(std::string_view name) const;

  /// FNV-1a-64 over names, shapes and raw values.
  std::uint64_t checksum() const;
  std::size_t scalar_count() const;
  bool operator==(const ParamStore&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<ng::Array> values_;
};

/// Parameters of one store attached to a tape, created on first use.
/// Frozen bindings attach constants so no gradient flows into them.
class Binding {
 public:
  Binding(ng::Tape& tape, const ParamStore& store, bool trainable = true);

  ng::DiffArray operator()(ParamId id);
  ng::Tape& tape() const { return *tape_; }

  /// One gradient per parameter; zeros for parameters unused in the pass.
  std::vector<ng::Array> gradients(const ng::Gradients& grads) const;

 private:
  ng::Tape* tape_;
  const ParamStore* store_;
  bool trainable_;
  std::vector<std::optional<ng::DiffArray>> bound_;
};

// ---- layers ------------------------------------------------------------------

struct Linear {
  ParamId w = 0;
  ParamId b = 0;

  /// Glorot-uniform weights from a stream keyed by (seed, name), zero bias.
  static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                       std::uint64_t seed);
  ng::DiffArray operator()(Binding& p, const ng::DiffArray& x) const;
};

/// Linear layers with ReLU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  static Mlp create(ParamStore& store, const std::string& name, const std::vector<std::size_t>& dims,
                    std::uint64_t seed);
  ng::DiffArray operator()(Binding& p, const ng::DiffArray& x) const;
};

struct LayerNorm {
  ParamId gain = 0;
  ParamId bias = 0;

  static LayerNorm create(ParamStore& store, const std::string& name, std::size_t width);
  ng::DiffArray operator()(Binding& p, const ng::DiffArray& x) const;
};

/// Multi-head attention with query/key/value/output projections.
struct Attention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  static Attention create(ParamStore& store, const std::string& name, std::size_t width,
                          std::size_t heads, std::uint64_t seed);
  ng::DiffArray operator()(Binding& p, const ng::DiffArray& queries, const ng::DiffArray& keys,
                           const ng::Offsets& q_offsets, const ng::Offsets& kv_offsets) const;
};

struct FeedForward {
  Linear in, out;

  static FeedForward create(ParamStore& store, const std::string& name, std::size_t width,
                            std::size_t hidden, std::uint64_t seed);
  ng::DiffArray operator()(Binding& p, const ng::DiffArray& x) const;
};

/// Pre-norm residual self-attention block: x + MHSA(LN x), then + FFN(LN x).
struct EncoderBlock {
  LayerNorm ln_att, ln_ffn;
  Attention att;
  FeedForward ffn;

  static EncoderBlock create(ParamStore& store, const std::string& name, std::size_t width,
                             std::size_t heads, std::size_t ffn_hidden, std::uint64_t seed);
  ng::DiffArray operator()(Binding& p, const ng::DiffArray& x, const ng::Offsets& offsets) const;
};

/// count x width sinusoidal position table (sin on even, cos on odd columns).
ng::Array sinusoidal_positions(std::size_t count, std::size_t width);

/// Offsets 0, n0, n0+n1, ... for consecutive segment sizes.
ng::Offsets offsets_from_sizes(const std::vector<std::size_t>& sizes);

/// grad_check over every scalar of a parameter store: the largest
/// |analytic - central difference| / max(1, |central difference|).
double grad_check_params(ParamStore& store, const std::function<ng::DiffArray(Binding&)>& f,
                         double h = 1e-5);

// ---- optimization --------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Per-parameter first/second moments with bias correction.
class Adam {
 public:
  Adam(const ParamStore& store, AdamConfig config);

  void step(ParamStore& store, const std::vector<ng::Array>& grads);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<ng::Array> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace cityloc::nn
