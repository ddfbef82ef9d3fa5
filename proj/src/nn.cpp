#include "cityloc/nn.hpp"

#include "cityloc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace cityloc::nn {

ParamId ParamStore::add(std::string name, ng::Array value) {
  if (find(name)) throw std::invalid_argument("parameter '" + name + "' registered twice");
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::optional<ParamId> ParamStore::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < names_.size(); ++i) {
    mix(names_[i].data(), names_[i].size());
    for (std::size_t d : values_[i].shape()) {
      const auto d64 = static_cast<std::uint64_t>(d);
      mix(&d64, sizeof d64);
    }
    mix(values_[i].values().data(), values_[i].size() * sizeof(double));
  }
  return h;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

Binding::Binding(ng::Tape& tape, const ParamStore& store, bool trainable)
    : tape_(&tape), store_(&store), trainable_(trainable), bound_(store.size()) {}

ng::DiffArray Binding::operator()(ParamId id) {
  auto& slot = bound_.at(id);
  if (!slot) {
    slot = trainable_ ? tape_->variable(store_->value(id)) : tape_->constant(store_->value(id));
  }
  return *slot;
}

std::vector<ng::Array> Binding::gradients(const ng::Gradients& grads) const {
  std::vector<ng::Array> out;
  out.reserve(bound_.size());
  for (std::size_t i = 0; i < bound_.size(); ++i) {
    if (bound_[i]) {
      out.push_back(grads.of(*bound_[i]));
    } else {
      out.emplace_back(store_->value(i).shape(), 0.0);
    }
  }
  return out;
}

// ---- layers --------------------------------------------------------------------

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                      std::uint64_t seed) {
  Rng rng(mix_seed(seed, fnv1a64(name)));
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  ng::Array w({in, out});
  for (double& x : w.values()) x = rng.uniform(-limit, limit);
  Linear l;
  l.w = store.add(name + ".w", std::move(w));
  l.b = store.add(name + ".b", ng::Array({out}, 0.0));
  return l;
}

ng::DiffArray Linear::operator()(Binding& p, const ng::DiffArray& x) const {
  return ng::add_rowvec(ng::matmul(x, p(w)), p(b));
}

Mlp Mlp::create(ParamStore& store, const std::string& name, const std::vector<std::size_t>& dims,
                std::uint64_t seed) {
  if (dims.size() < 2) throw std::invalid_argument("Mlp '" + name + "' needs at least two widths");
  Mlp m;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    m.layers.push_back(Linear::create(store, name + "." + std::to_string(i), dims[i], dims[i + 1], seed));
  }
  return m;
}

ng::DiffArray Mlp::operator()(Binding& p, const ng::DiffArray& x) const {
  ng::DiffArray h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](p, h);
    if (i + 1 < layers.size()) h = ng::relu(h);
  }
  return h;
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, std::size_t width) {
  LayerNorm ln;
  ln.gain = store.add(name + ".gain", ng::Array({width}, 1.0));
  ln.bias = store.add(name + ".bias", ng::Array({width}, 0.0));
  return ln;
}

ng::DiffArray LayerNorm::operator()(Binding& p, const ng::DiffArray& x) const {
  return ng::layer_norm_rows(x, p(gain), p(bias));
}

Attention Attention::create(ParamStore& store, const std::string& name, std::size_t width,
                            std::size_t heads, std::uint64_t seed) {
  if (heads == 0 || width % heads != 0) {
    throw std::invalid_argument("attention '" + name + "': width " + std::to_string(width) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  Attention a;
  a.q = Linear::create(store, name + ".q", width, width, seed);
  a.k = Linear::create(store, name + ".k", width, width, seed);
  a.v = Linear::create(store, name + ".v", width, width, seed);
  a.o = Linear::create(store, name + ".o", width, width, seed);
  a.heads = heads;
  return a;
}

ng::DiffArray Attention::operator()(Binding& p, const ng::DiffArray& queries,
                                    const ng::DiffArray& keys, const ng::Offsets& q_offsets,
                                    const ng::Offsets& kv_offsets) const {
  auto att = ng::segment_attention(q(p, queries), k(p, keys), v(p, keys), q_offsets, kv_offsets, heads);
  return o(p, att);
}

FeedForward FeedForward::create(ParamStore& store, const std::string& name, std::size_t width,
                                std::size_t hidden, std::uint64_t seed) {
  return {Linear::create(store, name + ".in", width, hidden, seed),
          Linear::create(store, name + ".out", hidden, width, seed)};
}

ng::DiffArray FeedForward::operator()(Binding& p, const ng::DiffArray& x) const {
  return out(p, ng::relu(in(p, x)));
}

EncoderBlock EncoderBlock::create(ParamStore& store, const std::string& name, std::size_t width,
                                  std::size_t heads, std::size_t ffn_hidden, std::uint64_t seed) {
  EncoderBlock b;
  b.ln_att = LayerNorm::create(store, name + ".ln_att", width);
  b.att = Attention::create(store, name + ".att", width, heads, seed);
  b.ln_ffn = LayerNorm::create(store, name + ".ln_ffn", width);
  b.ffn = FeedForward::create(store, name + ".ffn", width, ffn_hidden, seed);
  return b;
}

ng::DiffArray EncoderBlock::operator()(Binding& p, const ng::DiffArray& x,
                                       const ng::Offsets& offsets) const {
  auto n = ln_att(p, x);
  auto h = ng::add(x, att(p, n, n, offsets, offsets));
  return ng::add(h, ffn(p, ln_ffn(p, h)));
}

ng::Array sinusoidal_positions(std::size_t count, std::size_t width) {
  ng::Array pe({count, width});
  for (std::size_t pos = 0; pos < count; ++pos) {
    for (std::size_t i = 0; i < width; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(width));
      const double a = static_cast<double>(pos) * freq;
      pe.at(pos, i) = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  }
  return pe;
}

ng::Offsets offsets_from_sizes(const std::vector<std::size_t>& sizes) {
  ng::Offsets off(sizes.size() + 1, 0);
  for (std::size_t i = 0; i < sizes.size(); ++i) off[i + 1] = off[i] + sizes[i];
  return off;
}

double grad_check_params(ParamStore& store, const std::function<ng::DiffArray(Binding&)>& f,
                         double h) {
  std::vector<ng::Array> analytic;
  {
    ng::Tape tape;
    Binding p(tape, store, true);
    auto out = f(p);
    analytic = p.gradients(tape.backward(out));
  }
  auto eval = [&] {
    ng::Tape tape;
    Binding p(tape, store, false);
    return f(p).item();
  };
  double worst = 0.0;
  for (ParamId id = 0; id < store.size(); ++id) {
    ng::Array& w = store.value(id);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double fp = eval();
      w[i] = orig - h;
      const double fm = eval();
      w[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic[id][i] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

// ---- Adam ------------------------------------------------------------------------

Adam::Adam(const ParamStore& store, AdamConfig config) : cfg_(config) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_.emplace_back(store.value(i).shape(), 0.0);
    v_.emplace_back(store.value(i).shape(), 0.0);
  }
}

void Adam::step(ParamStore& store, const std::vector<ng::Array>& grads) {
  if (grads.size() != store.size() || m_.size() != store.size()) {
    throw std::invalid_argument("Adam::step: gradient count does not match the parameter store");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < store.size(); ++p) {
    ng::Array& w = store.value(p);
    const ng::Array& g = grads[p];
    if (g.size() != w.size()) {
      throw std::invalid_argument("Adam::step: gradient shape mismatch for '" + store.name(p) + "'");
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g[i];
      v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      w[i] -= cfg_.lr * (m_[p][i] / c1) / (std::sqrt(v_[p][i] / c2) + cfg_.eps);
    }
  }
}

}  // namespace cityloc::nn
