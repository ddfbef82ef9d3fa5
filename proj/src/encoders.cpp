#include "cityloc/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace cityloc::enc {

namespace {

constexpr std::size_t kPointFeatures = 6;

// Stacks row-major blocks that share a column count.
ng::Array stack_rows(const std::vector<const ng::Array*>& parts, std::size_t cols) {
  std::size_t rows = 0;
  for (const auto* a : parts) rows += a->rows();
  ng::Array out({rows, cols});
  auto it = out.values().begin();
  for (const auto* a : parts) it = std::copy(a->values().begin(), a->values().end(), it);
  return out;
}

}  // namespace

InstanceInput prepare_instance(const world::ObjectInstance& instance, world::Vec2 frame_center,
                               const EncoderConfig& config) {
  if (instance.points.empty()) {
    throw EncoderError("instance " + std::to_string(instance.id) + " has no points");
  }
  if (config.max_points == 0) throw EncoderError("max_points must be positive");
  std::vector<world::Vec3> pts = instance.points;
  std::sort(pts.begin(), pts.end(), [](const world::Vec3& a, const world::Vec3& b) {
    return std::tie(a.x, a.y, a.z) < std::tie(b.x, b.y, b.z);
  });
  const std::size_t n = pts.size();
  const std::size_t keep = std::min(n, config.max_points);
  const auto& c = instance.centroid;
  const std::array<double, 3> rgb = config.use_color ? instance.rgb : std::array<double, 3>{};

  InstanceInput in;
  in.instance_id = instance.id;
  in.points = ng::Array({keep, kPointFeatures});
  for (std::size_t i = 0; i < keep; ++i) {
    const auto& p = pts[i * n / keep];
    in.points.at(i, 0) = (p.x - c.x) / config.point_scale;
    in.points.at(i, 1) = (p.y - c.y) / config.point_scale;
    in.points.at(i, 2) = (p.z - c.z) / config.point_scale;
    for (std::size_t k = 0; k < 3; ++k) in.points.at(i, 3 + k) = rgb[k];
  }
  in.color = rgb;
  in.position = {(c.x - frame_center.x) / config.position_scale,
                 (c.y - frame_center.y) / config.position_scale, c.z / config.position_scale};
  in.log_count = std::log1p(static_cast<double>(n));
  return in;
}

SubmapInput prepare_submap(const world::ReferenceMap& map, const world::Submap& submap,
                           const EncoderConfig& config) {
  SubmapInput s;
  s.submap_id = submap.id;
  s.center = submap.center;
  for (int id : submap.instance_ids) {
    s.instances.push_back(prepare_instance(map.instance(id), submap.center, config));
  }
  return s;
}

std::vector<SubmapInput> prepare_submaps(const world::ReferenceMap& map, const EncoderConfig& config) {
  std::vector<SubmapInput> out;
  out.reserve(map.submaps.size());
  for (const auto& s : map.submaps) out.push_back(prepare_submap(map, s, config));
  return out;
}

TextInput prepare_text(const std::vector<std::string>& sentences,
                       const lang::Featurizer& featurizer) {
  if (sentences.empty()) throw EncoderError("description has no sentences");
  TextInput t;
  std::vector<std::string> all;
  for (const auto& s : sentences) {
    auto tokens = lang::tokenize(s);
    if (tokens.empty()) throw EncoderError("sentence without tokens: \"" + s + "\"");
    t.sentence_lengths.push_back(tokens.size());
    all.insert(all.end(), tokens.begin(), tokens.end());
  }
  t.tokens = featurizer.token_matrix(all);
  return t;
}

// ---- modules ------------------------------------------------------------------------

InstanceEncoder InstanceEncoder::create(nn::ParamStore& store, const std::string& name,
                                        const EncoderConfig& config, std::uint64_t seed) {
  const std::size_t h = config.branch_width;
  const std::size_t d = config.width;
  InstanceEncoder e;
  e.use_number = config.use_number;
  e.point = nn::Mlp::create(store, name + ".point", {kPointFeatures, h, h, h}, seed);
  e.color = nn::Mlp::create(store, name + ".color", {3, h, h, h}, seed);
  e.position = nn::Mlp::create(store, name + ".position", {3, h, h, h}, seed);
  if (e.use_number) e.number = nn::Mlp::create(store, name + ".number", {1, h, h, h}, seed);
  const std::size_t branches = e.use_number ? 4 : 3;
  e.projection = nn::Mlp::create(store, name + ".projection", {branches * h, d, d, d}, seed);
  return e;
}

ng::DiffArray InstanceEncoder::operator()(nn::Binding& p,
                                          std::span<const InstanceInput* const> instances) const {
  if (instances.empty()) throw EncoderError("no instances to encode");
  ng::Tape& tape = p.tape();
  const std::size_t n = instances.size();
  std::vector<const ng::Array*> clouds;
  std::vector<std::size_t> sizes;
  ng::Array colors({n, 3}), positions({n, 3}), counts({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const auto* in = instances[i];
    if (in->points.rows() == 0 || in->points.size() == 0) {
      throw EncoderError("instance " + std::to_string(in->instance_id) + " has no points");
    }
    clouds.push_back(&in->points);
    sizes.push_back(in->points.rows());
    for (std::size_t k = 0; k < 3; ++k) {
      colors.at(i, k) = in->color[k];
      positions.at(i, k) = in->position[k];
    }
    counts.at(i, 0) = in->log_count;
  }
  auto pts = tape.constant(stack_rows(clouds, kPointFeatures));
  std::vector<ng::DiffArray> parts = {
      ng::segment_max(point(p, pts), nn::offsets_from_sizes(sizes)),
      color(p, tape.constant(std::move(colors))),
      position(p, tape.constant(std::move(positions))),
  };
  if (use_number) parts.push_back(number(p, tape.constant(std::move(counts))));
  return projection(p, ng::concat_cols(parts));
}

SubmapAggregator SubmapAggregator::create(nn::ParamStore& store, const std::string& name,
                                          const EncoderConfig& config, std::uint64_t seed) {
  return {nn::Attention::create(store, name + ".attention", config.width, config.heads, seed)};
}

ng::DiffArray SubmapAggregator::operator()(nn::Binding& p, const ng::DiffArray& embeddings,
                                           const ng::Offsets& offsets) const {
  auto h = ng::add(embeddings, attention(p, embeddings, embeddings, offsets, offsets));
  return ng::l2_normalize_rows(ng::segment_max(h, offsets));
}

TextEncoder TextEncoder::create(nn::ParamStore& store, const std::string& name,
                                const EncoderConfig& config, std::uint64_t seed) {
  TextEncoder t;
  t.width = config.width;
  t.token_proj = nn::Linear::create(store, name + ".token_proj", config.text_width, config.width, seed);
  for (std::size_t i = 0; i < config.intra_blocks; ++i) {
    t.intra.push_back(nn::EncoderBlock::create(store, name + ".intra" + std::to_string(i), config.width,
                                               config.heads, config.ffn_mult * config.width, seed));
  }
  for (std::size_t i = 0; i < config.inter_blocks; ++i) {
    t.inter.push_back(nn::EncoderBlock::create(store, name + ".inter" + std::to_string(i), config.width,
                                               config.heads, config.ffn_mult * config.width, seed));
  }
  return t;
}

TextOutput TextEncoder::operator()(nn::Binding& p, std::span<const TextInput* const> texts,
                                   const std::optional<TokenAdapter>& adapter) const {
  if (texts.empty()) throw EncoderError("no descriptions to encode");
  ng::Tape& tape = p.tape();
  std::vector<const ng::Array*> blocks;
  std::vector<std::size_t> sentence_lengths;
  std::vector<std::size_t> sentence_counts;
  std::size_t longest = 0;
  for (const auto* t : texts) {
    if (t->sentence_lengths.empty()) throw EncoderError("description has no sentences");
    blocks.push_back(&t->tokens);
    sentence_lengths.insert(sentence_lengths.end(), t->sentence_lengths.begin(),
                            t->sentence_lengths.end());
    sentence_counts.push_back(t->sentence_lengths.size());
    for (std::size_t len : t->sentence_lengths) longest = std::max(longest, len);
  }
  const std::size_t tw = texts[0]->tokens.cols();
  ng::DiffArray x = tape.constant(stack_rows(blocks, tw));
  if (adapter) x = lang::apply_adapter(x, adapter->a, adapter->b);

  // Positions restart at every sentence.
  const ng::Array table = nn::sinusoidal_positions(longest, width);
  ng::Array pos({x.rows(), width});
  std::size_t row = 0;
  for (std::size_t len : sentence_lengths) {
    for (std::size_t k = 0; k < len; ++k, ++row) {
      std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(k * width), width,
                  pos.values().begin() + static_cast<std::ptrdiff_t>(row * width));
    }
  }
  ng::DiffArray h = ng::add(token_proj(p, x), tape.constant(std::move(pos)));
  const ng::Offsets token_offsets = nn::offsets_from_sizes(sentence_lengths);
  for (const auto& block : intra) h = block(p, h, token_offsets);
  ng::DiffArray s = ng::segment_max(h, token_offsets);
  const ng::Offsets sentence_offsets = nn::offsets_from_sizes(sentence_counts);
  for (const auto& block : inter) s = block(p, s, sentence_offsets);
  return {ng::l2_normalize_rows(ng::segment_max(s, sentence_offsets)), ng::l2_normalize_rows(s),
          sentence_offsets};
}

CoarseModel::CoarseModel(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  instances_ = InstanceEncoder::create(params_, "instance", config, seed);
  aggregator_ = SubmapAggregator::create(params_, "submap", config, seed);
  text_ = TextEncoder::create(params_, "text", config, seed);
}

ng::DiffArray CoarseModel::encode_submaps(nn::Binding& p,
                                          std::span<const SubmapInput* const> submaps) const {
  std::vector<const InstanceInput*> all;
  std::vector<std::size_t> sizes;
  for (const auto* s : submaps) {
    if (s->instances.empty()) throw EncoderError("submap " + std::to_string(s->submap_id) + " is empty");
    for (const auto& in : s->instances) all.push_back(&in);
    sizes.push_back(s->instances.size());
  }
  return aggregator_(p, instances_(p, all), nn::offsets_from_sizes(sizes));
}

// ---- single-item evaluation -----------------------------------------------------------

ng::Array encode_instance(const CoarseModel& model, const InstanceInput& instance) {
  ng::Tape tape;
  nn::Binding p(tape, model.params(), false);
  const InstanceInput* one[] = {&instance};
  return ng::Array({model.config().width}, model.instance_encoder()(p, one).value().values());
}

ng::Array aggregate_submap(const CoarseModel& model, const ng::Array& embeddings) {
  if (embeddings.rows() == 0 || embeddings.size() == 0) throw EncoderError("no instance embeddings");
  ng::Tape tape;
  nn::Binding p(tape, model.params(), false);
  auto out = model.aggregator()(p, tape.constant(embeddings), {0, embeddings.rows()});
  return ng::Array({model.config().width}, out.value().values());
}

ng::Array encode_submap(const CoarseModel& model, const SubmapInput& submap) {
  ng::Tape tape;
  nn::Binding p(tape, model.params(), false);
  const SubmapInput* one[] = {&submap};
  return ng::Array({model.config().width}, model.encode_submaps(p, one).value().values());
}

TextEmbedding encode_text(const CoarseModel& model, const TextInput& text) {
  ng::Tape tape;
  nn::Binding p(tape, model.params(), false);
  const TextInput* one[] = {&text};
  auto out = model.text_encoder()(p, one);
  return {ng::Array({model.config().width}, out.descriptors.value().values()), out.sentences.value()};
}

}  // namespace cityloc::enc
