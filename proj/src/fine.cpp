#include "cityloc/fine.hpp"

#include "cityloc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cityloc::fine {

namespace {

constexpr std::size_t kEvalChunk = 64;

double inf_norm(double dx, double dy) { return std::max(std::abs(dx), std::abs(dy)); }

}  // namespace

// ---- submap cloning ------------------------------------------------------------------

void PmcConfig::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !std::isfinite(alpha) || !std::isfinite(beta)) {
    throw FineError("cloning bounds must be finite and non-negative (alpha=" + std::to_string(alpha) +
                    ", beta=" + std::to_string(beta) + ")");
  }
}

std::vector<int> pmc_candidates(const world::TargetPose& target, const world::Submap& source,
                                const std::vector<int>& described, const std::vector<world::Submap>& submaps,
                                const PmcConfig& config) {
  config.validate();
  std::vector<int> out;
  for (const auto& s : submaps) {
    if (!(inf_norm(s.center.x - source.center.x, s.center.y - source.center.y) < config.alpha)) continue;
    if (!(inf_norm(s.center.x - target.x, s.center.y - target.y) < config.beta)) continue;
    std::size_t missing = 0;
    for (int id : described) {
      if (std::find(s.instance_ids.begin(), s.instance_ids.end(), id) == s.instance_ids.end()) ++missing;
    }
    if (missing <= config.max_mismatch) out.push_back(s.id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

int sample_training_submap(const std::vector<int>& candidates, int fallback, std::uint64_t seed) {
  if (candidates.empty()) return fallback;
  Rng rng(seed);
  return candidates[rng.index(candidates.size())];
}

// ---- model -----------------------------------------------------------------------------

CatLayer CatLayer::create(nn::ParamStore& store, const std::string& name, std::size_t width,
                          std::size_t heads, std::size_t hidden, std::uint64_t seed) {
  CatLayer c;
  c.ln_query = nn::LayerNorm::create(store, name + ".ln_query", width);
  c.ln_key = nn::LayerNorm::create(store, name + ".ln_key", width);
  c.att = nn::Attention::create(store, name + ".att", width, heads, seed);
  c.ln_ffn = nn::LayerNorm::create(store, name + ".ln_ffn", width);
  c.ffn = nn::FeedForward::create(store, name + ".ffn", width, hidden, seed);
  return c;
}

ng::DiffArray CatLayer::operator()(nn::Binding& p, const ng::DiffArray& queries, const ng::DiffArray& keys,
                                   const ng::Offsets& q_offsets, const ng::Offsets& kv_offsets) const {
  auto h = ng::add(queries, att(p, ln_query(p, queries), ln_key(p, keys), q_offsets, kv_offsets));
  return ng::add(h, ffn(p, ln_ffn(p, h)));
}

ng::DiffArray ccat_fuse(nn::Binding& p, const std::vector<CcatBlock>& blocks, ng::DiffArray points,
                        const ng::Offsets& point_offsets, ng::DiffArray text, const ng::Offsets& text_offsets) {
  if (points.rows() == 0 || text.rows() == 0) throw FineError("fusion needs points and text features");
  for (const auto& b : blocks) {
    points = b.points_from_text(p, points, text, point_offsets, text_offsets);
    text = b.text_from_points(p, text, points, text_offsets, point_offsets);
  }
  return ng::segment_max(text, text_offsets);
}

FineModel::FineModel(const FineConfig& config, std::uint64_t seed) : config_(config) {
  const auto& e = config.encoder;
  instances_ = enc::InstanceEncoder::create(params_, "instance", e, seed);
  enc::EncoderConfig text_cfg = e;
  text_cfg.intra_blocks = 1;
  text_cfg.inter_blocks = 0;
  text_ = enc::TextEncoder::create(params_, "text", text_cfg, seed);
  for (std::size_t i = 0; i < config.ccat_blocks; ++i) {
    const std::string name = "ccat" + std::to_string(i);
    blocks_.push_back({CatLayer::create(params_, name + ".points", e.width, e.heads, e.ffn_mult * e.width, seed),
                       CatLayer::create(params_, name + ".text", e.width, e.heads, e.ffn_mult * e.width, seed)});
  }
  regressor_ = nn::Mlp::create(params_, "regressor", {e.width, e.width, 2}, seed);
}

ng::DiffArray FineModel::fuse(nn::Binding& p, std::span<const enc::SubmapInput* const> submaps,
                              std::span<const enc::TextInput* const> texts) const {
  if (submaps.size() != texts.size()) throw FineError("one description per submap is required");
  std::vector<const enc::InstanceInput*> all;
  std::vector<std::size_t> sizes;
  for (const auto* s : submaps) {
    if (s->instances.empty()) throw FineError("submap " + std::to_string(s->submap_id) + " is empty");
    for (const auto& in : s->instances) all.push_back(&in);
    sizes.push_back(s->instances.size());
  }
  auto points = instances_(p, all);
  auto text = text_(p, texts);
  return ccat_fuse(p, blocks_, points, nn::offsets_from_sizes(sizes), text.sentences, text.sentence_offsets);
}

ng::DiffArray FineModel::forward(nn::Binding& p, std::span<const enc::SubmapInput* const> submaps,
                                 std::span<const enc::TextInput* const> texts) const {
  return ng::scale(regressor_(p, fuse(p, submaps, texts)), config_.output_scale);
}

world::Vec2 to_scene(world::Vec2 relative, world::Vec2 center) {
  return {center.x + relative.x, center.y + relative.y};
}

ng::DiffArray regression_loss(const ng::DiffArray& target, const ng::DiffArray& predicted) {
  if (target.value().shape() != predicted.value().shape() || target.cols() != 2) {
    throw FineError("regression targets and predictions must both be n x 2");
  }
  auto diff = ng::sub(target, predicted);
  return ng::mean(ng::sqrt(ng::sum(ng::mul(diff, diff), 1)));
}

std::vector<world::Vec2> predict(const FineModel& model, const std::vector<const enc::SubmapInput*>& submaps,
                                 const std::vector<const enc::TextInput*>& texts) {
  if (submaps.size() != texts.size()) throw FineError("one description per submap is required");
  std::vector<world::Vec2> out;
  for (std::size_t begin = 0; begin < submaps.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(submaps.size(), begin + kEvalChunk);
    std::span<const enc::SubmapInput* const> s(submaps.data() + begin, end - begin);
    std::span<const enc::TextInput* const> t(texts.data() + begin, end - begin);
    ng::Tape tape;
    nn::Binding p(tape, model.params(), false);
    const ng::Array rel = model.forward(p, s, t).value();
    for (std::size_t i = 0; i < s.size(); ++i) {
      out.push_back(to_scene({rel.at(i, 0), rel.at(i, 1)}, s[i]->center));
    }
  }
  return out;
}

// ---- training ---------------------------------------------------------------------------

Dataset make_dataset(const world::ReferenceMap& map, const std::vector<lang::Description>& descriptions,
                     const enc::EncoderConfig& config) {
  Dataset d;
  d.layout = map.submaps;
  d.submaps = enc::prepare_submaps(map, config);
  const lang::Featurizer featurizer(config.text_width);
  for (const auto& desc : descriptions) {
    if (desc.submap_id < 0 || static_cast<std::size_t>(desc.submap_id) >= map.submaps.size()) {
      throw FineError("description refers to unknown submap " + std::to_string(desc.submap_id));
    }
    Example e;
    e.text = enc::prepare_text(desc.sentences, featurizer);
    e.submap_id = desc.submap_id;
    e.pose = desc.pose;
    for (const auto& h : desc.hints) e.described.push_back(h.instance_id);
    std::sort(e.described.begin(), e.described.end());
    e.described.erase(std::unique(e.described.begin(), e.described.end()), e.described.end());
    d.examples.push_back(std::move(e));
  }
  return d;
}

TrainResult train_fine(FineModel& model, const Dataset& data, const TrainConfig& config) {
  config.pmc.validate();
  if (data.examples.empty()) throw FineError("empty fine-localization training set");
  if (config.batch_size == 0) throw FineError("batch size must be positive");
  nn::AdamConfig adam_cfg;
  adam_cfg.lr = config.lr;
  nn::Adam opt(model.params(), adam_cfg);

  // Candidate sets do not change between epochs.
  std::vector<std::vector<int>> candidates;
  for (const auto& e : data.examples) {
    candidates.push_back(pmc_candidates(e.pose, data.layout.at(static_cast<std::size_t>(e.submap_id)),
                                        e.described, data.layout, config.pmc));
  }

  TrainResult result;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(data.examples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(mix_seed(config.seed, epoch));
    shuffle.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      ++step;
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<const enc::SubmapInput*> submaps;
      std::vector<const enc::TextInput*> texts;
      ng::Array target({end - begin, 2});
      for (std::size_t b = begin; b < end; ++b) {
        const std::size_t i = order[b];
        const Example& ex = data.examples[i];
        const int sid = sample_training_submap(candidates[i], ex.submap_id,
                                               mix_seed(config.seed ^ 0xc10eULL, step * 4096 + (b - begin)));
        const auto& s = data.submaps.at(static_cast<std::size_t>(sid));
        submaps.push_back(&s);
        texts.push_back(&ex.text);
        target.at(b - begin, 0) = ex.pose.x - s.center.x;
        target.at(b - begin, 1) = ex.pose.y - s.center.y;
      }
      ng::Tape tape;
      nn::Binding p(tape, model.params(), true);
      auto loss = regression_loss(tape.constant(std::move(target)), model.forward(p, submaps, texts));
      total += loss.item();
      ++batches;
      opt.step(model.params(), p.gradients(tape.backward(loss)));
    }
    result.epoch_loss.push_back(total / static_cast<double>(batches));
  }
  return result;
}

GroundTruthErrors ground_truth_errors(const FineModel& model, const Dataset& data,
                                      const std::vector<std::size_t>& examples) {
  std::vector<const enc::SubmapInput*> submaps;
  std::vector<const enc::TextInput*> texts;
  for (std::size_t i : examples) {
    const Example& ex = data.examples.at(i);
    submaps.push_back(&data.submaps.at(static_cast<std::size_t>(ex.submap_id)));
    texts.push_back(&ex.text);
  }
  const auto pred = predict(model, submaps, texts);
  GroundTruthErrors out;
  for (std::size_t j = 0; j < examples.size(); ++j) {
    const Example& ex = data.examples[examples[j]];
    out.model.push_back(std::hypot(pred[j].x - ex.pose.x, pred[j].y - ex.pose.y));
    out.center.push_back(std::hypot(submaps[j]->center.x - ex.pose.x, submaps[j]->center.y - ex.pose.y));
  }
  return out;
}

// ---- evaluation -------------------------------------------------------------------------

RecallTable localization_recall(const std::vector<std::vector<double>>& errors,
                                const std::vector<double>& epsilons, const std::vector<std::size_t>& ks) {
  if (errors.empty()) throw FineError("localization recall over an empty query set");
  RecallTable t{epsilons, ks, {}};
  for (double eps : epsilons) {
    std::vector<double> row;
    for (std::size_t k : ks) {
      std::size_t hits = 0;
      for (std::size_t q = 0; q < errors.size(); ++q) {
        if (k > errors[q].size()) {
          throw FineError("k=" + std::to_string(k) + " exceeds the " + std::to_string(errors[q].size()) +
                          " predictions of query " + std::to_string(q));
        }
        if (std::any_of(errors[q].begin(), errors[q].begin() + static_cast<std::ptrdiff_t>(k),
                        [eps](double e) { return e < eps; })) {
          ++hits;
        }
      }
      row.push_back(static_cast<double>(hits) / static_cast<double>(errors.size()));
    }
    t.recall.push_back(std::move(row));
  }
  return t;
}

}  // namespace cityloc::fine
