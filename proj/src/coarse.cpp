#include "cityloc/coarse.hpp"

#include "cityloc/rng.hpp"

#include <algorithm>
#include <numeric>

namespace cityloc::coarse {

namespace {

constexpr std::size_t kEvalChunk = 64;

std::vector<double> scores_of(const ng::Array& query, const RetrievalIndex& index) {
  const std::size_t d = index.descriptors.cols();
  if (query.size() != d) {
    throw CoarseError("query width " + std::to_string(query.size()) + " does not match index width " +
                      std::to_string(d));
  }
  std::vector<double> scores(index.size(), 0.0);
  for (std::size_t r = 0; r < index.size(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += index.descriptors.at(r, c) * query[c];
    scores[r] = s;
  }
  return scores;
}

ng::Array row_of(const ng::Array& m, std::size_t r) {
  const auto begin = m.values().begin() + static_cast<std::ptrdiff_t>(r * m.cols());
  return ng::Array({m.cols()}, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(m.cols())));
}

void append_rows(ng::Array& dst, std::size_t& row, const ng::Array& src) {
  std::copy(src.values().begin(), src.values().end(),
            dst.values().begin() + static_cast<std::ptrdiff_t>(row * dst.cols()));
  row += src.rows();
}

std::size_t position_in(const world::Submap& s, int instance_id) {
  const auto it = std::find(s.instance_ids.begin(), s.instance_ids.end(), instance_id);
  if (it == s.instance_ids.end()) {
    throw CoarseError("instance " + std::to_string(instance_id) + " is not in submap " +
                      std::to_string(s.id));
  }
  return static_cast<std::size_t>(it - s.instance_ids.begin());
}

}  // namespace

// ---- retrieval ---------------------------------------------------------------------

RetrievalIndex build_index(const enc::CoarseModel& model, const std::vector<enc::SubmapInput>& submaps) {
  if (submaps.empty()) throw CoarseError("cannot index an empty submap set");
  RetrievalIndex index;
  index.descriptors = ng::Array({submaps.size(), model.config().width});
  std::size_t row = 0;
  for (std::size_t begin = 0; begin < submaps.size(); begin += kEvalChunk) {
    std::vector<const enc::SubmapInput*> chunk;
    for (std::size_t i = begin; i < std::min(submaps.size(), begin + kEvalChunk); ++i) {
      chunk.push_back(&submaps[i]);
      index.ids.push_back(submaps[i].submap_id);
    }
    ng::Tape tape;
    nn::Binding p(tape, model.params(), false);
    append_rows(index.descriptors, row, model.encode_submaps(p, chunk).value());
  }
  return index;
}

std::vector<Ranked> retrieve_topk(const ng::Array& query, const RetrievalIndex& index, std::size_t k) {
  if (k < 1 || k > index.size()) {
    throw CoarseError("k=" + std::to_string(k) + " outside [1, " + std::to_string(index.size()) + "]");
  }
  const auto scores = scores_of(query, index);
  std::vector<std::size_t> order(index.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return index.ids[a] < index.ids[b];
                    });
  std::vector<Ranked> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back({index.ids[order[i]], scores[order[i]]});
  return out;
}

std::size_t rank_of(const ng::Array& query, const RetrievalIndex& index, int truth) {
  const auto scores = scores_of(query, index);
  const auto it = std::find(index.ids.begin(), index.ids.end(), truth);
  if (it == index.ids.end()) {
    throw CoarseError("ground-truth submap " + std::to_string(truth) + " is not in the index");
  }
  const double st = scores[static_cast<std::size_t>(it - index.ids.begin())];
  std::size_t rank = 1;
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (scores[r] > st || (scores[r] == st && index.ids[r] < truth)) ++rank;
  }
  return rank;
}

std::vector<double> recall_from_ranks(const std::vector<std::size_t>& ranks,
                                      const std::vector<std::size_t>& ks) {
  if (ranks.empty()) throw CoarseError("recall over an empty query set");
  std::vector<double> out;
  for (std::size_t k : ks) {
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
    out.push_back(static_cast<double>(hits) / static_cast<double>(ranks.size()));
  }
  return out;
}

std::vector<double> recall_at_k(const ng::Array& queries, const std::vector<int>& truth,
                                const RetrievalIndex& index, const std::vector<std::size_t>& ks) {
  if (queries.rows() != truth.size()) throw CoarseError("one ground-truth id per query is required");
  std::vector<std::size_t> ranks;
  for (std::size_t q = 0; q < truth.size(); ++q) {
    ranks.push_back(rank_of(row_of(queries, q), index, truth[q]));
  }
  return recall_from_ranks(ranks, ks);
}

// ---- data ------------------------------------------------------------------------------

Example make_example(const lang::Description& description, const lang::Featurizer& featurizer) {
  Example e;
  e.text = enc::prepare_text(description.sentences, featurizer);
  e.submap_id = description.submap_id;
  for (const auto& h : description.hints) e.hint_instances.push_back(h.instance_id);
  e.hint_sentence = description.hint_sentence;
  return e;
}

Dataset make_dataset(const world::ReferenceMap& map, const std::vector<lang::Description>& descriptions,
                     const enc::EncoderConfig& config) {
  Dataset d;
  d.layout = map.submaps;
  d.submaps = enc::prepare_submaps(map, config);
  const lang::Featurizer featurizer(config.text_width);
  for (const auto& desc : descriptions) {
    if (desc.submap_id < 0 || static_cast<std::size_t>(desc.submap_id) >= map.submaps.size()) {
      throw CoarseError("description refers to unknown submap " + std::to_string(desc.submap_id));
    }
    d.examples.push_back(make_example(desc, featurizer));
  }
  return d;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<int>& submap_of_example,
                                                   std::size_t batch_size, std::uint64_t seed) {
  std::vector<std::size_t> order(submap_of_example.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> done, open;
  for (std::size_t idx : order) {
    const int sid = submap_of_example[idx];
    auto fits = [&](const std::vector<std::size_t>& b) {
      return std::none_of(b.begin(), b.end(), [&](std::size_t j) { return submap_of_example[j] == sid; });
    };
    auto it = std::find_if(open.begin(), open.end(), fits);
    if (it == open.end()) {
      open.emplace_back();
      it = open.end() - 1;
    }
    it->push_back(idx);
    if (it->size() == batch_size) {
      done.push_back(std::move(*it));
      open.erase(it);
    }
  }
  for (auto& b : open) {
    if (b.size() >= 2) done.push_back(std::move(b));
  }
  return done;
}

// ---- training ------------------------------------------------------------------------------

TrainResult train_coarse(enc::CoarseModel& model, const Dataset& data, const TrainConfig& config) {
  config.loss.validate();
  if (config.batch_size < 2) throw CoarseError("contrastive batches need at least two examples");
  if (config.batch_size > data.examples.size()) {
    throw CoarseError("batch size " + std::to_string(config.batch_size) + " exceeds the " +
                      std::to_string(data.examples.size()) + " training examples");
  }
  const double tau = config.loss.temperature;
  nn::AdamConfig adam_cfg;
  adam_cfg.lr = config.lr;
  nn::Adam opt(model.params(), adam_cfg);
  std::vector<int> submap_of;
  for (const auto& e : data.examples) submap_of.push_back(e.submap_id);

  TrainResult result;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto batches = make_batches(submap_of, config.batch_size, mix_seed(config.seed, epoch));
    double total = 0.0;
    for (const auto& batch : batches) {
      ++step;
      Rng rng(mix_seed(config.seed ^ 0x5eedULL, step));
      const std::size_t n = batch.size();

      std::vector<const enc::InstanceInput*> instances;
      std::vector<std::size_t> sizes, masked_rows, masked_sizes, hint_text_rows, hint_inst_rows;
      std::vector<const enc::TextInput*> texts;
      std::vector<std::size_t> first_row;
      for (std::size_t b = 0; b < n; ++b) {
        const Example& ex = data.examples[batch[b]];
        const auto& layout = data.layout.at(static_cast<std::size_t>(ex.submap_id));
        const auto& input = data.submaps.at(static_cast<std::size_t>(ex.submap_id));
        first_row.push_back(instances.size());
        for (const auto& in : input.instances) instances.push_back(&in);
        sizes.push_back(input.instances.size());
        texts.push_back(&ex.text);

        std::vector<int> described = ex.hint_instances;
        std::sort(described.begin(), described.end());
        described.erase(std::unique(described.begin(), described.end()), described.end());
        const auto masked = mhcl::mask_submap(layout, described, rng.next_u64());
        for (int id : masked.kept) masked_rows.push_back(first_row[b] + position_in(layout, id));
        masked_sizes.push_back(masked.kept.size());
      }

      ng::Tape tape;
      nn::Binding p(tape, model.params(), true);
      auto emb = model.instance_encoder()(p, instances);
      auto S = model.aggregator()(p, emb, nn::offsets_from_sizes(sizes));
      auto S_masked = model.aggregator()(p, ng::gather_rows(emb, masked_rows),
                                         nn::offsets_from_sizes(masked_sizes));
      auto text = model.text_encoder()(p, texts);

      for (std::size_t b = 0; b < n; ++b) {
        const Example& ex = data.examples[batch[b]];
        const auto& layout = data.layout.at(static_cast<std::size_t>(ex.submap_id));
        std::vector<std::size_t> usable;
        for (std::size_t h = 0; h < ex.hint_instances.size(); ++h) {
          if (ex.hint_sentence[h] >= 0) usable.push_back(h);
        }
        if (usable.empty()) throw CoarseError("description without any hint sentence");
        rng.shuffle(usable);
        for (std::size_t j = 0; j < config.loss.hint_pairs; ++j) {
          const std::size_t h = j < usable.size() ? usable[j] : usable[rng.index(usable.size())];
          hint_text_rows.push_back(text.sentence_offsets[b] + static_cast<std::size_t>(ex.hint_sentence[h]));
          hint_inst_rows.push_back(first_row[b] + position_in(layout, ex.hint_instances[h]));
        }
      }
      auto hint_text = ng::gather_rows(text.sentences, hint_text_rows);
      auto hint_inst = ng::l2_normalize_rows(ng::gather_rows(emb, hint_inst_rows));

      mhcl::LossParts parts{mhcl::cross_modal_loss(text.descriptors, S_masked, tau),
                            mhcl::instance_loss(hint_text, hint_inst, tau),
                            mhcl::submap_loss(S_masked, S, tau), mhcl::text_loss(text.descriptors, tau)};
      auto loss = mhcl::combined_loss(parts, config.loss);
      total += loss.item();
      opt.step(model.params(), p.gradients(tape.backward(loss)));
    }
    result.epoch_loss.push_back(batches.empty() ? 0.0 : total / static_cast<double>(batches.size()));
  }
  return result;
}

ng::Array encode_queries(const enc::CoarseModel& model, const std::vector<const enc::TextInput*>& texts) {
  ng::Array out({texts.size(), model.config().width});
  std::size_t row = 0;
  for (std::size_t begin = 0; begin < texts.size(); begin += kEvalChunk) {
    std::vector<const enc::TextInput*> chunk(
        texts.begin() + static_cast<std::ptrdiff_t>(begin),
        texts.begin() + static_cast<std::ptrdiff_t>(std::min(texts.size(), begin + kEvalChunk)));
    ng::Tape tape;
    nn::Binding p(tape, model.params(), false);
    append_rows(out, row, model.text_encoder()(p, chunk).descriptors.value());
  }
  return out;
}

// ---- distillation ----------------------------------------------------------------------------

TextStudent TextStudent::blank(const enc::EncoderConfig& config, std::size_t rank) {
  TextStudent s;
  s.config = config;
  s.text = enc::TextEncoder::create(s.params, "text", config, 0);
  auto adapter = lang::AdapterParams::init(config.text_width, rank, 0);
  s.adapter_a = s.params.add("adapter.a", std::move(adapter.a));
  s.adapter_b = s.params.add("adapter.b", std::move(adapter.b));
  return s;
}

TextStudent TextStudent::from_frozen(const enc::CoarseModel& frozen, std::size_t rank,
                                     std::uint64_t seed) {
  TextStudent s = blank(frozen.config(), rank);
  for (nn::ParamId i = 0; i < s.params.size(); ++i) {
    if (auto src = frozen.params().find(s.params.name(i))) s.params.value(i) = frozen.params().value(*src);
  }
  auto adapter = lang::AdapterParams::init(frozen.config().text_width, rank, seed);
  s.params.value(s.adapter_a) = std::move(adapter.a);
  s.params.value(s.adapter_b) = std::move(adapter.b);
  return s;
}

namespace {

enc::TextOutput student_forward(const TextStudent& student, nn::Binding& p,
                                std::span<const enc::TextInput* const> texts) {
  std::optional<enc::TokenAdapter> adapter;
  if (student.params.value(student.adapter_a).cols() > 0) {
    adapter = enc::TokenAdapter{p(student.adapter_a), p(student.adapter_b)};
  }
  return student.text(p, texts, adapter);
}

}  // namespace

ng::Array encode_queries(const TextStudent& student, const std::vector<const enc::TextInput*>& texts) {
  ng::Array out({texts.size(), student.config.width});
  std::size_t row = 0;
  for (std::size_t begin = 0; begin < texts.size(); begin += kEvalChunk) {
    std::vector<const enc::TextInput*> chunk(
        texts.begin() + static_cast<std::ptrdiff_t>(begin),
        texts.begin() + static_cast<std::ptrdiff_t>(std::min(texts.size(), begin + kEvalChunk)));
    ng::Tape tape;
    nn::Binding p(tape, student.params, false);
    append_rows(out, row, student_forward(student, p, chunk).descriptors.value());
  }
  return out;
}

TrainResult distill_text(const enc::CoarseModel& frozen, TextStudent& student,
                         const std::vector<std::pair<const enc::TextInput*, const enc::TextInput*>>& pairs,
                         const DistillConfig& config) {
  if (!(config.temperature > 0.0)) throw CoarseError("temperature must be positive");
  if (config.batch_size < 2) throw CoarseError("contrastive batches need at least two pairs");
  for (const auto& [simple, hard] : pairs) {
    if (simple == nullptr || hard == nullptr) throw CoarseError("unpaired description in distillation set");
  }
  if (pairs.size() < config.batch_size) {
    throw CoarseError("batch size " + std::to_string(config.batch_size) + " exceeds the " +
                      std::to_string(pairs.size()) + " distillation pairs");
  }
  std::vector<const enc::TextInput*> simple;
  for (const auto& pr : pairs) simple.push_back(pr.first);
  const ng::Array targets = encode_queries(frozen, simple);
  const std::size_t d = targets.cols();

  nn::AdamConfig adam_cfg;
  adam_cfg.lr = config.lr;
  nn::Adam opt(student.params, adam_cfg);
  TrainResult result;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(config.seed, epoch));
    rng.shuffle(order);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin + config.batch_size <= order.size(); begin += config.batch_size) {
      std::vector<const enc::TextInput*> hard;
      ng::Array target({config.batch_size, d});
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        const std::size_t i = order[begin + b];
        hard.push_back(pairs[i].second);
        std::copy_n(targets.values().begin() + static_cast<std::ptrdiff_t>(i * d), d,
                    target.values().begin() + static_cast<std::ptrdiff_t>(b * d));
      }
      ng::Tape tape;
      nn::Binding p(tape, student.params, true);
      auto out = student_forward(student, p, hard);
      auto loss = mhcl::cross_modal_loss(out.descriptors, tape.constant(std::move(target)),
                                         config.temperature);
      total += loss.item();
      ++steps;
      opt.step(student.params, p.gradients(tape.backward(loss)));
    }
    result.epoch_loss.push_back(steps == 0 ? 0.0 : total / static_cast<double>(steps));
  }
  return result;
}

}  // namespace cityloc::coarse
