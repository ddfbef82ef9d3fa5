#include "cityloc/coarse.hpp"

#include "cityloc/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace cityloc;
using namespace cityloc::coarse;
using cityloc::testing::max_abs_diff;
using cityloc::testing::random_unit_rows;

namespace {

enc::EncoderConfig tiny_config() {
  enc::EncoderConfig c;
  c.width = 8;
  c.branch_width = 4;
  c.heads = 2;
  c.text_width = 8;
  c.max_points = 6;
  return c;
}

struct Toy {
  world::ReferenceMap map;
  std::vector<lang::Description> simple, complex;
};

const Toy& toy() {
  static const Toy t = [] {
    Toy out;
    out.map = world::generate_scene(3, {0, 0, 60, 60}, world::SceneConfig::defaults());
    out.map.submaps = world::slice_submaps(out.map);
    world::PairConfig pc;
    pc.poses_per_submap = 2;
    out.map.pairs = world::sample_pose_pairs(out.map, pc, 4);
    for (const auto& p : out.map.pairs) {
      out.simple.push_back(lang::describe(p, lang::Level::kSimple, 5));
      out.complex.push_back(lang::describe(p, lang::Level::kComplex, 5));
    }
    return out;
  }();
  return t;
}

RetrievalIndex random_index(std::uint64_t seed, std::size_t n, std::size_t d) {
  RetrievalIndex idx;
  idx.descriptors = random_unit_rows(seed, n, d);
  for (std::size_t i = 0; i < n; ++i) idx.ids.push_back(static_cast<int>(i) * 3 + 1);
  Rng rng(seed + 1);
  rng.shuffle(idx.ids);
  return idx;
}

ng::Array row(const ng::Array& m, std::size_t r) {
  ng::Array out({m.cols()});
  for (std::size_t c = 0; c < m.cols(); ++c) out[c] = m.at(r, c);
  return out;
}

}  // namespace

TEST_CASE("top-k matches an exhaustive sort") {
  const auto idx = random_index(11, 40, 5);
  const auto queries = random_unit_rows(12, 100, 5);
  for (std::size_t q = 0; q < 100; ++q) {
    const auto query = row(queries, q);
    std::vector<std::pair<double, int>> all;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 5; ++c) s += idx.descriptors.at(r, c) * query[c];
      all.push_back({-s, idx.ids[r]});
    }
    std::sort(all.begin(), all.end());
    const auto top = retrieve_topk(query, idx, 7);
    REQUIRE(top.size() == 7);
    for (std::size_t i = 0; i < 7; ++i) {
      CHECK(top[i].id == all[i].second);
      CHECK(top[i].score == doctest::Approx(-all[i].first).epsilon(1e-12));
    }
    for (std::size_t i = 0; i < all.size(); ++i) {
      CHECK(rank_of(query, idx, all[i].second) == i + 1);
    }
  }
}

TEST_CASE("equal scores rank the lower id first") {
  RetrievalIndex idx;
  idx.descriptors = ng::Array({3, 2}, {1, 0, 1, 0, 0, 1});
  idx.ids = {9, 4, 6};
  const ng::Array q({2}, {1, 0});
  const auto top = retrieve_topk(q, idx, 3);
  CHECK(top[0].id == 4);
  CHECK(top[1].id == 9);
  CHECK(top[2].id == 6);
  CHECK(rank_of(q, idx, 9) == 2);
  CHECK_THROWS_AS(retrieve_topk(q, idx, 0), CoarseError);
  CHECK_THROWS_AS(retrieve_topk(q, idx, 4), CoarseError);
  CHECK_THROWS_AS(rank_of(q, idx, 5), CoarseError);
  CHECK_THROWS_AS(rank_of(ng::Array({3}, 0.0), idx, 9), CoarseError);
}

TEST_CASE("recall@k from ranks") {
  CHECK(recall_from_ranks({1, 3, 7}, {5})[0] == doctest::Approx(2.0 / 3.0));
  CHECK(recall_from_ranks({1, 3, 7}, {1, 3, 7}) == std::vector<double>{1.0 / 3.0, 2.0 / 3.0, 1.0});
  CHECK_THROWS_AS(recall_from_ranks({}, {1}), CoarseError);

  const auto idx = random_index(21, 30, 4);
  const auto queries = random_unit_rows(22, 50, 4);
  std::vector<int> truth;
  Rng rng(23);
  for (std::size_t q = 0; q < 50; ++q) truth.push_back(idx.ids[rng.index(idx.size())]);
  std::vector<std::size_t> ks;
  for (std::size_t k = 1; k <= 30; ++k) ks.push_back(k);
  const auto r = recall_at_k(queries, truth, idx, ks);
  for (std::size_t i = 1; i < r.size(); ++i) CHECK(r[i] >= r[i - 1]);
  CHECK(r.back() == 1.0);

  RetrievalIndex one;
  one.descriptors = random_unit_rows(24, 1, 4);
  one.ids = {42};
  CHECK(recall_at_k(queries, std::vector<int>(50, 42), one, {1})[0] == 1.0);
}

TEST_CASE("batches hold distinct submaps and each example at most once") {
  Rng rng(31);
  std::vector<int> sub;
  for (int i = 0; i < 200; ++i) sub.push_back(static_cast<int>(rng.index(15)));
  const auto batches = make_batches(sub, 8, 7);
  std::set<std::size_t> seen;
  for (const auto& b : batches) {
    CHECK(b.size() >= 2);
    CHECK(b.size() <= 8);
    std::set<int> ids;
    for (std::size_t i : b) {
      CHECK(seen.insert(i).second);
      CHECK(ids.insert(sub[i]).second);
    }
  }
  CHECK(seen.size() >= 190);
  CHECK(make_batches(sub, 8, 7) == batches);
  CHECK(make_batches(sub, 8, 8) != batches);
}

TEST_CASE("coarse training: zero epochs, determinism, loss decreases") {
  const auto cfg = tiny_config();
  const auto data = make_dataset(toy().map, toy().simple, cfg);
  REQUIRE(data.examples.size() >= 16);

  enc::CoarseModel untouched(cfg, 1);
  const auto before = untouched.params().checksum();
  TrainConfig tc;
  tc.batch_size = 8;
  tc.epochs = 0;
  CHECK(train_coarse(untouched, data, tc).epoch_loss.empty());
  CHECK(untouched.params().checksum() == before);

  tc.epochs = 6;
  tc.lr = 3e-3;
  enc::CoarseModel a(cfg, 1), b(cfg, 1);
  const auto ra = train_coarse(a, data, tc);
  const auto rb = train_coarse(b, data, tc);
  CHECK(a.params().checksum() == b.params().checksum());
  CHECK(ra.epoch_loss == rb.epoch_loss);
  for (double l : ra.epoch_loss) CHECK(std::isfinite(l));
  CHECK(ra.epoch_loss.back() < ra.epoch_loss.front());

  tc.batch_size = 1;
  CHECK_THROWS_AS(train_coarse(a, data, tc), CoarseError);
  tc.batch_size = data.examples.size() + 1;
  CHECK_THROWS_AS(train_coarse(a, data, tc), CoarseError);
}

TEST_CASE("index and queries agree with single-item encoders") {
  const auto cfg = tiny_config();
  const auto data = make_dataset(toy().map, toy().simple, cfg);
  enc::CoarseModel model(cfg, 2);
  const auto idx = build_index(model, data.submaps);
  REQUIRE(idx.size() == data.submaps.size());
  for (std::size_t i = 0; i < idx.size(); i += 5) {
    CHECK(idx.ids[i] == data.submaps[i].submap_id);
    CHECK(max_abs_diff(row(idx.descriptors, i), enc::encode_submap(model, data.submaps[i])) < 1e-12);
  }
  std::vector<const enc::TextInput*> texts;
  for (const auto& e : data.examples) texts.push_back(&e.text);
  const auto q = encode_queries(model, texts);
  for (std::size_t i = 0; i < texts.size(); i += 7) {
    CHECK(max_abs_diff(row(q, i), enc::encode_text(model, *texts[i]).descriptor) < 1e-12);
  }
}

TEST_CASE("distillation leaves the frozen model untouched") {
  const auto cfg = tiny_config();
  const lang::Featurizer f(cfg.text_width);
  std::vector<enc::TextInput> simple, hard;
  for (std::size_t i = 0; i < toy().simple.size(); ++i) {
    simple.push_back(enc::prepare_text(toy().simple[i].sentences, f));
    hard.push_back(enc::prepare_text(toy().complex[i].sentences, f));
  }
  std::vector<std::pair<const enc::TextInput*, const enc::TextInput*>> pairs;
  std::vector<const enc::TextInput*> hard_ptrs;
  for (std::size_t i = 0; i < simple.size(); ++i) {
    pairs.push_back({&simple[i], &hard[i]});
    hard_ptrs.push_back(&hard[i]);
  }

  enc::CoarseModel frozen(cfg, 3);
  const auto frozen_sum = frozen.params().checksum();
  auto student = TextStudent::from_frozen(frozen, 2, 9);
  // Adapter B starts at zero, so the student begins as the frozen text path.
  CHECK(max_abs_diff(encode_queries(student, hard_ptrs), encode_queries(frozen, hard_ptrs)) < 1e-12);

  DistillConfig dc;
  dc.batch_size = 8;
  dc.epochs = 0;
  const auto student_sum = student.params.checksum();
  distill_text(frozen, student, pairs, dc);
  CHECK(student.params.checksum() == student_sum);

  dc.epochs = 4;
  dc.lr = 3e-3;
  const auto r = distill_text(frozen, student, pairs, dc);
  CHECK(frozen.params().checksum() == frozen_sum);
  CHECK(student.params.checksum() != student_sum);
  CHECK(r.epoch_loss.back() < r.epoch_loss.front());

  pairs[0].second = nullptr;
  CHECK_THROWS_AS(distill_text(frozen, student, pairs, dc), CoarseError);
}
