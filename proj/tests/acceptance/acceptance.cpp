// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: cityloc_acceptance [work_dir]

#include "cityloc/checkpoint.hpp"
#include "cityloc/pipeline.hpp"
#include "cityloc/rng.hpp"

#include "../unit/test_util.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>

using namespace cityloc;
using cityloc::testing::jitter;
using cityloc::testing::max_abs_diff;
using cityloc::testing::random_array;
using cityloc::testing::random_unit_rows;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run(const std::string& name, const std::function<Outcome()>& check) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s  %-28s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string num(double x, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
std::vector<const T*> ptrs(const std::vector<T>& v) {
  std::vector<const T*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

// ---- shared toy world -----------------------------------------------------------------

struct Toy {
  world::ReferenceMap map;
  std::vector<lang::Description> simple;
};

const Toy& toy() {
  static const Toy t = [] {
    Toy t;
    t.map = world::generate_scene(1, {0, 0, 120, 220}, world::SceneConfig::defaults());
    t.map.submaps = world::slice_submaps(t.map);
    world::PairConfig pc;
    t.map.pairs = world::sample_pose_pairs(t.map, pc, 2);
    for (const auto& p : t.map.pairs) t.simple.push_back(lang::describe(p, lang::Level::kSimple, 3));
    return t;
  }();
  return t;
}

enc::EncoderConfig grad_encoder() {
  enc::EncoderConfig c;
  c.width = 8;
  c.branch_width = 4;
  c.heads = 2;
  c.text_width = 8;
  c.max_points = 4;
  return c;
}

// ---- gradient suite --------------------------------------------------------------------

Outcome gradient_suite() {
  using ng::DiffArray;
  using ng::Tape;
  const double tau = 0.1;
  double worst = 0.0;
  std::string worst_name;
  auto note = [&](const std::string& name, double err) {
    if (err > worst || worst_name.empty()) {
      worst = std::max(worst, err);
      worst_name = name;
    }
  };
  auto unit = [](const DiffArray& x) { return ng::l2_normalize_rows(x); };

  const auto cfg = grad_encoder();
  const lang::Featurizer featurizer(cfg.text_width);
  const auto& t = toy();

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::vector<ng::Array> two = {random_array(seed * 3 + 1, {4, 8}), random_array(seed * 3 + 2, {4, 8})};
    const std::vector<ng::Array> one = {two[0]};
    const std::size_t i = seed % 4;
    auto check2 = [&](const std::string& name, std::function<DiffArray(const DiffArray&, const DiffArray&)> f) {
      note(name, ng::grad_check([&](Tape&, std::span<const DiffArray> x) { return f(unit(x[0]), unit(x[1])); }, two));
    };
    check2("pair term", [&](auto a, auto b) { return mhcl::pair_contrastive(i, a, b, tau); });
    check2("cross-modal", [&](auto a, auto b) { return mhcl::cross_modal_loss(a, b, tau); });
    check2("instance", [&](auto a, auto b) { return mhcl::instance_loss(a, b, tau); });
    check2("double term", [&](auto a, auto b) { return mhcl::double_contrastive(i, a, b, tau); });
    check2("submap", [&](auto a, auto b) { return mhcl::submap_loss(a, b, tau); });
    note("text", ng::grad_check([&](Tape&, std::span<const DiffArray> x) { return mhcl::text_loss(unit(x[0]), tau); },
                                one));
    const std::vector<ng::Array> three = {two[0], two[1], random_array(seed * 3 + 3, {4, 8})};
    note("combined", ng::grad_check(
                         [&](Tape&, std::span<const DiffArray> x) {
                           auto T = unit(x[0]), S = unit(x[1]), M = unit(x[2]);
                           mhcl::LossConfig lc;
                           lc.temperature = tau;
                           lc.alpha = {1.0, 0.5, 0.7, 0.3};
                           return mhcl::combined_loss({mhcl::cross_modal_loss(T, M, tau), mhcl::instance_loss(T, S, tau),
                                                       mhcl::submap_loss(M, S, tau), mhcl::text_loss(T, tau)},
                                                      lc);
                         },
                         three));
    const ng::Array target = random_array(seed + 500, {4, 2}, 5.0);
    note("regression", ng::grad_check([&](Tape& tp, const DiffArray& x) { return fine::regression_loss(tp.constant(target), x); },
                                      random_array(seed + 600, {4, 2}, 5.0)));

    // Encoder paths over their parameters, contracted with a fixed probe.
    enc::CoarseModel model(cfg, seed);
    jitter(model.params(), seed + 5);
    std::vector<enc::SubmapInput> subs;
    std::vector<enc::TextInput> texts;
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& d = t.simple[(seed * 4 + k) * 7 % t.simple.size()];
      auto s = enc::prepare_submap(t.map, t.map.submaps.at(static_cast<std::size_t>(d.submap_id)), cfg);
      s.instances.resize(std::min<std::size_t>(s.instances.size(), 2 + k % 2));
      subs.push_back(std::move(s));
      texts.push_back(enc::prepare_text({d.sentences[0], d.sentences[1]}, featurizer));
    }
    const auto sp = ptrs(subs);
    const auto tp = ptrs(texts);
    std::vector<const enc::InstanceInput*> ip;
    for (const auto& s : subs) ip.push_back(&s.instances[0]);
    const ng::Array probe = random_array(seed + 99, {4, 8});
    auto contract = [&](nn::Binding& p, const DiffArray& x) {
      return ng::sum(ng::mul(x, p.tape().constant(probe)));
    };
    note("instance encoder", nn::grad_check_params(model.params(), [&](nn::Binding& p) {
           return contract(p, model.instance_encoder()(p, ip));
         }));
    note("submap encoder", nn::grad_check_params(model.params(), [&](nn::Binding& p) {
           return contract(p, model.encode_submaps(p, sp));
         }));
    note("text encoder", nn::grad_check_params(model.params(), [&](nn::Binding& p) {
           auto out = model.text_encoder()(p, tp);
           const ng::Array sprobe = random_array(seed + 98, out.sentences.value().shape());
           return ng::add(contract(p, out.descriptors), ng::sum(ng::mul(out.sentences, p.tape().constant(sprobe))));
         }));
    auto student = coarse::TextStudent::from_frozen(model, 2, seed);
    jitter(student.params, seed + 6);
    note("adapted text encoder", nn::grad_check_params(student.params, [&](nn::Binding& p) {
           const enc::TokenAdapter adapter{p(student.adapter_a), p(student.adapter_b)};
           return contract(p, student.text(p, tp, adapter).descriptors);
         }));

    fine::FineConfig fc;
    fc.encoder = cfg;
    fine::FineModel fm(fc, seed);
    jitter(fm.params(), seed + 7);
    const std::vector<const enc::SubmapInput*> fs2 = {sp[0], sp[1]};
    const std::vector<const enc::TextInput*> ft2 = {tp[0], tp[1]};
    const ng::Array ftarget = random_array(seed + 700, {2, 2}, 5.0);
    note("fine regressor", nn::grad_check_params(fm.params(), [&](nn::Binding& p) {
           return fine::regression_loss(p.tape().constant(ftarget), fm.forward(p, fs2, ft2));
         }));
  }
  return {worst < 1e-4, "max relative error " + num(worst) + " (" + worst_name + ") over 20 seeds, 13 paths"};
}

// ---- loss oracles ----------------------------------------------------------------------

double dot(const ng::Array& a, std::size_t i, const ng::Array& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) s += a.at(i, c) * b.at(j, c);
  return s;
}

double oracle_pair(std::size_t i, const ng::Array& t, const ng::Array& s, double tau) {
  double z1 = 0.0, z2 = 0.0;
  for (std::size_t j = 0; j < t.rows(); ++j) {
    z1 += std::exp(dot(t, i, s, j) / tau);
    z2 += std::exp(dot(s, i, t, j) / tau);
  }
  const double pos = std::exp(dot(t, i, s, i) / tau);
  return -std::log(pos / z1) - std::log(pos / z2);
}

double oracle_double(std::size_t i, const ng::Array& s, const ng::Array& s2, double tau) {
  double d1 = 0.0, d2 = 0.0;
  for (std::size_t j = 0; j < s.rows(); ++j) {
    d1 += std::exp(dot(s, i, s2, j) / tau);
    d2 += std::exp(dot(s2, i, s, j) / tau);
    if (j != i) {
      d1 += std::exp(dot(s2, i, s2, j) / tau);
      d2 += std::exp(dot(s, i, s, j) / tau);
    }
  }
  const double pos = std::exp(dot(s, i, s2, i) / tau);
  return -std::log(pos / d1) - std::log(pos / d2);
}

template <typename F>
double oracle_mean(F f, const ng::Array& a, const ng::Array& b, double tau) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) acc += f(i, a, b, tau);
  return acc / static_cast<double>(a.rows());
}

Outcome loss_oracles() {
  double worst = 0.0;
  bool zero_ok = true;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t n = 2 + seed % 15;
    const std::size_t d = 4 + seed % 13;
    const double tau = 0.05 + 0.01 * static_cast<double>(seed % 10);
    const auto a = random_unit_rows(seed * 2 + 1, n, d);
    const auto b = random_unit_rows(seed * 2 + 2, n, d);
    ng::Tape t;
    const auto A = t.constant(a), B = t.constant(b);
    const std::size_t i = seed % n;
    const double pair = oracle_mean(oracle_pair, a, b, tau);
    worst = std::max({worst, std::abs(mhcl::pair_contrastive(i, A, B, tau).item() - oracle_pair(i, a, b, tau)),
                      std::abs(mhcl::cross_modal_loss(A, B, tau).item() - pair),
                      std::abs(mhcl::instance_loss(A, B, tau).item() - pair),
                      std::abs(mhcl::double_contrastive(i, A, B, tau).item() - oracle_double(i, a, b, tau)),
                      std::abs(mhcl::submap_loss(A, B, tau).item() - oracle_mean(oracle_double, a, b, tau)),
                      std::abs(mhcl::text_loss(A, tau).item() - oracle_mean(oracle_pair, a, a, tau))});

    const auto a1 = t.constant(random_unit_rows(seed + 1000, 1, d));
    const auto b1 = t.constant(random_unit_rows(seed + 2000, 1, d));
    zero_ok = zero_ok && mhcl::pair_contrastive(0, a1, b1, tau).item() == 0.0 &&
              mhcl::cross_modal_loss(a1, b1, tau).item() == 0.0 && mhcl::instance_loss(a1, b1, tau).item() == 0.0 &&
              mhcl::double_contrastive(0, a1, b1, tau).item() == 0.0 &&
              mhcl::submap_loss(a1, b1, tau).item() == 0.0 && mhcl::text_loss(a1, tau).item() == 0.0;
  }
  return {worst < 1e-9 && zero_ok,
          "max |impl - oracle| " + num(worst) + " on 100 batches; N=1 exactly zero: " + (zero_ok ? "yes" : "no")};
}

// ---- masking ---------------------------------------------------------------------------

Outcome masking_invariant() {
  const auto& t = toy();
  bool retained = true, subset = true;
  double frac = 0.0;
  std::size_t counted = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto& d = t.simple[seed % t.simple.size()];
    const auto& sub = t.map.submaps.at(static_cast<std::size_t>(d.submap_id));
    std::vector<int> described;
    for (const auto& h : d.hints) described.push_back(h.instance_id);
    std::sort(described.begin(), described.end());
    described.erase(std::unique(described.begin(), described.end()), described.end());
    const auto m = mhcl::mask_submap(sub, described, seed);
    for (int id : described) retained = retained && std::count(m.kept.begin(), m.kept.end(), id) == 1;
    for (int id : m.kept) {
      subset = subset && std::count(sub.instance_ids.begin(), sub.instance_ids.end(), id) == 1;
    }
    const std::size_t others = sub.instance_ids.size() - described.size();
    if (others > 0) {
      frac += static_cast<double>(m.kept.size() - described.size()) / static_cast<double>(others);
      ++counted;
    }
  }
  const double mean = frac / static_cast<double>(counted);
  return {retained && subset && mean >= 0.72 && mean <= 0.78,
          "described retained: " + std::string(retained ? "yes" : "no") + ", subsets: " + (subset ? "yes" : "no") +
              ", mean keep fraction " + num(mean, 4) + " over " + std::to_string(counted) + " maskings"};
}

// ---- structural invariances --------------------------------------------------------------

Outcome structural_invariances() {
  const auto& t = toy();
  const auto cfg = cli::RunConfig{}.coarse_encoder();
  enc::CoarseModel model(cfg, 4);
  jitter(model.params(), 8, 0.05);
  const lang::Featurizer featurizer(cfg.text_width);
  Rng rng(17);

  // Instance order and point order.
  world::ReferenceMap shuffled_points = t.map;
  for (auto& inst : shuffled_points.instances) rng.shuffle(inst.points);
  double submap_drift = 0.0;
  for (std::size_t k = 0; k < 20; ++k) {
    const auto& sub = t.map.submaps[rng.index(t.map.submaps.size())];
    const auto base = enc::encode_submap(model, enc::prepare_submap(t.map, sub, cfg));
    auto reordered = enc::prepare_submap(shuffled_points, sub, cfg);
    rng.shuffle(reordered.instances);
    submap_drift = std::max(submap_drift, max_abs_diff(base, enc::encode_submap(model, reordered)));
  }

  // Sentence order, then token reversal within one sentence.
  double text_drift = 0.0;
  int sensitive = 0;
  for (std::size_t k = 0; k < 20; ++k) {
    const auto& d = t.simple[rng.index(t.simple.size())];
    auto sentences = d.sentences;
    const auto base = enc::encode_text(model, enc::prepare_text(sentences, featurizer)).descriptor;
    rng.shuffle(sentences);
    text_drift = std::max(text_drift,
                          max_abs_diff(base, enc::encode_text(model, enc::prepare_text(sentences, featurizer)).descriptor));

    const std::string& s = d.sentences[rng.index(d.sentences.size())];
    auto tokens = lang::tokenize(s);
    std::reverse(tokens.begin(), tokens.end());
    std::string reversed;
    for (const auto& tok : tokens) reversed += tok + " ";
    const auto fwd = enc::encode_text(model, enc::prepare_text({s}, featurizer)).descriptor;
    const auto rev = enc::encode_text(model, enc::prepare_text({reversed}, featurizer)).descriptor;
    if (max_abs_diff(fwd, rev) > 1e-9) ++sensitive;
  }
  return {submap_drift <= 1e-9 && text_drift <= 1e-6 && sensitive >= 19,
          "submap drift " + num(submap_drift) + ", sentence-order drift " + num(text_drift) +
              ", token reversal changes " + std::to_string(sensitive) + "/20"};
}

// ---- retrieval -------------------------------------------------------------------------

Outcome retrieval_correctness() {
  coarse::RetrievalIndex idx;
  idx.descriptors = random_unit_rows(31, 60, 8);
  for (int i = 0; i < 60; ++i) idx.ids.push_back(100 + (i * 37) % 60);
  const auto queries = random_unit_rows(32, 100, 8);
  std::size_t mismatches = 0;
  std::vector<int> truth;
  Rng rng(33);
  for (std::size_t q = 0; q < 100; ++q) {
    ng::Array query({8});
    for (std::size_t c = 0; c < 8; ++c) query[c] = queries.at(q, c);
    std::vector<std::pair<double, int>> all;
    for (std::size_t r = 0; r < idx.size(); ++r) all.push_back({-dot(idx.descriptors, r, queries, q), idx.ids[r]});
    std::sort(all.begin(), all.end());
    const auto top = coarse::retrieve_topk(query, idx, idx.size());
    for (std::size_t i = 0; i < all.size(); ++i) mismatches += top[i].id != all[i].second;
    truth.push_back(idx.ids[rng.index(idx.size())]);
  }
  std::vector<std::size_t> ks(idx.size());
  std::iota(ks.begin(), ks.end(), 1);
  const auto r = coarse::recall_at_k(queries, truth, idx, ks);
  const bool monotone = std::is_sorted(r.begin(), r.end());
  return {mismatches == 0 && monotone && r.back() == 1.0,
          std::to_string(mismatches) + " ordering mismatches on 100 queries; recall@k monotone: " +
              (monotone ? "yes" : "no") + "; recall@|db| = " + num(r.back())};
}

// ---- PMC ---------------------------------------------------------------------------------

Outcome pmc_correctness() {
  Rng rng(41);
  std::size_t agree = 0;
  bool empty_case = false;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<world::Submap> grid;
    for (int j = 0; j < 5; ++j) {
      for (int i = 0; i < 5; ++i) {
        world::Submap s;
        s.id = static_cast<int>(grid.size());
        s.center = {15.0 + 10.0 * i, 15.0 + 10.0 * j};
        s.cell_size = 30.0;
        for (int id = 0; id < 6; ++id) {
          if (rng.bernoulli(0.8)) s.instance_ids.push_back(id);
        }
        grid.push_back(s);
      }
    }
    fine::PmcConfig cfg;
    if (trial == 0) {
      cfg.alpha = cfg.beta = 0.0;
    } else {
      cfg.alpha = rng.uniform(0.0, 30.0);
      cfg.beta = rng.uniform(0.0, 30.0);
    }
    cfg.max_mismatch = rng.index(3);
    const auto& src = grid[rng.index(grid.size())];
    const world::TargetPose c{src.center.x + rng.uniform(-5, 5), src.center.y + rng.uniform(-5, 5)};
    std::vector<int> described;
    for (int id = 0; id < 6; ++id) {
      if (rng.bernoulli(0.5)) described.push_back(id);
    }
    std::vector<int> expected;
    for (const auto& s : grid) {
      const double dc = std::max(std::fabs(s.center.x - src.center.x), std::fabs(s.center.y - src.center.y));
      const double dt = std::max(std::fabs(s.center.x - c.x), std::fabs(s.center.y - c.y));
      std::size_t miss = 0;
      for (int id : described) miss += std::count(s.instance_ids.begin(), s.instance_ids.end(), id) == 0;
      if (dc < cfg.alpha && dt < cfg.beta && miss <= cfg.max_mismatch) expected.push_back(s.id);
    }
    const auto got = fine::pmc_candidates(c, src, described, grid, cfg);
    agree += got == expected;
    if (trial == 0) empty_case = got.empty();
  }
  return {agree == 20 && empty_case,
          std::to_string(agree) + "/20 settings equal the exhaustive scan; alpha=beta=0 empty: " +
              (empty_case ? "yes" : "no")};
}

// ---- pipeline-driven criteria ------------------------------------------------------------

struct Pipeline {
  fs::path root;
  fs::path data;
  cli::RunConfig config;
  std::uint64_t seed = 1;
  std::map<lang::Level, cli::TrainSummary> coarse;
  std::map<lang::Level, double> coarse_seconds;
  std::map<lang::Level, nlohmann::json> retrieval;
};

cli::TrainSummary train(const Pipeline& pl, cli::Stage stage, lang::Level level, const fs::path& out,
                        std::optional<fs::path> frozen = std::nullopt, std::optional<std::size_t> epochs = {}) {
  cli::TrainOptions o;
  o.stage = stage;
  o.data = pl.data;
  o.out = out;
  o.level = level;
  o.frozen = std::move(frozen);
  o.epochs = epochs;
  o.seed = pl.seed;
  o.config = pl.config;
  return cli::cmd_train(o);
}

nlohmann::json evaluate(const Pipeline& pl, cli::EvalMode mode, const fs::path& out, const fs::path& coarse,
                        std::vector<lang::Level> levels, std::optional<fs::path> student = {},
                        std::optional<fs::path> fine = {}) {
  cli::EvalOptions o;
  o.mode = mode;
  o.data = pl.data;
  o.out = out;
  o.coarse = coarse;
  o.student = std::move(student);
  o.fine = std::move(fine);
  o.levels = std::move(levels);
  o.seed = pl.seed;
  o.config = pl.config;
  return cli::cmd_eval(o)["results"];
}

Outcome toy_coarse(Pipeline& pl) {
  for (auto level : cli::kAllLevels) {
    const std::string name(lang::level_name(level));
    const auto t0 = std::chrono::steady_clock::now();
    pl.coarse[level] = train(pl, cli::Stage::kCoarse, level, pl.root / ("coarse_" + name));
    pl.coarse_seconds[level] = seconds_since(t0);
    pl.retrieval[level] =
        evaluate(pl, cli::EvalMode::kRetrieval, pl.root / ("retrieval_" + name), pl.coarse[level].checkpoint,
                 {level})[name];
  }
  const auto map = io::load_scene(pl.data);
  const double random = 1.0 / static_cast<double>(map.submaps.size());
  const double s = pl.retrieval[lang::Level::kSimple]["1"];
  const double m = pl.retrieval[lang::Level::kModerate]["1"];
  const double c = pl.retrieval[lang::Level::kComplex]["1"];
  const double secs = pl.coarse_seconds[lang::Level::kSimple];
  const bool ok = s >= 0.5 && s >= 10.0 * random && s > m && m > c && secs <= 600.0;
  return {ok, std::to_string(map.submaps.size()) + " submaps, " + std::to_string(map.pairs.size()) +
                  " descriptions, " + std::to_string(pl.config.epochs) + " epochs; training top-1 simple " + num(s) +
                  " (" + num(s / random) + "x random) > moderate " + num(m) + " > complex " + num(c) +
                  "; simple training " + num(secs) + " s"};
}

Outcome distillation(Pipeline& pl) {
  const auto& frozen = pl.coarse.at(lang::Level::kSimple).checkpoint;
  const std::string before_bytes = io::read_text(frozen);
  const auto before_sum = cli::load_coarse(frozen).params().checksum();
  const auto pre = evaluate(pl, cli::EvalMode::kRetrieval, pl.root / "distill_pre", frozen, {lang::Level::kComplex});
  const auto student = train(pl, cli::Stage::kDistill, lang::Level::kComplex, pl.root / "distill", frozen);
  const auto post = evaluate(pl, cli::EvalMode::kRetrieval, pl.root / "distill_post", frozen,
                             {lang::Level::kComplex}, student.checkpoint);
  const bool unchanged =
      io::read_text(frozen) == before_bytes && cli::load_coarse(frozen).params().checksum() == before_sum;
  const double a = pre["complex"]["1"], b = post["complex"]["1"];
  return {b > a && unchanged, "complex-text top-1 " + num(a) + " -> " + num(b) +
                                  " after distillation; frozen checksum unchanged: " + (unchanged ? "yes" : "no")};
}

bool monotone_table(const nlohmann::json& recall) {
  const std::vector<std::string> eps = {"5", "10", "15"}, ks = {"1", "5", "10"};
  for (std::size_t e = 0; e < eps.size(); ++e) {
    for (std::size_t k = 0; k < ks.size(); ++k) {
      const double v = recall[eps[e]][ks[k]];
      if (e > 0 && v < recall[eps[e - 1]][ks[k]].get<double>()) return false;
      if (k > 0 && v < recall[eps[e]][ks[k - 1]].get<double>()) return false;
    }
  }
  return true;
}

Outcome toy_fine(Pipeline& pl) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto fine = train(pl, cli::Stage::kFine, lang::Level::kSimple, pl.root / "fine");
  const double secs = seconds_since(t0);
  const auto r = evaluate(pl, cli::EvalMode::kLocalization, pl.root / "localization",
                          pl.coarse.at(lang::Level::kSimple).checkpoint, {lang::Level::kSimple}, {},
                          fine.checkpoint)["simple"];
  const double err = r["ground_truth_submap_mean_error"], center = r["center_baseline_mean_error"];
  const bool mono = monotone_table(r["recall"]);
  return {err < 15.0 && err < center && mono && secs <= 600.0,
          "held-out mean error on the true submap " + num(err) + " m vs predict-center " + num(center) +
              " m; recall monotone in epsilon and k: " + (mono ? "yes" : "no") + "; training " + num(secs) + " s"};
}

Outcome robustness(Pipeline& pl) {
  const auto r = evaluate(pl, cli::EvalMode::kRobustness, pl.root / "robustness",
                          pl.coarse.at(lang::Level::kSimple).checkpoint, {lang::Level::kSimple})["simple"];
  bool ok = true;
  std::string detail;
  for (std::size_t c = 0; c < lang::kNumChangeTypes; ++c) {
    const std::string name(lang::change_name(static_cast<lang::ChangeType>(c)));
    for (const std::string k : {"1", "3", "5"}) {
      std::vector<double> series = {r["baseline"][k].get<double>()};
      for (std::size_t n = 1; n <= cli::kMaxModified; ++n) series.push_back(r[name][std::to_string(n)][k]);
      std::size_t rises = 0;
      for (std::size_t n = 1; n < series.size(); ++n) rises += series[n] > series[n - 1];
      ok = ok && rises <= 1;
      if (k == "1") {
        detail += (detail.empty() ? "" : "; ") + name + " " + num(series.front()) + "->" + num(series.back());
        if (rises > 0) detail += " (" + std::to_string(rises) + " rise)";
      } else if (rises > 1) {
        detail += "; " + name + "@" + k + " rises " + std::to_string(rises);
      }
    }
  }
  return {ok, "top-1 n=0->5: " + detail};
}

// Reruns every stage (shortened) and compares all written files byte for byte.
Outcome determinism(Pipeline& pl) {
  auto run_all = [&](const fs::path& dir) {
    cli::GenOptions g;
    g.out = dir / "data";
    g.seed = pl.seed;
    g.config = pl.config;
    cli::cmd_gen(g);
    Pipeline p = pl;
    p.data = g.out;
    const auto c = train(p, cli::Stage::kCoarse, lang::Level::kSimple, dir / "ck", {}, 2);
    const auto s = train(p, cli::Stage::kDistill, lang::Level::kComplex, dir / "ck", c.checkpoint, 2);
    const auto f = train(p, cli::Stage::kFine, lang::Level::kSimple, dir / "ck", {}, 1);
    evaluate(p, cli::EvalMode::kRetrieval, dir / "m", c.checkpoint, {}, s.checkpoint);
    evaluate(p, cli::EvalMode::kRobustness, dir / "m", c.checkpoint, {lang::Level::kSimple});
    evaluate(p, cli::EvalMode::kLocalization, dir / "m", c.checkpoint, {lang::Level::kSimple}, {}, f.checkpoint);
    cli::cmd_report(dir / "m");
  };
  const fs::path a = pl.root / "rerun_a", b = pl.root / "rerun_b";
  fs::remove_all(a);
  fs::remove_all(b);
  run_all(a);
  run_all(b);
  std::size_t files = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || io::read_text(e.path()) != io::read_text(other)) ++differ;
  }
  // The full-length run's data directory must match a fresh generation too.
  for (const auto& e : fs::directory_iterator(a / "data")) {
    ++files;
    if (io::read_text(e.path()) != io::read_text(pl.data / e.path().filename())) ++differ;
  }
  return {differ == 0 && files > 20,
          std::to_string(files) + " files compared across reruns (scene, checkpoints, losses, metrics), " +
              std::to_string(differ) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  Pipeline pl;
  pl.root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "cityloc_acceptance";
  fs::remove_all(pl.root);
  pl.data = pl.root / "data";
  std::printf("cityloc %s acceptance, work dir %s\n", cli::version().c_str(), pl.root.string().c_str());

  run("gradient suite", gradient_suite);
  run("loss oracles", loss_oracles);
  run("masking invariant", masking_invariant);
  run("structural invariances", structural_invariances);
  run("retrieval correctness", retrieval_correctness);

  bool have_data = false;
  try {
    cli::GenOptions g;
    g.out = pl.data;
    g.seed = pl.seed;
    g.config = pl.config;
    cli::cmd_gen(g);
    have_data = true;
  } catch (const std::exception& e) {
    std::printf("scene generation failed: %s\n", e.what());
  }
  auto needs_data = [&](const std::function<Outcome()>& f) {
    return [&, f] { return have_data ? f() : Outcome{false, "no generated data"}; };
  };
  run("toy coarse training", needs_data([&] { return toy_coarse(pl); }));
  auto needs_coarse = [&](const std::function<Outcome()>& f) {
    return [&, f] {
      return pl.coarse.count(lang::Level::kSimple) ? f() : Outcome{false, "no coarse checkpoint"};
    };
  };
  run("distillation", needs_coarse([&] { return distillation(pl); }));
  run("cloning candidates", pmc_correctness);
  run("toy fine training", needs_coarse([&] { return toy_fine(pl); }));
  run("robustness sweep", needs_coarse([&] { return robustness(pl); }));
  run("determinism", needs_data([&] { return determinism(pl); }));

  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
