#include "cityloc/pipeline.hpp"

#include "cityloc/checkpoint.hpp"
#include "cityloc/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <variant>

#ifndef CITYLOC_VERSION
#define CITYLOC_VERSION "unknown"
#endif

namespace cityloc::cli {

using nlohmann::json;

namespace {

constexpr std::uint64_t kPairStream = 0x9a125;
constexpr std::uint64_t kFinePairStream = 0xf1e;

template <typename Config>
auto fields(Config& c) {
  using S = std::conditional_t<std::is_const_v<Config>, const std::size_t*, std::size_t*>;
  using D = std::conditional_t<std::is_const_v<Config>, const double*, double*>;
  using F = std::variant<S, D>;
  return std::vector<std::pair<const char*, F>>{
      {"extent_width", &c.extent_width},
      {"extent_height", &c.extent_height},
      {"poses_per_submap", &c.poses_per_submap},
      {"fine_poses_per_submap", &c.fine_poses_per_submap},
      {"width", &c.width},
      {"branch_width", &c.branch_width},
      {"heads", &c.heads},
      {"ffn_mult", &c.ffn_mult},
      {"text_width", &c.text_width},
      {"intra_blocks", &c.intra_blocks},
      {"inter_blocks", &c.inter_blocks},
      {"max_points", &c.max_points},
      {"batch_size", &c.batch_size},
      {"epochs", &c.epochs},
      {"lr", &c.lr},
      {"temperature", &c.temperature},
      {"alpha_cross", &c.alpha_cross},
      {"alpha_instance", &c.alpha_instance},
      {"alpha_submap", &c.alpha_submap},
      {"alpha_text", &c.alpha_text},
      {"hint_pairs", &c.hint_pairs},
      {"adapter_rank", &c.adapter_rank},
      {"distill_batch_size", &c.distill_batch_size},
      {"distill_epochs", &c.distill_epochs},
      {"distill_lr", &c.distill_lr},
      {"fine_max_points", &c.fine_max_points},
      {"ccat_blocks", &c.ccat_blocks},
      {"fine_batch_size", &c.fine_batch_size},
      {"fine_epochs", &c.fine_epochs},
      {"fine_lr", &c.fine_lr},
      {"pmc_alpha", &c.pmc_alpha},
      {"pmc_beta", &c.pmc_beta},
      {"pmc_max_mismatch", &c.pmc_max_mismatch},
  };
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto r = std::from_chars(text.data(), text.data() + text.size(), value);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size()) {
    throw PipelineError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return value;
}

std::string fmt(double x) { return io::format_double(x); }

std::vector<const enc::TextInput*> pointers(const std::vector<enc::TextInput>& texts) {
  std::vector<const enc::TextInput*> out;
  for (const auto& t : texts) out.push_back(&t);
  return out;
}

std::vector<enc::TextInput> prepare_texts(const std::vector<lang::Description>& ds, std::size_t text_width) {
  const lang::Featurizer f(text_width);
  std::vector<enc::TextInput> out;
  for (const auto& d : ds) out.push_back(enc::prepare_text(d.sentences, f));
  return out;
}

std::vector<lang::Description> load_level(const fs::path& data, lang::Level level) {
  const auto path = io::descriptions_path(data, level);
  if (!fs::exists(path)) throw PipelineError("descriptions file '" + path.string() + "' not found");
  return io::load_descriptions(path);
}

std::vector<lang::Level> levels_present(const fs::path& data, const std::vector<lang::Level>& requested) {
  if (!requested.empty()) return requested;
  std::vector<lang::Level> out;
  for (auto l : kAllLevels) {
    if (fs::exists(io::descriptions_path(data, l))) out.push_back(l);
  }
  if (out.empty()) throw PipelineError("no descriptions_<level>.jsonl files in '" + data.string() + "'");
  return out;
}

void save_loss_csv(const fs::path& path, const std::vector<double>& losses) {
  std::vector<io::CsvRow> rows;
  for (std::size_t e = 0; e < losses.size(); ++e) rows.push_back({std::to_string(e + 1), fmt(losses[e])});
  io::save_csv(path, {"epoch", "loss"}, rows);
}

Checkpoint read_checkpoint(const fs::path& path, Stage expected) {
  if (!fs::exists(path)) {
    throw PipelineError(std::string(stage_name(expected)) + " checkpoint '" + path.string() + "' not found");
  }
  Checkpoint ckpt = load_checkpoint(path);
  if (!ckpt.meta.contains("stage") || ckpt.meta["stage"] != stage_name(expected)) {
    throw PipelineError("'" + path.string() + "' is not a " + std::string(stage_name(expected)) + " checkpoint");
  }
  return ckpt;
}

json base_meta(Stage stage, const RunConfig& config, std::uint64_t seed, lang::Level level) {
  return {{"stage", stage_name(stage)},
          {"version", version()},
          {"seed", seed},
          {"level", lang::level_name(level)},
          {"config", config.to_json()}};
}

json recall_json(const std::vector<std::size_t>& ks, const std::vector<double>& r) {
  json out = json::object();
  for (std::size_t i = 0; i < ks.size(); ++i) out[std::to_string(ks[i])] = r[i];
  return out;
}

// Text descriptors from the coarse model or, when given, the distilled path.
struct QueryEncoder {
  const enc::CoarseModel* coarse = nullptr;
  const coarse::TextStudent* student = nullptr;

  ng::Array operator()(const std::vector<const enc::TextInput*>& texts) const {
    return student ? coarse::encode_queries(*student, texts) : coarse::encode_queries(*coarse, texts);
  }
  std::size_t text_width() const { return student ? student->config.text_width : coarse->config().text_width; }
};

std::vector<int> truth_of(const std::vector<lang::Description>& ds) {
  std::vector<int> out;
  for (const auto& d : ds) out.push_back(d.submap_id);
  return out;
}

}  // namespace

std::string version() { return CITYLOC_VERSION; }

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::kCoarse: return "coarse";
    case Stage::kDistill: return "distill";
    case Stage::kFine: return "fine";
  }
  return "?";
}

std::optional<Stage> stage_from_name(std::string_view name) {
  for (auto s : {Stage::kCoarse, Stage::kDistill, Stage::kFine}) {
    if (stage_name(s) == name) return s;
  }
  return std::nullopt;
}

std::string_view mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::kRetrieval: return "retrieval";
    case EvalMode::kLocalization: return "localization";
    case EvalMode::kRobustness: return "robustness";
  }
  return "?";
}

std::optional<EvalMode> mode_from_name(std::string_view name) {
  for (auto m : {EvalMode::kRetrieval, EvalMode::kLocalization, EvalMode::kRobustness}) {
    if (mode_name(m) == name) return m;
  }
  return std::nullopt;
}

// ---- config -----------------------------------------------------------------------------

void RunConfig::apply(const std::map<std::string, std::string>& overrides) {
  auto table = fields(*this);
  for (const auto& [key, text] : overrides) {
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return key == f.first; });
    if (it == table.end()) throw PipelineError("unknown config key '" + key + "'");
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          *p = parse_number<T>(key, text);
        },
        it->second);
  }
}

json RunConfig::to_json() const {
  json out = json::object();
  for (const auto& [key, field] : fields(*this)) {
    std::visit([&, k = key](const auto* p) { out[k] = *p; }, field);
  }
  return out;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  for (auto& [key, field] : fields(c)) {
    if (!j.contains(key)) throw PipelineError(std::string("stored config lacks '") + key + "'");
    std::visit(
        [&, k = key](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          *p = j.at(k).get<T>();
        },
        field);
  }
  return c;
}

enc::EncoderConfig RunConfig::coarse_encoder() const {
  enc::EncoderConfig e;
  e.width = width;
  e.branch_width = branch_width;
  e.heads = heads;
  e.ffn_mult = ffn_mult;
  e.text_width = text_width;
  e.intra_blocks = intra_blocks;
  e.inter_blocks = inter_blocks;
  e.max_points = max_points;
  return e;
}

fine::FineConfig RunConfig::fine_model() const {
  fine::FineConfig f;
  f.encoder = coarse_encoder();
  f.encoder.max_points = fine_max_points;
  f.ccat_blocks = ccat_blocks;
  return f;
}

RunConfig load_run_config(const std::optional<fs::path>& path) {
  RunConfig c;
  if (path) c.apply(io::load_config(*path));
  return c;
}

// ---- gen --------------------------------------------------------------------------------

fs::path fine_train_path(const fs::path& dir, lang::Level level) {
  return dir / ("fine_train_" + std::string(lang::level_name(level)) + ".jsonl");
}

GenSummary cmd_gen(const GenOptions& o) {
  const auto& c = o.config;
  if (!(c.extent_width > 0.0) || !(c.extent_height > 0.0)) throw PipelineError("extent must be positive");
  world::ReferenceMap map =
      world::generate_scene(o.seed, {0.0, 0.0, c.extent_width, c.extent_height}, world::SceneConfig::defaults());
  map.submaps = world::slice_submaps(map);
  if (map.submaps.empty()) {
    throw PipelineError("extent " + fmt(c.extent_width) + " x " + fmt(c.extent_height) +
                        " is smaller than one submap cell");
  }
  world::PairConfig pc;
  pc.poses_per_submap = c.poses_per_submap;
  map.pairs = world::sample_pose_pairs(map, pc, mix_seed(o.seed, kPairStream));
  io::save_scene(o.out, map);

  GenSummary s{map.instances.size(), map.submaps.size(), map.pairs.size(), 0};
  std::vector<world::PosePair> fine_pairs;
  if (c.fine_poses_per_submap > 0) {
    world::PairConfig fc;
    fc.poses_per_submap = c.fine_poses_per_submap;
    fine_pairs = world::sample_pose_pairs(map, fc, mix_seed(o.seed, kFinePairStream));
    s.fine_pairs = fine_pairs.size();
  }
  for (auto level : o.levels) {
    std::vector<lang::Description> ds;
    for (const auto& p : map.pairs) ds.push_back(lang::describe(p, level, o.seed));
    io::save_descriptions(io::descriptions_path(o.out, level), ds);
    if (!fine_pairs.empty()) {
      std::vector<lang::Description> fs_;
      for (const auto& p : fine_pairs) fs_.push_back(lang::describe(p, level, mix_seed(o.seed, kFinePairStream)));
      io::save_descriptions(fine_train_path(o.out, level), fs_);
    }
  }
  return s;
}

// ---- train ------------------------------------------------------------------------------

fs::path checkpoint_path(const fs::path& dir, Stage stage) {
  return dir / (std::string(stage_name(stage)) + ".ckpt");
}

enc::CoarseModel load_coarse(const fs::path& path) {
  const Checkpoint ckpt = read_checkpoint(path, Stage::kCoarse);
  const RunConfig cfg = RunConfig::from_json(ckpt.meta.at("config"));
  enc::CoarseModel model(cfg.coarse_encoder(), 0);
  import_store(ckpt, model.params(), "model");
  return model;
}

coarse::TextStudent load_student(const fs::path& path) {
  const Checkpoint ckpt = read_checkpoint(path, Stage::kDistill);
  const RunConfig cfg = RunConfig::from_json(ckpt.meta.at("config"));
  auto student = coarse::TextStudent::blank(cfg.coarse_encoder(), cfg.adapter_rank);
  import_store(ckpt, student.params, "student");
  return student;
}

fine::FineModel load_fine(const fs::path& path) {
  const Checkpoint ckpt = read_checkpoint(path, Stage::kFine);
  const RunConfig cfg = RunConfig::from_json(ckpt.meta.at("config"));
  fine::FineModel model(cfg.fine_model(), 0);
  import_store(ckpt, model.params(), "fine");
  return model;
}

TrainSummary cmd_train(const TrainOptions& o) {
  RunConfig cfg = o.config;
  Checkpoint ckpt;
  TrainSummary out;
  switch (o.stage) {
    case Stage::kCoarse: {
      if (o.epochs) cfg.epochs = *o.epochs;
      const auto map = io::load_scene(o.data);
      const auto data = coarse::make_dataset(map, load_level(o.data, o.level), cfg.coarse_encoder());
      enc::CoarseModel model(cfg.coarse_encoder(), o.seed);
      coarse::TrainConfig tc;
      tc.batch_size = cfg.batch_size;
      tc.epochs = cfg.epochs;
      tc.lr = cfg.lr;
      tc.seed = o.seed;
      tc.loss.temperature = cfg.temperature;
      tc.loss.alpha = {cfg.alpha_cross, cfg.alpha_instance, cfg.alpha_submap, cfg.alpha_text};
      tc.loss.hint_pairs = cfg.hint_pairs;
      out.epoch_loss = coarse::train_coarse(model, data, tc).epoch_loss;
      ckpt.meta = base_meta(o.stage, cfg, o.seed, o.level);
      export_store(ckpt, model.params(), "model");
      break;
    }
    case Stage::kDistill: {
      if (!o.frozen) throw PipelineError("distillation needs a frozen coarse checkpoint (--frozen)");
      const Checkpoint frozen_ckpt = read_checkpoint(*o.frozen, Stage::kCoarse);
      const enc::CoarseModel frozen = load_coarse(*o.frozen);
      // Architecture follows the frozen model; training knobs follow this run.
      RunConfig arch = RunConfig::from_json(frozen_ckpt.meta.at("config"));
      arch.adapter_rank = cfg.adapter_rank;
      arch.distill_batch_size = cfg.distill_batch_size;
      arch.distill_epochs = o.epochs.value_or(cfg.distill_epochs);
      arch.distill_lr = cfg.distill_lr;
      arch.temperature = cfg.temperature;
      cfg = arch;

      const auto simple = load_level(o.data, lang::Level::kSimple);
      const auto hard = load_level(o.data, o.level);
      std::map<int, std::size_t> by_pair;
      for (std::size_t i = 0; i < simple.size(); ++i) by_pair[simple[i].pair_id] = i;
      std::vector<lang::Description> a, b;
      for (const auto& d : hard) {
        auto it = by_pair.find(d.pair_id);
        if (it == by_pair.end()) throw PipelineError("pair " + std::to_string(d.pair_id) + " has no simple description");
        a.push_back(simple[it->second]);
        b.push_back(d);
      }
      const auto ta = prepare_texts(a, frozen.config().text_width);
      const auto tb = prepare_texts(b, frozen.config().text_width);
      std::vector<std::pair<const enc::TextInput*, const enc::TextInput*>> pairs;
      for (std::size_t i = 0; i < ta.size(); ++i) pairs.push_back({&ta[i], &tb[i]});

      auto student = coarse::TextStudent::from_frozen(frozen, cfg.adapter_rank, o.seed);
      coarse::DistillConfig dc;
      dc.batch_size = cfg.distill_batch_size;
      dc.epochs = cfg.distill_epochs;
      dc.lr = cfg.distill_lr;
      dc.temperature = cfg.temperature;
      dc.seed = o.seed;
      out.epoch_loss = coarse::distill_text(frozen, student, pairs, dc).epoch_loss;
      ckpt.meta = base_meta(o.stage, cfg, o.seed, o.level);
      ckpt.meta["frozen_digest"] = checkpoint_digest(frozen_ckpt);
      export_store(ckpt, student.params, "student");
      break;
    }
    case Stage::kFine: {
      if (o.epochs) cfg.fine_epochs = *o.epochs;
      const auto map = io::load_scene(o.data);
      const auto path = fine_train_path(o.data, o.level);
      if (!fs::exists(path)) throw PipelineError("fine training descriptions '" + path.string() + "' not found");
      const auto fc = cfg.fine_model();
      const auto data = fine::make_dataset(map, io::load_descriptions(path), fc.encoder);
      fine::FineModel model(fc, o.seed);
      fine::TrainConfig tc;
      tc.batch_size = cfg.fine_batch_size;
      tc.epochs = cfg.fine_epochs;
      tc.lr = cfg.fine_lr;
      tc.seed = o.seed;
      tc.pmc = {cfg.pmc_alpha, cfg.pmc_beta, cfg.pmc_max_mismatch};
      out.epoch_loss = fine::train_fine(model, data, tc).epoch_loss;
      ckpt.meta = base_meta(o.stage, cfg, o.seed, o.level);
      export_store(ckpt, model.params(), "fine");
      break;
    }
  }
  out.checkpoint = checkpoint_path(o.out, o.stage);
  out.loss_csv = o.out / (std::string(stage_name(o.stage)) + "_loss.csv");
  fs::create_directories(o.out);
  save_checkpoint(out.checkpoint, ckpt);
  save_loss_csv(out.loss_csv, out.epoch_loss);
  out.digest = checkpoint_digest(ckpt);
  return out;
}

// ---- eval -------------------------------------------------------------------------------

namespace {

json summary_head(const EvalOptions& o, const fs::path& coarse_path) {
  json j = {{"mode", mode_name(o.mode)},
            {"version", version()},
            {"seed", o.seed},
            {"config", o.config.to_json()},
            {"coarse_digest", checkpoint_digest(load_checkpoint(coarse_path))}};
  const Checkpoint c = load_checkpoint(coarse_path);
  j["coarse_config"] = c.meta.at("config");
  if (o.student) j["student_digest"] = checkpoint_digest(load_checkpoint(*o.student));
  if (o.fine) j["fine_digest"] = checkpoint_digest(load_checkpoint(*o.fine));
  return j;
}

}  // namespace

json cmd_eval(const EvalOptions& o) {
  const enc::CoarseModel model = load_coarse(o.coarse);
  std::optional<coarse::TextStudent> student;
  if (o.student) {
    student = load_student(*o.student);
    if (student->config.width != model.config().width || student->config.text_width != model.config().text_width) {
      throw PipelineError("embedding width mismatch: coarse model has width " + std::to_string(model.config().width) +
                          ", distilled text path has width " + std::to_string(student->config.width));
    }
  }
  const QueryEncoder queries{&model, student ? &*student : nullptr};
  const auto map = io::load_scene(o.data);
  const auto submaps = enc::prepare_submaps(map, model.config());
  const auto index = coarse::build_index(model, submaps);
  const auto levels = levels_present(o.data, o.levels);

  json summary = summary_head(o, o.coarse);
  summary["index_size"] = index.size();
  json results = json::object();
  std::vector<io::CsvRow> rows;
  io::CsvRow header;
  const std::string name(mode_name(o.mode));

  switch (o.mode) {
    case EvalMode::kRetrieval: {
      header = {"level", "k", "recall"};
      for (auto level : levels) {
        const auto ds = load_level(o.data, level);
        const auto texts = prepare_texts(ds, queries.text_width());
        std::vector<std::size_t> ks;
        for (std::size_t k : coarse::kRecallKs) ks.push_back(std::min(k, index.size()));
        const auto r = coarse::recall_at_k(queries(pointers(texts)), truth_of(ds), index, ks);
        for (std::size_t i = 0; i < ks.size(); ++i) {
          rows.push_back({std::string(lang::level_name(level)), std::to_string(coarse::kRecallKs[i]), fmt(r[i])});
        }
        results[std::string(lang::level_name(level))] = recall_json(coarse::kRecallKs, r);
      }
      break;
    }
    case EvalMode::kLocalization: {
      if (!o.fine) throw PipelineError("localization needs a fine checkpoint (--fine)");
      const fine::FineModel fm = load_fine(*o.fine);
      const auto fine_submaps = enc::prepare_submaps(map, fm.config().encoder);
      const std::size_t depth = *std::max_element(fine::kLocalizationKs.begin(), fine::kLocalizationKs.end());
      if (depth > index.size()) {
        throw PipelineError("localization needs at least " + std::to_string(depth) + " submaps, the index has " +
                            std::to_string(index.size()));
      }
      header = {"level", "epsilon", "k", "recall"};
      std::vector<io::CsvRow> pred_rows;
      for (auto level : levels) {
        const auto ds = load_level(o.data, level);
        const auto texts = prepare_texts(ds, queries.text_width());
        const auto fine_texts = prepare_texts(ds, fm.config().encoder.text_width);
        const ng::Array q = queries(pointers(texts));
        std::vector<const enc::SubmapInput*> ps;
        std::vector<const enc::TextInput*> pt;
        for (std::size_t i = 0; i < ds.size(); ++i) {
          ng::Array row({q.cols()});
          std::copy_n(q.values().begin() + static_cast<std::ptrdiff_t>(i * q.cols()), q.cols(), row.values().begin());
          for (const auto& r : coarse::retrieve_topk(row, index, depth)) {
            ps.push_back(&fine_submaps.at(static_cast<std::size_t>(r.id)));
            pt.push_back(&fine_texts[i]);
          }
        }
        const auto pred = fine::predict(fm, ps, pt);
        std::vector<std::vector<double>> errors(ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i) {
          for (std::size_t k = 0; k < depth; ++k) {
            const auto& p = pred[i * depth + k];
            const double e = std::hypot(p.x - ds[i].pose.x, p.y - ds[i].pose.y);
            errors[i].push_back(e);
            pred_rows.push_back({std::string(lang::level_name(level)), std::to_string(ds[i].pair_id),
                                 std::to_string(k + 1), std::to_string(ps[i * depth + k]->submap_id), fmt(p.x),
                                 fmt(p.y), fmt(e)});
          }
        }
        const auto table = fine::localization_recall(errors);
        json lj = json::object();
        for (std::size_t e = 0; e < table.epsilons.size(); ++e) {
          for (std::size_t k = 0; k < table.ks.size(); ++k) {
            rows.push_back({std::string(lang::level_name(level)), fmt(table.epsilons[e]), std::to_string(table.ks[k]),
                            fmt(table.recall[e][k])});
            lj["recall"][fmt(table.epsilons[e])][std::to_string(table.ks[k])] = table.recall[e][k];
          }
        }
        // The same queries localized on their ground-truth submap.
        std::vector<const enc::SubmapInput*> gs;
        for (const auto& d : ds) gs.push_back(&fine_submaps.at(static_cast<std::size_t>(d.submap_id)));
        const auto gp = fine::predict(fm, gs, pointers(fine_texts));
        double model_err = 0.0, center_err = 0.0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
          model_err += std::hypot(gp[i].x - ds[i].pose.x, gp[i].y - ds[i].pose.y);
          center_err += std::hypot(gs[i]->center.x - ds[i].pose.x, gs[i]->center.y - ds[i].pose.y);
        }
        lj["ground_truth_submap_mean_error"] = model_err / static_cast<double>(ds.size());
        lj["center_baseline_mean_error"] = center_err / static_cast<double>(ds.size());
        results[std::string(lang::level_name(level))] = lj;
      }
      io::save_csv(o.out / "predictions.csv", {"level", "query", "k", "submap", "x", "y", "error"}, pred_rows);
      break;
    }
    case EvalMode::kRobustness: {
      header = {"level", "change", "n_sentences", "recall_at_1", "recall_at_3", "recall_at_5"};
      for (auto level : levels) {
        const auto ds = load_level(o.data, level);
        const auto truth = truth_of(ds);
        auto recall_of = [&](const std::vector<lang::Description>& v) {
          const auto texts = prepare_texts(v, queries.text_width());
          return coarse::recall_at_k(queries(pointers(texts)), truth, index, coarse::kRecallKs);
        };
        json lj = {{"baseline", recall_json(coarse::kRecallKs, recall_of(ds))}};
        for (std::size_t c = 0; c < lang::kNumChangeTypes; ++c) {
          const auto change = static_cast<lang::ChangeType>(c);
          const std::string cname(lang::change_name(change));
          for (std::size_t n = 1; n <= kMaxModified; ++n) {
            std::vector<lang::Description> modified;
            for (const auto& d : ds) {
              // Fewer sentences than n: change them all, but a discard keeps one.
              std::size_t m = std::min(n, d.sentences.size());
              if (change == lang::ChangeType::kDiscard) m = std::min(m, d.sentences.size() - 1);
              const std::uint64_t seed = mix_seed(o.seed, static_cast<std::uint64_t>(d.pair_id) * 8 + c);
              modified.push_back(m == 0 ? d : lang::perturb_description(d, change, m, seed));
            }
            const auto r = recall_of(modified);
            rows.push_back({std::string(lang::level_name(level)), cname, std::to_string(n), fmt(r[0]), fmt(r[1]),
                            fmt(r[2])});
            lj[cname][std::to_string(n)] = recall_json(coarse::kRecallKs, r);
          }
        }
        results[std::string(lang::level_name(level))] = lj;
      }
      break;
    }
  }
  summary["results"] = results;
  io::save_csv(o.out / (name + ".csv"), header, rows);
  io::save_json(o.out / (name + "_summary.json"), summary);
  return summary;
}

// ---- report -----------------------------------------------------------------------------

std::string cmd_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw PipelineError("report directory '" + dir.string() + "' not found");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string n = e.path().filename().string();
    if (n.size() > 13 && n.ends_with("_summary.json")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw PipelineError("no *_summary.json files in '" + dir.string() + "'");

  auto pct = [](const json& v) { return fmt(std::round(v.get<double>() * 1000.0) / 10.0); };
  auto metres = [](const json& v) { return fmt(std::round(v.get<double>() * 1000.0) / 1000.0); };
  // Levels in their natural order rather than JSON key order.
  auto ordered = [](const json& res) {
    std::vector<std::pair<std::string, json>> out;
    for (auto l : kAllLevels) {
      const std::string n(lang::level_name(l));
      if (res.contains(n)) out.emplace_back(n, res.at(n));
    }
    return out;
  };
  std::string md = "# cityloc report\n";
  for (const auto& f : files) {
    const json s = io::load_json(f);
    const std::string mode = s.value("mode", "");
    md += "\n## " + mode + " (" + f.filename().string() + ", version " + s.value("version", "?") + ")\n\n";
    const json& res = s.at("results");
    if (mode == "retrieval") {
      md += "| level | R@1 | R@3 | R@5 |\n|---|---|---|---|\n";
      for (const auto& [level, r] : ordered(res)) {
        md += "| " + level + " | " + pct(r.at("1")) + " | " + pct(r.at("3")) + " | " + pct(r.at("5")) + " |\n";
      }
    } else if (mode == "localization") {
      md += "| level | epsilon (m) | k=1 | k=5 | k=10 |\n|---|---|---|---|---|\n";
      for (const auto& [level, r] : ordered(res)) {
        for (double e : fine::kEpsilons) {
          const std::string eps = fmt(e);
          const json& row = r.at("recall").at(eps);
          md += "| " + level + " | " + eps + " | " + pct(row.at("1")) + " | " + pct(row.at("5")) + " | " +
                pct(row.at("10")) + " |\n";
        }
        md += "\nGround-truth submap mean error (" + level + "): " + metres(r.at("ground_truth_submap_mean_error")) +
              " m; center baseline " + metres(r.at("center_baseline_mean_error")) + " m.\n\n";
      }
    } else if (mode == "robustness") {
      md += "| level | change | n=0 | n=1 | n=2 | n=3 | n=4 | n=5 |\n|---|---|---|---|---|---|---|---|\n";
      for (const auto& [level, r] : ordered(res)) {
        for (std::size_t c = 0; c < lang::kNumChangeTypes; ++c) {
          const std::string cname(lang::change_name(static_cast<lang::ChangeType>(c)));
          md += "| " + level + " | " + cname + " | " + pct(r.at("baseline").at("1"));
          for (std::size_t n = 1; n <= kMaxModified; ++n) md += " | " + pct(r.at(cname).at(std::to_string(n)).at("1"));
          md += " |\n";
        }
      }
    }
  }
  io::write_text(dir / "report.md", md);
  return md;
}

}  // namespace cityloc::cli
