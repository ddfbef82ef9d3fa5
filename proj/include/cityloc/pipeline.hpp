#pragma once

// End-to-end commands behind the command-line tool: scene and description
// generation, staged training, evaluation, and report assembly.

#include "cityloc/coarse.hpp"
#include "cityloc/fine.hpp"
#include "cityloc/io.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cityloc::cli {

namespace fs = std::filesystem;

class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string version();

enum class Stage { kCoarse, kDistill, kFine };
enum class EvalMode { kRetrieval, kLocalization, kRobustness };
std::string_view stage_name(Stage s);
std::optional<Stage> stage_from_name(std::string_view name);
std::string_view mode_name(EvalMode m);
std::optional<EvalMode> mode_from_name(std::string_view name);

/// Every tunable of the pipeline. Config files override fields by key.
struct RunConfig {
  // scene
  double extent_width = 120.0;
  double extent_height = 220.0;
  std::size_t poses_per_submap = 5;
  std::size_t fine_poses_per_submap = 25;
  // encoders
  std::size_t width = 32;
  std::size_t branch_width = 16;
  std::size_t heads = 4;
  std::size_t ffn_mult = 2;
  std::size_t text_width = 64;
  std::size_t intra_blocks = 1;
  std::size_t inter_blocks = 1;
  std::size_t max_points = 16;
  // coarse training
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double lr = 1e-3;
  double temperature = 0.07;
  double alpha_cross = 1.0;
  double alpha_instance = 1.0;
  double alpha_submap = 1.0;
  double alpha_text = 1.0;
  std::size_t hint_pairs = 3;
  // distillation
  std::size_t adapter_rank = 8;
  std::size_t distill_batch_size = 32;
  std::size_t distill_epochs = 20;
  double distill_lr = 1e-3;
  // fine localization
  std::size_t fine_max_points = 8;
  std::size_t ccat_blocks = 2;
  std::size_t fine_batch_size = 32;
  std::size_t fine_epochs = 80;
  double fine_lr = 1e-3;
  double pmc_alpha = 15.0;
  double pmc_beta = 10.0;
  std::size_t pmc_max_mismatch = 1;

  /// Throws PipelineError on unknown keys or unparsable values.
  void apply(const std::map<std::string, std::string>& overrides);
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);

  enc::EncoderConfig coarse_encoder() const;
  fine::FineConfig fine_model() const;
};

/// Defaults overridden by an optional config file.
RunConfig load_run_config(const std::optional<fs::path>& path);

// ---- gen --------------------------------------------------------------------------------

inline const std::vector<lang::Level> kAllLevels = {lang::Level::kSimple, lang::Level::kModerate,
                                                    lang::Level::kComplex};

struct GenOptions {
  fs::path out;
  std::uint64_t seed = 0;
  std::vector<lang::Level> levels = kAllLevels;
  RunConfig config;
};

struct GenSummary {
  std::size_t instances = 0;
  std::size_t submaps = 0;
  std::size_t pairs = 0;
  std::size_t fine_pairs = 0;
};

/// Writes the scene files, descriptions_<level>.jsonl for the evaluation
/// pairs and fine_train_<level>.jsonl for separately sampled training poses.
GenSummary cmd_gen(const GenOptions& options);

fs::path fine_train_path(const fs::path& dir, lang::Level level);

// ---- train ------------------------------------------------------------------------------

struct TrainOptions {
  Stage stage = Stage::kCoarse;
  fs::path data;
  fs::path out;
  lang::Level level = lang::Level::kSimple;
  std::optional<fs::path> frozen;        // coarse checkpoint, distillation only
  std::optional<std::size_t> epochs;     // overrides the stage's epoch count
  std::uint64_t seed = 0;
  RunConfig config;
};

struct TrainSummary {
  fs::path checkpoint;
  fs::path loss_csv;
  std::string digest;
  std::vector<double> epoch_loss;
};

/// Writes <stage>.ckpt and <stage>_loss.csv into options.out.
TrainSummary cmd_train(const TrainOptions& options);

fs::path checkpoint_path(const fs::path& dir, Stage stage);

enc::CoarseModel load_coarse(const fs::path& path);
coarse::TextStudent load_student(const fs::path& path);
fine::FineModel load_fine(const fs::path& path);

// ---- eval -------------------------------------------------------------------------------

struct EvalOptions {
  EvalMode mode = EvalMode::kRetrieval;
  fs::path data;
  fs::path out;
  fs::path coarse;                    // coarse checkpoint
  std::optional<fs::path> student;    // distilled text path for queries
  std::optional<fs::path> fine;       // fine checkpoint, localization only
  std::vector<lang::Level> levels;    // empty: every level present in data
  std::uint64_t seed = 0;
  RunConfig config;
};

/// Writes <mode>.csv (plus predictions.csv for localization) and
/// <mode>_summary.json into options.out; returns the summary.
nlohmann::json cmd_eval(const EvalOptions& options);

inline constexpr std::size_t kMaxModified = 5;

// ---- report -----------------------------------------------------------------------------

/// Collects every *_summary.json in `dir` into report.md and returns its text.
std::string cmd_report(const fs::path& dir);

}  // namespace cityloc::cli
