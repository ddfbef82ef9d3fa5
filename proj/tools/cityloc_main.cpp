// cityloc: generate toy scenes, train the staged models, evaluate and report.

#include "cityloc/pipeline.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <sstream>

namespace cli = cityloc::cli;
namespace lang = cityloc::lang;

namespace {

lang::Level parse_level(const std::string& s) {
  const auto l = lang::level_from_name(s);
  if (!l) throw CLI::ValidationError("--level", "unknown level '" + s + "'");
  return *l;
}

std::vector<lang::Level> parse_levels(const std::string& csv) {
  std::vector<lang::Level> out;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(parse_level(item));
  }
  return out;
}

const std::vector<std::string> kLevelNames = {"simple", "moderate", "complex"};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-to-point-cloud localization on synthetic city scenes"};
  app.set_version_flag("--version", cli::version());
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string config_path;
  app.add_option("--seed", seed, "global seed")->capture_default_str();
  app.add_option("--config", config_path, "key=value config file (schema=1)")->check(CLI::ExistingFile);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a scene, submaps and descriptions");
  std::string gen_out, gen_levels = "simple,moderate,complex";
  std::vector<double> extent;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--levels", gen_levels, "comma-separated description levels")->capture_default_str();
  gen->add_option("--extent", extent, "scene width and height in metres")->expected(2);

  // train
  auto* train = app.add_subcommand("train", "train one stage and write a checkpoint");
  std::string stage_name, train_data, train_out, train_level, frozen;
  std::optional<std::size_t> epochs;
  train->add_option("--stage", stage_name, "coarse | distill | fine")
      ->required()
      ->check(CLI::IsMember({"coarse", "distill", "fine"}));
  train->add_option("--data", train_data, "directory written by gen")->required();
  train->add_option("--out", train_out, "checkpoint directory")->required();
  train->add_option("--level", train_level, "description level (distill default: complex)")
      ->check(CLI::IsMember(kLevelNames));
  train->add_option("--frozen", frozen, "frozen coarse checkpoint for distillation");
  train->add_option("--epochs", epochs, "override the stage's epoch count");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate checkpoints on generated data");
  std::string mode_name, eval_data, eval_out, coarse_ckpt, student_ckpt, fine_ckpt, eval_levels, eval_level;
  eval->add_option("--mode", mode_name, "retrieval | localization | robustness")
      ->required()
      ->check(CLI::IsMember({"retrieval", "localization", "robustness"}));
  eval->add_option("--data", eval_data, "directory written by gen")->required();
  eval->add_option("--out", eval_out, "metrics directory")->required();
  eval->add_option("--coarse", coarse_ckpt, "coarse checkpoint")->required();
  eval->add_option("--student", student_ckpt, "distilled text checkpoint used for queries");
  eval->add_option("--fine", fine_ckpt, "fine checkpoint (localization)");
  eval->add_option("--levels", eval_levels, "comma-separated levels (default: all present)");
  eval->add_option("--level", eval_level, "single level")->check(CLI::IsMember(kLevelNames));

  // report
  auto* report = app.add_subcommand("report", "collect metric summaries into report.md");
  std::string report_dir;
  report->add_option("--out", report_dir, "directory holding *_summary.json")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    cli::RunConfig config = cli::load_run_config(
        config_path.empty() ? std::nullopt : std::optional<cli::fs::path>(config_path));

    if (*gen) {
      cli::GenOptions o;
      o.out = gen_out;
      o.seed = seed;
      o.levels = parse_levels(gen_levels);
      if (!extent.empty()) {
        config.extent_width = extent[0];
        config.extent_height = extent[1];
      }
      o.config = config;
      const auto s = cli::cmd_gen(o);
      std::cout << "instances " << s.instances << "\nsubmaps " << s.submaps << "\npairs " << s.pairs
                << "\nfine_pairs " << s.fine_pairs << "\n";
    } else if (*train) {
      cli::TrainOptions o;
      o.stage = *cli::stage_from_name(stage_name);
      o.data = train_data;
      o.out = train_out;
      o.level = train_level.empty() ? (o.stage == cli::Stage::kDistill ? lang::Level::kComplex : lang::Level::kSimple)
                                    : parse_level(train_level);
      if (!frozen.empty()) o.frozen = frozen;
      o.epochs = epochs;
      o.seed = seed;
      o.config = config;
      const auto s = cli::cmd_train(o);
      for (std::size_t e = 0; e < s.epoch_loss.size(); ++e) {
        std::cerr << "epoch " << e + 1 << " loss " << s.epoch_loss[e] << "\n";
      }
      std::cout << "checkpoint " << s.checkpoint.string() << "\ndigest " << s.digest << "\n";
    } else if (*eval) {
      cli::EvalOptions o;
      o.mode = *cli::mode_from_name(mode_name);
      o.data = eval_data;
      o.out = eval_out;
      o.coarse = coarse_ckpt;
      if (!student_ckpt.empty()) o.student = student_ckpt;
      if (!fine_ckpt.empty()) o.fine = fine_ckpt;
      o.levels = parse_levels(eval_levels);
      if (!eval_level.empty()) o.levels.push_back(parse_level(eval_level));
      o.seed = seed;
      o.config = config;
      std::cout << cli::cmd_eval(o)["results"].dump(2) << "\n";
    } else if (*report) {
      std::cout << cli::cmd_report(report_dir);
    }
  } catch (const std::exception& e) {
    std::cerr << "cityloc: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
