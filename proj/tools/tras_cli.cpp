// Command-line driver: dataset synthesis, training in all modes, evaluation,
// the (A,B) sweep, and feature export. Exit codes: 0 success, 1 config error,
// 2 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tras/config.hpp"
#include "tras/experiment.hpp"
#include "tras/rng.hpp"

namespace fs = std::filesystem;

namespace {

struct CliFlags {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::string seeds;  // comma list
  std::string mode;
  double A = 0.0;
  double B = 0.0;
  bool no_teacher_transform = false;
  bool plain_ce = false;
  bool no_mask = false;
};

void add_common_options(CLI::App* cmd, CliFlags& flags) {
  cmd->add_option("--config", flags.config_path, "Config file (INI sections or JSON)");
  cmd->add_option("--out", flags.out_dir, "Output directory");
  cmd->add_option("--seed", flags.seed, "Run seed (overrides the config)");
  cmd->add_option("--seeds", flags.seeds, "Comma-separated seed list for multi-seed runs");
  cmd->add_option("--mode", flags.mode, "shared | two-stage | tras-minus");
  cmd->add_option("--A", flags.A, "Scale of the class-dependent part of tau");
  cmd->add_option("--B", flags.B, "Constant part of tau");
  cmd->add_flag("--no-teacher-transform", flags.no_teacher_transform,
                "Disable the A=0,B=1 pseudo-labeling adjustment");
  cmd->add_flag("--plain-ce", flags.plain_ce, "Use plain CE instead of DA-CE on labeled data");
  cmd->add_flag("--no-mask", flags.no_mask, "Disable the student confidence mask");
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::string token;
  std::istringstream in(text);
  while (std::getline(in, token, ',')) {
    if (token.empty()) continue;
    seeds.push_back(std::stoull(token));
  }
  if (seeds.empty()) throw tras::ConfigError("--seeds: no seeds given");
  return seeds;
}

std::vector<double> parse_double_list(const std::string& flag, const std::string& text) {
  std::vector<double> values;
  std::string token;
  std::istringstream in(text);
  while (std::getline(in, token, ',')) {
    if (token.empty()) continue;
    try {
      values.push_back(std::stod(token));
    } catch (const std::exception&) {
      throw tras::ConfigError(flag + ": cannot parse '" + token + "' as a number");
    }
  }
  if (values.empty()) throw tras::ConfigError(flag + ": empty list");
  return values;
}

// Flags given on the command line take precedence over config file values.
tras::ExperimentConfig load_config(const CLI::App* cmd, const CliFlags& flags) {
  tras::ExperimentConfig config = tras::parse_config_file(flags.config_path);
  if (cmd->count("--out") > 0) config.out_dir = flags.out_dir;
  if (cmd->count("--seed") > 0) {
    config.train.seed = flags.seed;
    config.seeds.clear();
  }
  if (cmd->count("--seeds") > 0) config.seeds = parse_seed_list(flags.seeds);
  if (cmd->count("--mode") > 0) {
    try {
      config.train.mode = tras::parse_train_mode(flags.mode);
    } catch (const std::exception& e) {
      throw tras::ConfigError(e.what());
    }
  }
  if (cmd->count("--A") > 0) config.train.A = flags.A;
  if (cmd->count("--B") > 0) config.train.B = flags.B;
  if (flags.no_teacher_transform) config.train.disable_teacher_transform = true;
  if (flags.plain_ce) config.train.use_plain_ce_labeled = true;
  if (flags.no_mask) config.train.disable_student_mask = true;
  return config;
}

int cmd_gen_data(const CLI::App* cmd, const CliFlags& flags) {
  tras::ExperimentConfig config = load_config(cmd, flags);
  config.validate();
  if (config.dataset.type != "synthetic") {
    throw tras::ConfigError("gen-data needs dataset.type = synthetic");
  }
  const std::string out = config.resolved_out_dir();
  fs::create_directories(out);
  tras::PreparedData data = tras::prepare_data(config, config.train.seed);
  tras::write_labeled_csv((fs::path(out) / "labeled.csv").string(), data.dataset.labeled);
  tras::write_unlabeled_csv((fs::path(out) / "unlabeled.csv").string(), data.dataset.unlabeled);
  tras::write_labeled_csv((fs::path(out) / "test.csv").string(), data.test_set);
  tras::write_manifest((fs::path(out) / "manifest.txt").string(), data.manifest);
  std::printf("OK gen-data out=%s labeled=%zu unlabeled=%zu test=%zu\n", out.c_str(),
              data.dataset.labeled.size(), data.dataset.unlabeled.size(), data.test_set.size());
  return 0;
}

int cmd_train(const CLI::App* cmd, const CliFlags& flags) {
  tras::ExperimentConfig config = load_config(cmd, flags);
  tras::ExperimentSummary summary = tras::run_experiment(config);
  std::printf("OK train out=%s runs=%d overall=%.6f minority=%.6f gm=%.6f\n",
              summary.out_dir.c_str(), summary.runs, summary.mean_overall,
              summary.mean_minority, summary.mean_gm);
  return 0;
}

int cmd_eval(const CLI::App* cmd, const CliFlags& flags, const std::string& checkpoint_path) {
  tras::ExperimentConfig config = load_config(cmd, flags);
  config.validate();
  tras::Checkpoint ckpt = tras::load_checkpoint(checkpoint_path);
  tras::PreparedData data = tras::prepare_data(config, ckpt.config.seed);
  if (data.test_set.empty()) throw tras::ConfigError("eval: config provides no test data");

  const tras::ModelParams& eval_params =
      ckpt.config.eval_with_ema ? ckpt.ema_params : ckpt.params;
  std::vector<int> truth(data.test_set.size());
  for (std::size_t i = 0; i < data.test_set.size(); ++i) truth[i] = data.test_set[i].y;
  std::vector<int> predictions = tras::predict_student(eval_params, data.test_set);

  tras::MetricsReport report;
  report.confusion = tras::confusion_matrix(truth, predictions, eval_params.num_classes);
  tras::ClassGrouping grouping = tras::resolve_grouping(config.eval, eval_params.num_classes);
  tras::AccuracySuite suite = tras::accuracy_suite(report.confusion, grouping);
  report.overall_accuracy = suite.overall;
  report.per_class_recall = suite.per_class_recall;
  report.minority_accuracy = suite.minority_accuracy;
  report.zero_support_classes = suite.zero_support_classes;
  report.gm = tras::geometric_mean(suite.per_class_recall, config.eval.gm_floor);

  const std::string out = config.resolved_out_dir();
  fs::create_directories(out);
  {
    std::ofstream stream(fs::path(out) / "metrics.json");
    if (!stream) throw std::runtime_error("cannot write metrics.json in " + out);
    stream << tras::metrics_report_to_json(report) << "\n";
  }
  tras::write_confusion_csv((fs::path(out) / "confusion.csv").string(), report.confusion);
  std::printf("OK eval out=%s overall=%.6f minority=%.6f gm=%.6f\n", out.c_str(),
              report.overall_accuracy, report.minority_accuracy, report.gm);
  return 0;
}

int cmd_sweep(const CLI::App* cmd, const CliFlags& flags, const std::string& a_grid,
              const std::string& b_grid) {
  tras::ExperimentConfig config = load_config(cmd, flags);
  std::vector<double> a_values = parse_double_list("--A-grid", a_grid);
  std::vector<double> b_values = parse_double_list("--B-grid", b_grid);
  tras::SweepResult result = tras::run_sweep(config, a_values, b_values);
  std::printf("OK sweep-ab out=%s cells=%zu rows=%zu\n", config.resolved_out_dir().c_str(),
              result.averaged.size(), result.rows.size());
  return 0;
}

int cmd_export_features(const CLI::App* cmd, const CliFlags& flags,
                        const std::string& checkpoint_path, const std::string& split) {
  tras::ExperimentConfig config = load_config(cmd, flags);
  config.validate();
  tras::Checkpoint ckpt = tras::load_checkpoint(checkpoint_path);
  tras::PreparedData data = tras::prepare_data(config, ckpt.config.seed);

  std::vector<std::vector<double>> inputs;
  if (split == "labeled") {
    for (const tras::LabeledExample& ex : data.dataset.labeled) inputs.push_back(ex.x);
  } else if (split == "unlabeled") {
    for (const tras::UnlabeledExample& ex : data.dataset.unlabeled) inputs.push_back(ex.x);
  } else if (split == "test") {
    for (const tras::LabeledExample& ex : data.test_set) inputs.push_back(ex.x);
  } else {
    throw tras::ConfigError("--split must be labeled, unlabeled, or test");
  }

  const tras::ModelParams& params = ckpt.config.eval_with_ema ? ckpt.ema_params : ckpt.params;
  std::vector<std::vector<double>> rows = tras::export_features(params, inputs);
  const std::string out = config.resolved_out_dir();
  fs::create_directories(out);
  const std::string path = (fs::path(out) / "features.csv").string();
  tras::write_features_csv(path, rows);
  std::printf("OK export-features out=%s rows=%zu dim=%d\n", out.c_str(), rows.size(),
              params.feature_dim);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Long-tailed semi-supervised training via pseudo-label distribution transfer"};
  app.require_subcommand(1);

  CliFlags gen_flags, train_flags, eval_flags, sweep_flags, export_flags;
  std::string eval_checkpoint, export_checkpoint;
  std::string export_split = "test";
  std::string sweep_a = "0,2,4,6", sweep_b = "0,2,4,6";

  CLI::App* gen = app.add_subcommand("gen-data", "Synthesize a long-tailed dataset to CSV");
  add_common_options(gen, gen_flags);

  CLI::App* train = app.add_subcommand("train", "Train and write metrics, logs, checkpoint");
  add_common_options(train, train_flags);

  CLI::App* evaluate = app.add_subcommand("eval", "Evaluate a checkpoint on the test set");
  add_common_options(evaluate, eval_flags);
  evaluate->add_option("--checkpoint", eval_checkpoint, "Checkpoint JSON")->required();

  CLI::App* sweep = app.add_subcommand("sweep-ab", "Grid sweep over the (A,B) schedule");
  add_common_options(sweep, sweep_flags);
  sweep->add_option("--A-grid", sweep_a, "Comma list of A values");
  sweep->add_option("--B-grid", sweep_b, "Comma list of B values");

  CLI::App* exporter = app.add_subcommand("export-features", "Write backbone features to CSV");
  add_common_options(exporter, export_flags);
  exporter->add_option("--checkpoint", export_checkpoint, "Checkpoint JSON")->required();
  exporter->add_option("--split", export_split, "labeled | unlabeled | test");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen, gen_flags);
    if (train->parsed()) return cmd_train(train, train_flags);
    if (evaluate->parsed()) return cmd_eval(evaluate, eval_flags, eval_checkpoint);
    if (sweep->parsed()) return cmd_sweep(sweep, sweep_flags, sweep_a, sweep_b);
    if (exporter->parsed()) {
      return cmd_export_features(exporter, export_flags, export_checkpoint, export_split);
    }
  } catch (const tras::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
