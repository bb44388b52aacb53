#include "tras/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "tras/rng.hpp"

namespace tras {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr std::uint64_t kDatasetStream = 7001;
constexpr std::uint64_t kTestStream = 7002;

std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

MetricsReport final_report(const TrainResult& result, const ExperimentConfig& config,
                           const EvalContext& eval) {
  MetricsReport report;
  const ModelParams& eval_params =
      config.train.eval_with_ema ? result.ema_params : result.params;
  if (!eval.test_set.empty()) {
    std::vector<int> truth(eval.test_set.size());
    for (std::size_t i = 0; i < eval.test_set.size(); ++i) truth[i] = eval.test_set[i].y;
    std::vector<int> predictions = predict_student(eval_params, eval.test_set);
    int num_classes = eval_params.num_classes;
    report.confusion = confusion_matrix(truth, predictions, num_classes);
    AccuracySuite suite = accuracy_suite(report.confusion, eval.grouping);
    report.overall_accuracy = suite.overall;
    report.per_class_recall = suite.per_class_recall;
    report.minority_accuracy = suite.minority_accuracy;
    report.zero_support_classes = suite.zero_support_classes;
    report.gm = geometric_mean(suite.per_class_recall, eval.gm_floor);
  }
  if (!result.log.epochs.empty()) {
    const EpochRecord& last = result.log.epochs.back();
    report.group_quality = last.pseudo_quality;
    report.balancedness_transformed = last.balancedness_transformed;
    report.balancedness_raw = last.balancedness_raw;
  }
  return report;
}

struct Stats {
  double mean = 0.0;
  double stddev = 0.0;
};

Stats stats_of(const std::vector<double>& values) {
  Stats s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

json stats_json(const std::vector<double>& values) {
  Stats s = stats_of(values);
  return json{{"mean", s.mean}, {"stddev", s.stddev}, {"values", values}};
}

void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& rows,
                     bool with_seed) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "A,B";
  if (with_seed) out << ",seed";
  out << ",overall_accuracy,minority_accuracy,gm"
      << ",pl_precision_head,pl_precision_torso,pl_precision_tail"
      << ",pl_recall_head,pl_recall_torso,pl_recall_tail"
      << ",balancedness_mean,balancedness_final\n";
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << "," << buf;
  };
  for (const SweepCell& cell : rows) {
    out << format_g(cell.A) << "," << format_g(cell.B);
    if (with_seed) out << "," << cell.seed;
    put(cell.overall);
    put(cell.minority);
    put(cell.gm);
    put(cell.quality.head_precision);
    put(cell.quality.torso_precision);
    put(cell.quality.tail_precision);
    put(cell.quality.head_recall);
    put(cell.quality.torso_recall);
    put(cell.quality.tail_recall);
    put(cell.balancedness_mean);
    put(cell.balancedness_final);
    out << "\n";
  }
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& config, std::uint64_t run_seed) {
  PreparedData data;
  if (config.dataset.type == "csv") {
    data.dataset = load_csv_dataset(config.dataset.labeled_path, config.dataset.unlabeled_path,
                                    config.dataset.num_classes);
    if (!config.dataset.test_path.empty()) {
      data.test_set = load_labeled_csv(config.dataset.test_path, data.dataset.num_classes);
    }
    data.manifest.num_classes = data.dataset.num_classes;
    data.manifest.feature_dim = data.dataset.feature_dim();
    data.manifest.labeled_counts = data.dataset.labeled_counts;
    data.manifest.unlabeled_counts = data.dataset.unlabeled_counts;
    data.manifest.seed = 0;
    return data;
  }

  const std::uint64_t dataset_seed = config.dataset.seed != 0
                                         ? config.dataset.seed
                                         : mix_seed(run_seed, kDatasetStream);
  data.synthetic = true;
  data.spec = circle_mixture(config.dataset.num_classes, config.dataset.feature_dim,
                             config.dataset.radius, config.dataset.sigma, dataset_seed);
  std::vector<std::int64_t> totals =
      longtail_counts(config.dataset.n1, config.dataset.gamma, config.dataset.num_classes);
  SplitCounts split = split_labeled_unlabeled(totals, config.dataset.beta);
  data.dataset = synth_gaussian_mixture(data.spec, split.labeled, split.unlabeled);
  data.test_set = synth_balanced_sample(data.spec, config.eval.test_per_class,
                                        mix_seed(dataset_seed, kTestStream));

  data.manifest.num_classes = config.dataset.num_classes;
  data.manifest.gamma = config.dataset.gamma;
  data.manifest.beta = config.dataset.beta;
  data.manifest.seed = dataset_seed;
  data.manifest.feature_dim = config.dataset.feature_dim;
  data.manifest.sigma = config.dataset.sigma;
  data.manifest.labeled_counts = split.labeled;
  data.manifest.unlabeled_counts = split.unlabeled;
  return data;
}

ClassGrouping resolve_grouping(const EvalConfig& eval, int num_classes) {
  ClassGrouping grouping = ClassGrouping::default_for(num_classes);
  if (!eval.head.empty() || !eval.tail.empty()) {
    grouping.head = eval.head;
    grouping.torso = eval.torso;
    grouping.tail = eval.tail;
  }
  if (!eval.minority.empty()) grouping.minority = eval.minority;
  if (!grouping.is_partition(num_classes)) {
    throw ConfigError("eval grouping must partition the classes (minority nonempty)");
  }
  return grouping;
}

RunOutput run_single_experiment(const ExperimentConfig& config, std::uint64_t seed,
                                const std::string& out_dir) {
  config.validate();
  fs::create_directories(out_dir);

  PreparedData data = prepare_data(config, seed);
  write_manifest((fs::path(out_dir) / "manifest.txt").string(), data.manifest);

  EvalContext eval;
  eval.test_set = std::move(data.test_set);
  eval.grouping = resolve_grouping(config.eval, data.dataset.num_classes);
  eval.gm_floor = config.eval.gm_floor;

  TrainConfig train_config = config.train;
  train_config.seed = seed;
  TrainResult result = train(data.dataset, train_config, &eval);

  write_train_log((fs::path(out_dir) / "trainlog.jsonl").string(), result.log);

  RunOutput output;
  output.report = final_report(result, config, eval);
  {
    std::ofstream out(fs::path(out_dir) / "metrics.json");
    if (!out) throw std::runtime_error("cannot write metrics.json in " + out_dir);
    out << metrics_report_to_json(output.report) << "\n";
  }
  write_confusion_csv((fs::path(out_dir) / "confusion.csv").string(), output.report.confusion);
  save_checkpoint((fs::path(out_dir) / "checkpoint.json").string(), result.params,
                  result.ema_params, result.opt_state, train_config);
  output.log = std::move(result.log);
  return output;
}

ExperimentSummary run_experiment(const ExperimentConfig& config) {
  config.validate();
  const std::string base = config.resolved_out_dir();
  std::vector<std::uint64_t> seeds = config.seeds;
  if (seeds.empty()) seeds.push_back(config.train.seed);

  ExperimentSummary summary;
  summary.out_dir = base;
  std::vector<double> overall, minority, gm, balancedness_values;

  for (std::uint64_t seed : seeds) {
    const std::string run_dir =
        seeds.size() == 1 ? base : (fs::path(base) / ("seed_" + std::to_string(seed))).string();
    RunOutput output = run_single_experiment(config, seed, run_dir);
    overall.push_back(output.report.overall_accuracy);
    minority.push_back(output.report.minority_accuracy);
    gm.push_back(output.report.gm);
    balancedness_values.push_back(output.report.balancedness_transformed);
    ++summary.runs;
  }

  if (seeds.size() > 1) {
    json agg;
    agg["seeds"] = seeds;
    agg["overall_accuracy"] = stats_json(overall);
    agg["minority_accuracy"] = stats_json(minority);
    agg["gm"] = stats_json(gm);
    agg["balancedness_transformed"] = stats_json(balancedness_values);
    std::ofstream out(fs::path(base) / "aggregate.json");
    if (!out) throw std::runtime_error("cannot write aggregate.json in " + base);
    out << agg.dump(2) << "\n";
  }

  summary.mean_overall = stats_of(overall).mean;
  summary.mean_minority = stats_of(minority).mean;
  summary.mean_gm = stats_of(gm).mean;
  return summary;
}

SweepResult run_sweep(const ExperimentConfig& config, const std::vector<double>& A_values,
                      const std::vector<double>& B_values) {
  config.validate();
  if (A_values.empty() || B_values.empty()) {
    throw ConfigError("sweep needs nonempty A and B grids");
  }
  const std::string base = config.resolved_out_dir();
  fs::create_directories(base);
  std::vector<std::uint64_t> seeds = config.seeds;
  if (seeds.empty()) seeds.push_back(config.train.seed);

  SweepResult result;
  for (double a : A_values) {
    for (double b : B_values) {
      SweepCell mean_cell;
      mean_cell.A = a;
      mean_cell.B = b;
      for (std::uint64_t seed : seeds) {
        ExperimentConfig cell_config = config;
        cell_config.train.A = a;
        cell_config.train.B = b;
        const std::string cell_dir =
            (fs::path(base) / ("A" + format_g(a) + "_B" + format_g(b)) /
             ("seed_" + std::to_string(seed)))
                .string();
        RunOutput output = run_single_experiment(cell_config, seed, cell_dir);

        SweepCell cell;
        cell.A = a;
        cell.B = b;
        cell.seed = seed;
        cell.overall = output.report.overall_accuracy;
        cell.minority = output.report.minority_accuracy;
        cell.gm = output.report.gm;
        cell.quality = output.report.group_quality;
        cell.balancedness_final = output.report.balancedness_transformed;
        double bal_sum = 0.0;
        for (const EpochRecord& record : output.log.epochs) {
          bal_sum += record.balancedness_transformed;
        }
        cell.balancedness_mean =
            output.log.epochs.empty() ? 0.0
                                      : bal_sum / static_cast<double>(output.log.epochs.size());
        result.rows.push_back(cell);

        mean_cell.overall += cell.overall;
        mean_cell.minority += cell.minority;
        mean_cell.gm += cell.gm;
        mean_cell.quality.head_precision += cell.quality.head_precision;
        mean_cell.quality.torso_precision += cell.quality.torso_precision;
        mean_cell.quality.tail_precision += cell.quality.tail_precision;
        mean_cell.quality.head_recall += cell.quality.head_recall;
        mean_cell.quality.torso_recall += cell.quality.torso_recall;
        mean_cell.quality.tail_recall += cell.quality.tail_recall;
        mean_cell.balancedness_mean += cell.balancedness_mean;
        mean_cell.balancedness_final += cell.balancedness_final;
      }
      const double n = static_cast<double>(seeds.size());
      mean_cell.overall /= n;
      mean_cell.minority /= n;
      mean_cell.gm /= n;
      mean_cell.quality.head_precision /= n;
      mean_cell.quality.torso_precision /= n;
      mean_cell.quality.tail_precision /= n;
      mean_cell.quality.head_recall /= n;
      mean_cell.quality.torso_recall /= n;
      mean_cell.quality.tail_recall /= n;
      mean_cell.balancedness_mean /= n;
      mean_cell.balancedness_final /= n;
      result.averaged.push_back(mean_cell);
    }
  }

  write_sweep_csv((fs::path(base) / "sweep.csv").string(), result.rows, /*with_seed=*/true);
  write_sweep_csv((fs::path(base) / "sweep_agg.csv").string(), result.averaged,
                  /*with_seed=*/false);
  return result;
}

}  // namespace tras
