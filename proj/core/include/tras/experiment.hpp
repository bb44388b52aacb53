#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tras/config.hpp"
#include "tras/data.hpp"
#include "tras/metrics.hpp"
#include "tras/trainer.hpp"

namespace tras {

struct PreparedData {
  Dataset dataset;
  std::vector<LabeledExample> test_set;
  ManifestInfo manifest;
  bool synthetic = false;
  MixtureSpec spec;  // valid for synthetic data
};

// Builds (or loads) the training data and a balanced test set. For synthetic
// data a dataset seed of 0 is replaced by a stream derived from run_seed.
PreparedData prepare_data(const ExperimentConfig& config, std::uint64_t run_seed);

ClassGrouping resolve_grouping(const EvalConfig& eval, int num_classes);

struct RunOutput {
  MetricsReport report;
  TrainLog log;
};

// One full training run. Writes manifest.txt, trainlog.jsonl, metrics.json,
// confusion.csv, and checkpoint.json into out_dir.
RunOutput run_single_experiment(const ExperimentConfig& config, std::uint64_t seed,
                                const std::string& out_dir);

struct ExperimentSummary {
  std::string out_dir;
  int runs = 0;
  double mean_overall = 0.0;
  double mean_minority = 0.0;
  double mean_gm = 0.0;
};

// Runs every seed of the config (the single train.seed when no list is
// given); multi-seed runs land in seed_<s>/ subdirectories plus an
// aggregate.json with per-metric mean and standard deviation.
ExperimentSummary run_experiment(const ExperimentConfig& config);

struct SweepCell {
  double A = 0.0;
  double B = 0.0;
  std::uint64_t seed = 0;
  double overall = 0.0;
  double minority = 0.0;
  double gm = 0.0;
  GroupQuality quality;           // final-epoch pseudo-label quality
  double balancedness_mean = 0.0;  // mean over epochs of the transformed distribution
  double balancedness_final = 0.0;
};

struct SweepResult {
  std::vector<SweepCell> rows;      // one per (A, B, seed)
  std::vector<SweepCell> averaged;  // one per (A, B), seed field 0
};

// Full training run per grid cell (times seeds); writes sweep.csv and
// sweep_agg.csv plus per-cell run artifacts under <out>/A<a>_B<b>/.
SweepResult run_sweep(const ExperimentConfig& config, const std::vector<double>& A_values,
                      const std::vector<double>& B_values);

}  // namespace tras
