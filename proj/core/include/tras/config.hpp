#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tras/trainer.hpp"

namespace tras {

// Raised for bad configuration (unknown keys, type errors, invariant
// violations). The CLI maps it to exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::string type = "synthetic";  // synthetic | csv

  // synthetic: a long-tailed Gaussian mixture with class means on a circle
  std::int64_t n1 = 1000;  // labeled + unlabeled count of the largest class
  double gamma = 50.0;
  double beta = 0.2;
  int num_classes = 10;
  int feature_dim = 5;
  double radius = 1.0;
  double sigma = 0.35;
  std::uint64_t seed = 0;  // 0 = derive from the run seed

  // csv
  std::string labeled_path;
  std::string unlabeled_path;
  std::string test_path;
};

struct EvalConfig {
  // empty vectors fall back to the frequency-based defaults for L classes
  std::vector<int> head;
  std::vector<int> torso;
  std::vector<int> tail;
  std::vector<int> minority;
  double gm_floor = 1e-3;
  int test_per_class = 200;  // synthetic balanced test draw
};

struct ExperimentConfig {
  DatasetConfig dataset;
  TrainConfig train;
  EvalConfig eval;
  std::string out_dir;  // empty = $TRAS_OUT_ROOT or ./out
  std::vector<std::uint64_t> seeds;  // optional multi-seed run list

  void validate() const;  // throws ConfigError naming the offending key
  std::string resolved_out_dir() const;
};

// Accepts the INI-style sectioned format ([dataset], [train], [eval],
// [output]) or a JSON file with the same keys (chosen by .json extension).
ExperimentConfig parse_config_file(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text);  // INI body

}  // namespace tras
