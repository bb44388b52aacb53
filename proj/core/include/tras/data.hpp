#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tras {

struct LabeledExample {
  std::vector<double> x;
  int y = 0;
};

struct UnlabeledExample {
  std::vector<double> x;
  // Ground-truth class kept for pseudo-label diagnostics only; -1 when the
  // source file carried no hidden label. Loss code never sees this field.
  int hidden_y = -1;
};

struct Dataset {
  int num_classes = 0;
  std::vector<LabeledExample> labeled;
  std::vector<UnlabeledExample> unlabeled;
  std::vector<std::int64_t> labeled_counts;
  std::vector<std::int64_t> unlabeled_counts;  // from hidden labels where present

  int feature_dim() const {
    if (!labeled.empty()) return static_cast<int>(labeled[0].x.size());
    if (!unlabeled.empty()) return static_cast<int>(unlabeled[0].x.size());
    return 0;
  }
};

// Paired weak/strong views of the same unlabeled examples.
struct UnlabeledBatch {
  std::vector<std::vector<double>> weak_views;
  std::vector<std::vector<double>> strong_views;
  std::vector<std::size_t> source_indices;

  std::size_t size() const { return source_indices.size(); }
};

struct MixtureSpec {
  int num_classes = 0;
  int feature_dim = 0;
  std::vector<std::vector<double>> means;  // pairwise distinct
  double sigma = 1.0;
  std::uint64_t seed = 0;
};

// Class means evenly spaced on a circle of the given radius in the first two
// coordinates; remaining coordinates are zero (pure noise directions).
MixtureSpec circle_mixture(int num_classes, int feature_dim, double radius, double sigma,
                           std::uint64_t seed);

// count_l = round(n1 * gamma^(-(l-1)/(L-1))), floored at 1. count_1 == n1.
std::vector<std::int64_t> longtail_counts(std::int64_t n1, double gamma, int num_classes);

struct SplitCounts {
  std::vector<std::int64_t> labeled;
  std::vector<std::int64_t> unlabeled;
};

// labeled_l = round(beta * total_l) clamped to [1, total_l - 1]; both halves
// keep the same imbalance profile up to rounding. The seed is accepted for
// signature stability; the count-level split is deterministic.
SplitCounts split_labeled_unlabeled(const std::vector<std::int64_t>& totals, double beta,
                                    std::uint64_t seed = 0);

Dataset synth_gaussian_mixture(const MixtureSpec& spec,
                               const std::vector<std::int64_t>& labeled_counts,
                               const std::vector<std::int64_t>& unlabeled_counts);

// Balanced draw (per_class examples of every class) used for test sets.
std::vector<LabeledExample> synth_balanced_sample(const MixtureSpec& spec, int per_class,
                                                  std::uint64_t seed);

enum class AugmentMode { kWeak, kStrong };

// Additive Gaussian noise scaled to the labeled data spread; strong views
// additionally zero-mask floor(mask_rate * dim) coordinates.
struct Augmenter {
  std::vector<double> scale;  // per-dimension data scale
  double weak_factor = 0.05;
  double strong_factor = 0.2;
  double mask_rate = 0.2;

  static Augmenter from_dataset(const Dataset& dataset);

  std::vector<double> augment(const std::vector<double>& x, AugmentMode mode,
                              std::uint64_t seed) const;
};

// Files are headerless CSV ('.' decimal point): labeled rows are features
// then an integer label; unlabeled rows may carry a trailing hidden label.
// num_classes == 0 infers L from the labels seen.
Dataset load_csv_dataset(const std::string& labeled_path, const std::string& unlabeled_path,
                         int num_classes = 0);

// Loads a labeled-format CSV on its own (used for test sets).
std::vector<LabeledExample> load_labeled_csv(const std::string& path, int num_classes = 0);

void write_labeled_csv(const std::string& path, const std::vector<LabeledExample>& rows);
void write_unlabeled_csv(const std::string& path, const std::vector<UnlabeledExample>& rows);

struct ManifestInfo {
  int num_classes = 0;
  double gamma = 0.0;
  double beta = 0.0;
  std::uint64_t seed = 0;
  int feature_dim = 0;
  double sigma = 0.0;
  std::vector<std::int64_t> labeled_counts;
  std::vector<std::int64_t> unlabeled_counts;
};

void write_manifest(const std::string& path, const ManifestInfo& info);

}  // namespace tras
