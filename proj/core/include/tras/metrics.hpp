#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tras/losses.hpp"

namespace tras {

// Disjoint head/torso/tail frequency groups plus the minority set used for
// minority-class accuracy.
struct ClassGrouping {
  std::vector<int> head;
  std::vector<int> torso;
  std::vector<int> tail;
  std::vector<int> minority;

  static ClassGrouping default_for(int num_classes);
  bool is_partition(int num_classes) const;
};

using ConfusionMatrix = std::vector<std::vector<std::int64_t>>;

// entry (i, j) = count of true class i predicted as class j.
ConfusionMatrix confusion_matrix(const std::vector<int>& true_labels,
                                 const std::vector<int>& predicted_labels, int num_classes);

struct AccuracySuite {
  double overall = 0.0;
  std::vector<double> per_class_recall;
  double minority_accuracy = 0.0;
  std::vector<int> zero_support_classes;  // recall reported as 0 for these
};

AccuracySuite accuracy_suite(const ConfusionMatrix& confusion, const ClassGrouping& grouping);

// (prod_l max(recall_l, floor))^(1/L)
double geometric_mean(const std::vector<double>& per_class_recall, double floor = 1e-3);

struct GroupQuality {
  double head_precision = 0.0, torso_precision = 0.0, tail_precision = 0.0;
  double head_recall = 0.0, torso_recall = 0.0, tail_recall = 0.0;
  // set when a group had no mask-passing predictions (precision reported 0)
  bool head_precision_undefined = false;
  bool torso_precision_undefined = false;
  bool tail_precision_undefined = false;
};

// Precision over mask-passing examples; recall over all unlabeled examples
// (an unmasked example counts as missed).
GroupQuality pseudo_label_quality(const std::vector<int>& hidden_labels,
                                  const std::vector<int>& pseudo_labels,
                                  const std::vector<bool>& mask_flags,
                                  const ClassGrouping& grouping);

// KL(mean of the distributions || uniform); 0 means perfectly balanced.
double balancedness(const std::vector<ProbDist>& prob_dists);

struct MetricsReport {
  double overall_accuracy = 0.0;
  std::vector<double> per_class_recall;
  double minority_accuracy = 0.0;
  double gm = 0.0;
  ConfusionMatrix confusion;
  GroupQuality group_quality;
  double balancedness_transformed = 0.0;
  double balancedness_raw = 0.0;
  std::vector<int> zero_support_classes;
};

std::string metrics_report_to_json(const MetricsReport& report);
void write_confusion_csv(const std::string& path, const ConfusionMatrix& confusion);

}  // namespace tras
