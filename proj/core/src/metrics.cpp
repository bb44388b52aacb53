#include "tras/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace tras {

namespace {

bool in_group(int label, const std::vector<int>& group) {
  return std::find(group.begin(), group.end(), label) != group.end();
}

struct GroupCounts {
  std::int64_t predicted_in_group = 0;  // mask-passing predictions landing in the group
  std::int64_t correct_in_group = 0;    // mask-passing, correct, true label in the group
  std::int64_t true_in_group = 0;       // all unlabeled examples whose true label is in the group
};

}  // namespace

ClassGrouping ClassGrouping::default_for(int num_classes) {
  if (num_classes < 2) throw std::invalid_argument("grouping needs at least 2 classes");
  ClassGrouping g;
  // Classes are ordered most to least frequent: head = top 30%, tail =
  // bottom 30%, torso = the rest; minority = the rarer half.
  int head_n = std::max(1, static_cast<int>(std::floor(0.3 * num_classes)));
  int tail_n = std::max(1, static_cast<int>(std::floor(0.3 * num_classes)));
  while (head_n + tail_n > num_classes) {
    if (tail_n > 1) --tail_n;
    else --head_n;
  }
  for (int l = 0; l < head_n; ++l) g.head.push_back(l);
  for (int l = head_n; l < num_classes - tail_n; ++l) g.torso.push_back(l);
  for (int l = num_classes - tail_n; l < num_classes; ++l) g.tail.push_back(l);
  for (int l = (num_classes + 1) / 2; l < num_classes; ++l) g.minority.push_back(l);
  if (g.minority.empty()) g.minority.push_back(num_classes - 1);
  return g;
}

bool ClassGrouping::is_partition(int num_classes) const {
  std::vector<int> seen(static_cast<std::size_t>(num_classes), 0);
  for (const std::vector<int>* group : {&head, &torso, &tail}) {
    for (int l : *group) {
      if (l < 0 || l >= num_classes) return false;
      ++seen[static_cast<std::size_t>(l)];
    }
  }
  return std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }) && !minority.empty();
}

ConfusionMatrix confusion_matrix(const std::vector<int>& true_labels,
                                 const std::vector<int>& predicted_labels, int num_classes) {
  if (true_labels.size() != predicted_labels.size()) {
    throw std::invalid_argument("confusion_matrix: label vectors differ in length");
  }
  ConfusionMatrix m(static_cast<std::size_t>(num_classes),
                    std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 0));
  for (std::size_t i = 0; i < true_labels.size(); ++i) {
    const int t = true_labels[i];
    const int p = predicted_labels[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes) {
      throw std::invalid_argument("confusion_matrix: label out of range at index " +
                                  std::to_string(i));
    }
    ++m[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return m;
}

AccuracySuite accuracy_suite(const ConfusionMatrix& confusion, const ClassGrouping& grouping) {
  AccuracySuite suite;
  const std::size_t L = confusion.size();
  suite.per_class_recall.resize(L, 0.0);
  std::int64_t total = 0;
  std::int64_t diagonal = 0;
  for (std::size_t i = 0; i < L; ++i) {
    std::int64_t row_sum = 0;
    for (std::size_t j = 0; j < L; ++j) row_sum += confusion[i][j];
    total += row_sum;
    diagonal += confusion[i][i];
    if (row_sum == 0) {
      suite.zero_support_classes.push_back(static_cast<int>(i));
    } else {
      suite.per_class_recall[i] =
          static_cast<double>(confusion[i][i]) / static_cast<double>(row_sum);
    }
  }
  suite.overall = total > 0 ? static_cast<double>(diagonal) / static_cast<double>(total) : 0.0;
  double minority_sum = 0.0;
  for (int l : grouping.minority) minority_sum += suite.per_class_recall[static_cast<std::size_t>(l)];
  suite.minority_accuracy =
      grouping.minority.empty() ? 0.0 : minority_sum / static_cast<double>(grouping.minority.size());
  return suite;
}

double geometric_mean(const std::vector<double>& per_class_recall, double floor) {
  if (per_class_recall.empty()) return 0.0;
  double log_sum = 0.0;
  for (double r : per_class_recall) log_sum += std::log(std::max(r, floor));
  return std::exp(log_sum / static_cast<double>(per_class_recall.size()));
}

GroupQuality pseudo_label_quality(const std::vector<int>& hidden_labels,
                                  const std::vector<int>& pseudo_labels,
                                  const std::vector<bool>& mask_flags,
                                  const ClassGrouping& grouping) {
  if (hidden_labels.size() != pseudo_labels.size() || hidden_labels.size() != mask_flags.size()) {
    throw std::invalid_argument("pseudo_label_quality: input vectors differ in length");
  }
  GroupCounts head, torso, tail;
  auto counts_for = [&](int label) -> GroupCounts* {
    if (in_group(label, grouping.head)) return &head;
    if (in_group(label, grouping.torso)) return &torso;
    if (in_group(label, grouping.tail)) return &tail;
    return nullptr;
  };
  for (std::size_t i = 0; i < hidden_labels.size(); ++i) {
    if (hidden_labels[i] >= 0) {
      if (GroupCounts* g = counts_for(hidden_labels[i])) ++g->true_in_group;
    }
    if (!mask_flags[i]) continue;
    if (GroupCounts* g = counts_for(pseudo_labels[i])) ++g->predicted_in_group;
    if (hidden_labels[i] >= 0 && pseudo_labels[i] == hidden_labels[i]) {
      if (GroupCounts* g = counts_for(hidden_labels[i])) ++g->correct_in_group;
    }
  }
  GroupQuality q;
  auto fill = [](const GroupCounts& g, double& precision, double& recall, bool& undefined) {
    if (g.predicted_in_group > 0) {
      precision = static_cast<double>(g.correct_in_group) / static_cast<double>(g.predicted_in_group);
    } else {
      precision = 0.0;
      undefined = true;
    }
    recall = g.true_in_group > 0
                 ? static_cast<double>(g.correct_in_group) / static_cast<double>(g.true_in_group)
                 : 0.0;
  };
  fill(head, q.head_precision, q.head_recall, q.head_precision_undefined);
  fill(torso, q.torso_precision, q.torso_recall, q.torso_precision_undefined);
  fill(tail, q.tail_precision, q.tail_recall, q.tail_precision_undefined);
  return q;
}

double balancedness(const std::vector<ProbDist>& prob_dists) {
  if (prob_dists.empty()) throw std::invalid_argument("balancedness: empty distribution list");
  const std::size_t L = prob_dists[0].size();
  ProbDist mean;
  mean.values.assign(L, 0.0);
  for (const ProbDist& p : prob_dists) {
    for (std::size_t l = 0; l < L; ++l) mean.values[l] += p.values[l];
  }
  for (double& v : mean.values) v /= static_cast<double>(prob_dists.size());
  ProbDist uniform;
  uniform.values.assign(L, 1.0 / static_cast<double>(L));
  return kl_div(mean, uniform);
}

std::string metrics_report_to_json(const MetricsReport& report) {
  nlohmann::json j;
  j["overall_accuracy"] = report.overall_accuracy;
  j["per_class_recall"] = report.per_class_recall;
  j["minority_accuracy"] = report.minority_accuracy;
  j["gm"] = report.gm;
  j["confusion"] = report.confusion;
  j["group_precision"] = {{"head", report.group_quality.head_precision},
                          {"torso", report.group_quality.torso_precision},
                          {"tail", report.group_quality.tail_precision}};
  j["group_recall"] = {{"head", report.group_quality.head_recall},
                       {"torso", report.group_quality.torso_recall},
                       {"tail", report.group_quality.tail_recall}};
  j["balancedness_transformed"] = report.balancedness_transformed;
  j["balancedness_raw"] = report.balancedness_raw;
  j["zero_support_classes"] = report.zero_support_classes;
  return j.dump(2);
}

void write_confusion_csv(const std::string& path, const ConfusionMatrix& confusion) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const std::vector<std::int64_t>& row : confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) out << (j == 0 ? "" : ",") << row[j];
    out << "\n";
  }
}

}  // namespace tras
