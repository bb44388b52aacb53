#include "tras/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tras {

namespace {
constexpr double kKlClamp = 1e-12;
}

bool is_valid_prob_dist(const ProbDist& p, double tol) {
  if (p.values.empty()) return false;
  double sum = 0.0;
  for (double v : p.values) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0 + tol) return false;
    sum += v;
  }
  return std::abs(sum - 1.0) <= tol;
}

ClassPrior make_class_prior(const std::vector<std::int64_t>& counts, double smoothing) {
  if (counts.size() < 2) throw std::invalid_argument("class prior needs at least 2 classes");
  if (smoothing < 0.0) throw std::invalid_argument("smoothing must be >= 0");
  std::int64_t total = 0;
  for (std::size_t l = 0; l < counts.size(); ++l) {
    if (counts[l] < 0) throw std::invalid_argument("negative class count");
    if (counts[l] == 0 && smoothing == 0.0) {
      throw std::invalid_argument("degenerate prior: class " + std::to_string(l) +
                                  " has zero count and smoothing is 0 (log pi undefined)");
    }
    total += counts[l];
  }
  ClassPrior prior;
  prior.counts = counts;
  const double denom = static_cast<double>(total) + smoothing * static_cast<double>(counts.size());
  prior.probs.resize(counts.size());
  prior.log_probs.resize(counts.size());
  for (std::size_t l = 0; l < counts.size(); ++l) {
    prior.probs[l] = (static_cast<double>(counts[l]) + smoothing) / denom;
    prior.log_probs[l] = std::log(prior.probs[l]);
  }
  return prior;
}

ClassPrior estimate_class_prior(const std::vector<int>& labels, int num_classes,
                                double smoothing) {
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw std::invalid_argument("label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  return make_class_prior(counts, smoothing);
}

AdjustmentSchedule make_adjustment_schedule(double A, double B, const ClassPrior& prior) {
  if (A < 0.0 || B < 0.0) throw std::invalid_argument("A and B must be >= 0");
  AdjustmentSchedule sched;
  sched.A = A;
  sched.B = B;
  sched.alpha = alpha_weights(prior);
  return sched;
}

ProbDist softmax(const Logits& z) {
  ProbDist out;
  out.values.resize(z.size());
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out.values[i] = std::exp(z[i] - m);
    sum += out.values[i];
  }
  for (double& v : out.values) v /= sum;
  return out;
}

double log_sum_exp(const Logits& z) {
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - m);
  return m + std::log(sum);
}

double ce_loss(int y, const Logits& z) {
  return log_sum_exp(z) - z[static_cast<std::size_t>(y)];
}

double da_ce_loss(int y, const Logits& z, const ClassPrior& prior, double tau) {
  Logits shifted(z.size());
  for (std::size_t l = 0; l < z.size(); ++l) shifted[l] = z[l] + tau * prior.log_probs[l];
  return ce_loss(y, shifted);
}

double kl_div(const ProbDist& p, const ProbDist& q) {
  double sum = 0.0;
  for (std::size_t l = 0; l < p.values.size(); ++l) {
    if (p.values[l] <= 0.0) continue;
    sum += p.values[l] * std::log(p.values[l] / std::max(q.values[l], kKlClamp));
  }
  return sum;
}

ProbDist alpha_weights(const ClassPrior& prior) {
  ProbDist alpha;
  alpha.values.resize(prior.probs.size());
  double sum = 0.0;
  for (std::size_t l = 0; l < prior.probs.size(); ++l) {
    alpha.values[l] = 1.0 / prior.probs[l];
    sum += alpha.values[l];
  }
  for (double& v : alpha.values) v /= sum;
  return alpha;
}

double tau_of(int pseudo_label, const AdjustmentSchedule& sched) {
  return sched.tau(pseudo_label);
}

ProbDist transform_teacher_logits(const Logits& z_teacher, int pseudo_label,
                                  const ClassPrior& prior, const AdjustmentSchedule& sched) {
  const double tau = sched.tau(pseudo_label);
  Logits adjusted(z_teacher.size());
  for (std::size_t l = 0; l < z_teacher.size(); ++l) {
    adjusted[l] = z_teacher[l] - tau * prior.log_probs[l];
  }
  return softmax(adjusted);
}

}  // namespace tras
