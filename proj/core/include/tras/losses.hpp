#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace tras {

// Unnormalized per-class scores. Entries must be finite.
using Logits = std::vector<double>;

// A normalized probability vector over classes.
struct ProbDist {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
};

bool is_valid_prob_dist(const ProbDist& p, double tol = 1e-9);

// Per-class counts and probabilities estimated from labeled data. log_probs
// is cached because every logit adjustment consumes log pi.
struct ClassPrior {
  std::vector<std::int64_t> counts;
  std::vector<double> probs;
  std::vector<double> log_probs;

  std::size_t num_classes() const { return probs.size(); }
};

// probs[l] = (count_l + smoothing) / (N + L * smoothing). Throws
// std::invalid_argument("degenerate prior") if a class count is zero and
// smoothing is zero, since log pi would be undefined.
ClassPrior make_class_prior(const std::vector<std::int64_t>& counts, double smoothing = 0.0);
ClassPrior estimate_class_prior(const std::vector<int>& labels, int num_classes,
                                double smoothing = 0.0);

// Instance-dependent scaling for the teacher logit transformation:
// tau(pseudo_label) = A * alpha[pseudo_label] + B, alpha = softmax(-log pi).
struct AdjustmentSchedule {
  double A = 0.0;
  double B = 0.0;
  ProbDist alpha;

  double tau(int pseudo_label) const { return A * alpha.values[static_cast<std::size_t>(pseudo_label)] + B; }
};

AdjustmentSchedule make_adjustment_schedule(double A, double B, const ClassPrior& prior);

// Numerically stable softmax (max subtraction).
ProbDist softmax(const Logits& z);
double log_sum_exp(const Logits& z);

// -log softmax(z)[y]
double ce_loss(int y, const Logits& z);

// Cross-entropy on logits shifted by +tau*log pi. Enlarges minority-class
// margins; reduces to ce_loss for tau=0 or a uniform prior.
double da_ce_loss(int y, const Logits& z, const ClassPrior& prior, double tau);

// sum_l p_l * log(p_l / q_l), q clamped at 1e-12, 0*log 0 := 0.
double kl_div(const ProbDist& p, const ProbDist& q);

// alpha_l = (1/pi_l) / sum_k (1/pi_k); the closed form of softmax(-log pi).
ProbDist alpha_weights(const ClassPrior& prior);

double tau_of(int pseudo_label, const AdjustmentSchedule& sched);

// softmax(z_T - tau(pseudo_label) * log pi): flattens head-biased teacher
// predictions before the student imitates them.
ProbDist transform_teacher_logits(const Logits& z_teacher, int pseudo_label,
                                  const ClassPrior& prior, const AdjustmentSchedule& sched);

inline int argmax(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace tras
