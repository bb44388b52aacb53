#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tras/losses.hpp"

namespace tras {

// Dense layer, weights stored row-major (out_dim x in_dim).
struct AffineLayer {
  int in_dim = 0;
  int out_dim = 0;
  std::vector<double> weights;
  std::vector<double> bias;
};

// Shared feature extractor plus two linear classifier heads. The teacher
// head is trained by the SSL objective, the student head by imitation of
// the transformed teacher distribution.
struct ModelParams {
  int input_dim = 0;
  int feature_dim = 0;
  int num_classes = 0;
  std::vector<AffineLayer> backbone;
  AffineLayer teacher_head;
  AffineLayer student_head;
};

struct GradientSet {
  std::vector<AffineLayer> backbone;
  AffineLayer teacher_head;
  AffineLayer student_head;
};

struct ForwardOutput {
  std::vector<double> features;
  Logits teacher_logits;
  Logits student_logits;
  ProbDist teacher_probs;
  ProbDist student_probs;
  int pseudo_label = 0;  // argmax over raw teacher logits
};

// He-style init: weights ~ N(0, 2/fan_in), biases zero, deterministic in seed.
// Empty hidden_dims makes the backbone an identity map.
ModelParams init_params(int input_dim, const std::vector<int>& hidden_dims, int num_classes,
                        std::uint64_t seed);

GradientSet zero_gradients(const ModelParams& params);

ForwardOutput forward(const ModelParams& params, const std::vector<double>& x);

// Loss terms attached to one forward pass. The teacher CE term backpropagates
// through the teacher head and the backbone; the student terms backpropagate
// through the student head and (unless blocked) the backbone. The KL target
// is a constant: nothing flows into the teacher branch from it.
enum class LossKind { kTeacherCE, kStudentDACE, kStudentKL };

struct LossTerm {
  LossKind kind = LossKind::kTeacherCE;
  int label = -1;      // class target for kTeacherCE / kStudentDACE
  double tau = 0.0;    // prior scaling for kStudentDACE
  ProbDist target;     // stop-gradient target for kStudentKL
  double weight = 1.0;
  int tag = 0;         // caller-defined accounting bucket (< kNumLossTags)
};

inline constexpr std::size_t kNumLossTags = 4;

struct ExampleContribution {
  std::vector<double> input;
  std::vector<LossTerm> terms;
};

struct BackwardOptions {
  // tras-minus ablation: student-branch gradients never reach the backbone.
  bool block_student_backbone = false;
  const ClassPrior* prior = nullptr;  // required by kStudentDACE terms
};

struct BackwardResult {
  GradientSet grads;
  double loss = 0.0;
  double teacher_ce = 0.0;
  double student_dace = 0.0;
  double student_kl = 0.0;
  std::array<double, kNumLossTags> tag_sums{};
};

BackwardResult backward(const ModelParams& params,
                        const std::vector<ExampleContribution>& contributions,
                        const BackwardOptions& options);

// One feature row per input, dataset order preserved.
std::vector<std::vector<double>> export_features(const ModelParams& params,
                                                 const std::vector<std::vector<double>>& inputs);
void write_features_csv(const std::string& path, const std::vector<std::vector<double>>& rows);

// Flat views over all parameters in a fixed canonical order (backbone weights
// then biases, teacher head, student head). Gradient/optimizer buffers share
// the same order.
std::vector<double*> param_pointers(ModelParams& params);
std::vector<const double*> param_pointers(const ModelParams& params);
std::vector<double*> param_pointers(GradientSet& grads);
std::vector<const double*> param_pointers(const GradientSet& grads);

std::size_t param_count(const ModelParams& params);

}  // namespace tras
