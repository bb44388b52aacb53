#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tras/data.hpp"
#include "tras/losses.hpp"
#include "tras/metrics.hpp"
#include "tras/model.hpp"

namespace tras {

enum class TrainMode { kShared, kTwoStage, kTrasMinus };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);

struct TrainConfig {
  double A = 2.0;
  double B = 2.0;
  double tau_labeled = 1.0;
  double threshold = 0.95;
  int warmup_epochs = 10;
  int epochs = 100;
  int batches_per_epoch = 16;
  int batch_size = 64;
  double learning_rate = 0.002;
  double lr_decay = 1.0;  // per-epoch multiplier; 1 = constant learning rate
  double ema_decay = 0.999;
  bool eval_with_ema = true;
  TrainMode mode = TrainMode::kShared;
  std::vector<int> hidden_dims = {64, 64};

  // ablations
  bool disable_teacher_transform = false;  // drop the A=0,B=1 pseudo-labeling adjustment
  bool use_plain_ce_labeled = false;       // replace the student's DA-CE with plain CE
  bool disable_student_mask = false;       // imitate the teacher on every unlabeled example
  bool mean_normalize = false;             // divide unsupervised sums by the unlabeled batch size

  // optional override for the class prior; empty means estimate from labeled counts
  std::vector<std::int64_t> prior_counts;
  double prior_smoothing = 0.0;  // Laplace smoothing; zero-count classes error without it

  std::uint64_t seed = 1;

  void validate() const;  // throws std::invalid_argument naming the bad field
};

struct OptimizerState {
  GradientSet first_moment;
  GradientSet second_moment;
  long step = 0;
};

OptimizerState make_optimizer_state(const ModelParams& params);

// Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) with bias correction.
void adam_step(ModelParams& params, const GradientSet& grads, OptimizerState& state, double lr);

// ema <- decay * ema + (1 - decay) * params, elementwise.
void ema_update(ModelParams& ema_params, const ModelParams& params, double decay);

struct LabeledBatch {
  std::vector<std::vector<double>> views;  // weakly augmented inputs
  std::vector<int> labels;
};

struct LossBreakdown {
  double total = 0.0;
  double supervised = 0.0;
  double unsupervised = 0.0;
  int mask_count = 0;
};

// FixMatch objective on the teacher branch: labeled CE plus confidence-masked
// CE between weak-view pseudo-labels and strong-view logits. Pseudo-labels
// and the mask use the A=0,B=1 adjusted scores unless disabled.
LossBreakdown ssl_loss(const ModelParams& params, const LabeledBatch& labeled,
                       const UnlabeledBatch& unlabeled, const ClassPrior& prior,
                       const TrainConfig& config);

// Student objective: labeled DA-CE plus confidence-masked KL between the
// transformed (stop-gradient) teacher distribution and the student's output.
LossBreakdown tras_loss(const ModelParams& params, const LabeledBatch& labeled,
                        const UnlabeledBatch& unlabeled, const ClassPrior& prior,
                        const AdjustmentSchedule& sched, const TrainConfig& config);

struct TotalLossResult {
  double loss = 0.0;
  GradientSet grads;
  double ssl_supervised = 0.0;
  double ssl_unsupervised = 0.0;
  double tras_supervised = 0.0;
  double tras_unsupervised = 0.0;
  int teacher_mask_count = 0;
  int student_mask_count = 0;
};

// Joint objective for one step. Before warmup_epochs only the KL imitation
// term is gated off; the teacher terms and the student's labeled DA-CE run
// from epoch 0 so the student head never cold-starts.
TotalLossResult total_loss_and_grads(const ModelParams& params, const LabeledBatch& labeled,
                                     const UnlabeledBatch& unlabeled, const ClassPrior& prior,
                                     const AdjustmentSchedule& sched, const TrainConfig& config,
                                     int epoch);

struct EpochRecord {
  int epoch = 0;
  int stage = 1;  // two-stage training logs stage 1 then stage 2
  double lr = 0.0;
  double loss_total = 0.0;
  double ssl_supervised = 0.0;
  double ssl_unsupervised = 0.0;
  double tras_supervised = 0.0;
  double tras_unsupervised = 0.0;
  double teacher_mask_rate = 0.0;
  double student_mask_rate = 0.0;
  GroupQuality pseudo_quality;
  double balancedness_transformed = 0.0;
  double balancedness_raw = 0.0;
  double test_student_overall = 0.0;
  double test_student_minority = 0.0;
  double test_student_gm = 0.0;
  double test_teacher_overall = 0.0;
  double test_teacher_minority = 0.0;
  double test_teacher_gm = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

std::string epoch_record_to_json(const EpochRecord& record);
void write_train_log(const std::string& path, const TrainLog& log);

struct EvalContext {
  std::vector<LabeledExample> test_set;
  ClassGrouping grouping;
  double gm_floor = 1e-3;
};

struct TrainResult {
  ModelParams params;
  ModelParams ema_params;
  OptimizerState opt_state;
  TrainLog log;
};

using EpochObserver =
    std::function<void(int epoch, const ModelParams& params, const ModelParams& ema_params)>;

TrainResult train(const Dataset& dataset, const TrainConfig& config,
                  const EvalContext* eval = nullptr, const EpochObserver& observer = nullptr);

// Student-classifier predictions (the inference path).
std::vector<int> predict_student(const ModelParams& params,
                                 const std::vector<LabeledExample>& examples);
std::vector<int> predict_teacher(const ModelParams& params,
                                 const std::vector<LabeledExample>& examples);

// Checkpointing: one JSON blob holding parameters, EMA parameters, optimizer
// state, and the training configuration.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const ModelParams& ema_params, const OptimizerState& state,
                     const TrainConfig& config);

struct Checkpoint {
  ModelParams params;
  ModelParams ema_params;
  OptimizerState state;
  TrainConfig config;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace tras
