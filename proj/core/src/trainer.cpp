#include "tras/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tras/rng.hpp"

namespace tras {

namespace {

using nlohmann::json;

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// seed stream tags
constexpr std::uint64_t kInitStream = 101;
constexpr std::uint64_t kShuffleStream = 202;
constexpr std::uint64_t kAugmentStream = 303;
constexpr std::uint64_t kStage2Stream = 404;

// accounting buckets used with model::backward
constexpr int kTagSslSupervised = 0;
constexpr int kTagSslUnsupervised = 1;
constexpr int kTagTrasSupervised = 2;
constexpr int kTagTrasUnsupervised = 3;

// Pseudo-labeling scores: the teacher's weak-view logits, adjusted by
// -1 * log pi (the A=0, B=1 transformation) unless the ablation disables it.
Logits pseudo_scores(const Logits& z_teacher_weak, const ClassPrior& prior, bool adjust) {
  if (!adjust) return z_teacher_weak;
  Logits scores(z_teacher_weak.size());
  for (std::size_t l = 0; l < scores.size(); ++l) {
    scores[l] = z_teacher_weak[l] - prior.log_probs[l];
  }
  return scores;
}

double max_prob(const ProbDist& p) {
  return *std::max_element(p.values.begin(), p.values.end());
}

struct AssembleOptions {
  bool kl_active = true;
  bool include_teacher_terms = true;
  const ModelParams* frozen_teacher = nullptr;  // two-stage: stage-1 model supplies z^T
};

TotalLossResult assemble_and_backward(const ModelParams& params, const LabeledBatch& labeled,
                                      const UnlabeledBatch& unlabeled, const ClassPrior& prior,
                                      const AdjustmentSchedule& sched, const TrainConfig& config,
                                      const AssembleOptions& opts) {
  if (labeled.views.size() != labeled.labels.size()) {
    throw std::invalid_argument("labeled batch views/labels length mismatch");
  }
  const double tau_sup = config.use_plain_ce_labeled ? 0.0 : config.tau_labeled;
  const double unsup_weight =
      config.mean_normalize && unlabeled.size() > 0 ? 1.0 / static_cast<double>(unlabeled.size())
                                                    : 1.0;

  std::vector<ExampleContribution> contributions;
  contributions.reserve(labeled.views.size() + 2 * unlabeled.size());

  for (std::size_t i = 0; i < labeled.views.size(); ++i) {
    ExampleContribution contrib;
    contrib.input = labeled.views[i];
    if (opts.include_teacher_terms) {
      contrib.terms.push_back({LossKind::kTeacherCE, labeled.labels[i], 0.0, {}, 1.0,
                               kTagSslSupervised});
    }
    contrib.terms.push_back({LossKind::kStudentDACE, labeled.labels[i], tau_sup, {}, 1.0,
                             kTagTrasSupervised});
    contributions.push_back(std::move(contrib));
  }

  TotalLossResult result;
  for (std::size_t j = 0; j < unlabeled.size(); ++j) {
    const std::vector<double>& weak = unlabeled.weak_views[j];
    const ModelParams& teacher_net = opts.frozen_teacher ? *opts.frozen_teacher : params;
    ForwardOutput fw_weak = forward(teacher_net, weak);

    const Logits scores =
        pseudo_scores(fw_weak.teacher_logits, prior, !config.disable_teacher_transform);
    const ProbDist score_probs = softmax(scores);
    const int pseudo_label = argmax(scores);
    const bool teacher_mask = max_prob(score_probs) >= config.threshold;

    // Student confidence comes from the training network (fresh forward when
    // the teacher is an external frozen model).
    const ProbDist student_probs =
        opts.frozen_teacher ? forward(params, weak).student_probs : fw_weak.student_probs;
    const bool student_mask =
        config.disable_student_mask || max_prob(student_probs) >= config.threshold;

    if (teacher_mask) ++result.teacher_mask_count;
    if (student_mask) ++result.student_mask_count;

    if (opts.kl_active && student_mask) {
      ExampleContribution contrib;
      contrib.input = weak;
      contrib.terms.push_back(
          {LossKind::kStudentKL, -1, 0.0,
           transform_teacher_logits(fw_weak.teacher_logits, pseudo_label, prior, sched),
           unsup_weight, kTagTrasUnsupervised});
      contributions.push_back(std::move(contrib));
    }
    if (opts.include_teacher_terms && teacher_mask) {
      ExampleContribution contrib;
      contrib.input = unlabeled.strong_views[j];
      contrib.terms.push_back({LossKind::kTeacherCE, pseudo_label, 0.0, {}, unsup_weight,
                               kTagSslUnsupervised});
      contributions.push_back(std::move(contrib));
    }
  }

  BackwardOptions b_opts;
  b_opts.prior = &prior;
  b_opts.block_student_backbone = config.mode == TrainMode::kTrasMinus;
  BackwardResult back = backward(params, contributions, b_opts);

  result.grads = std::move(back.grads);
  result.ssl_supervised = back.tag_sums[kTagSslSupervised];
  result.ssl_unsupervised = back.tag_sums[kTagSslUnsupervised];
  result.tras_supervised = back.tag_sums[kTagTrasSupervised];
  result.tras_unsupervised = back.tag_sums[kTagTrasUnsupervised];
  result.loss = (result.ssl_supervised + result.ssl_unsupervised) +
                (result.tras_supervised + result.tras_unsupervised);
  return result;
}

json affine_to_json(const AffineLayer& layer) {
  return json{{"in", layer.in_dim}, {"out", layer.out_dim}, {"weights", layer.weights},
              {"bias", layer.bias}};
}

AffineLayer affine_from_json(const json& j) {
  AffineLayer layer;
  layer.in_dim = j.at("in").get<int>();
  layer.out_dim = j.at("out").get<int>();
  layer.weights = j.at("weights").get<std::vector<double>>();
  layer.bias = j.at("bias").get<std::vector<double>>();
  return layer;
}

json params_to_json(const ModelParams& params) {
  json backbone = json::array();
  for (const AffineLayer& layer : params.backbone) backbone.push_back(affine_to_json(layer));
  return json{{"input_dim", params.input_dim},
              {"feature_dim", params.feature_dim},
              {"num_classes", params.num_classes},
              {"backbone", backbone},
              {"teacher_head", affine_to_json(params.teacher_head)},
              {"student_head", affine_to_json(params.student_head)}};
}

ModelParams params_from_json(const json& j) {
  ModelParams params;
  params.input_dim = j.at("input_dim").get<int>();
  params.feature_dim = j.at("feature_dim").get<int>();
  params.num_classes = j.at("num_classes").get<int>();
  for (const json& layer : j.at("backbone")) params.backbone.push_back(affine_from_json(layer));
  params.teacher_head = affine_from_json(j.at("teacher_head"));
  params.student_head = affine_from_json(j.at("student_head"));
  return params;
}

json grads_to_json(const GradientSet& grads) {
  json backbone = json::array();
  for (const AffineLayer& layer : grads.backbone) backbone.push_back(affine_to_json(layer));
  return json{{"backbone", backbone},
              {"teacher_head", affine_to_json(grads.teacher_head)},
              {"student_head", affine_to_json(grads.student_head)}};
}

GradientSet grads_from_json(const json& j) {
  GradientSet grads;
  for (const json& layer : j.at("backbone")) grads.backbone.push_back(affine_from_json(layer));
  grads.teacher_head = affine_from_json(j.at("teacher_head"));
  grads.student_head = affine_from_json(j.at("student_head"));
  return grads;
}

json config_to_json(const TrainConfig& config) {
  return json{{"A", config.A},
              {"B", config.B},
              {"tau_labeled", config.tau_labeled},
              {"threshold", config.threshold},
              {"warmup_epochs", config.warmup_epochs},
              {"epochs", config.epochs},
              {"batches_per_epoch", config.batches_per_epoch},
              {"batch_size", config.batch_size},
              {"learning_rate", config.learning_rate},
              {"lr_decay", config.lr_decay},
              {"ema_decay", config.ema_decay},
              {"eval_with_ema", config.eval_with_ema},
              {"mode", to_string(config.mode)},
              {"hidden_dims", config.hidden_dims},
              {"disable_teacher_transform", config.disable_teacher_transform},
              {"use_plain_ce_labeled", config.use_plain_ce_labeled},
              {"disable_student_mask", config.disable_student_mask},
              {"mean_normalize", config.mean_normalize},
              {"prior_counts", config.prior_counts},
              {"prior_smoothing", config.prior_smoothing},
              {"seed", config.seed}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig config;
  config.A = j.at("A").get<double>();
  config.B = j.at("B").get<double>();
  config.tau_labeled = j.at("tau_labeled").get<double>();
  config.threshold = j.at("threshold").get<double>();
  config.warmup_epochs = j.at("warmup_epochs").get<int>();
  config.epochs = j.at("epochs").get<int>();
  config.batches_per_epoch = j.at("batches_per_epoch").get<int>();
  config.batch_size = j.at("batch_size").get<int>();
  config.learning_rate = j.at("learning_rate").get<double>();
  config.lr_decay = j.at("lr_decay").get<double>();
  config.ema_decay = j.at("ema_decay").get<double>();
  config.eval_with_ema = j.at("eval_with_ema").get<bool>();
  config.mode = parse_train_mode(j.at("mode").get<std::string>());
  config.hidden_dims = j.at("hidden_dims").get<std::vector<int>>();
  config.disable_teacher_transform = j.at("disable_teacher_transform").get<bool>();
  config.use_plain_ce_labeled = j.at("use_plain_ce_labeled").get<bool>();
  config.disable_student_mask = j.at("disable_student_mask").get<bool>();
  config.mean_normalize = j.at("mean_normalize").get<bool>();
  config.prior_counts = j.at("prior_counts").get<std::vector<std::int64_t>>();
  config.prior_smoothing = j.at("prior_smoothing").get<double>();
  config.seed = j.at("seed").get<std::uint64_t>();
  return config;
}

struct TestSnapshot {
  double overall = 0.0;
  double minority = 0.0;
  double gm = 0.0;
};

TestSnapshot snapshot_metrics(const std::vector<int>& predictions, const EvalContext& eval) {
  std::vector<int> truth(eval.test_set.size());
  for (std::size_t i = 0; i < eval.test_set.size(); ++i) truth[i] = eval.test_set[i].y;
  int num_classes = 0;
  for (int t : truth) num_classes = std::max(num_classes, t + 1);
  for (int p : predictions) num_classes = std::max(num_classes, p + 1);
  ConfusionMatrix confusion = confusion_matrix(truth, predictions, num_classes);
  AccuracySuite suite = accuracy_suite(confusion, eval.grouping);
  TestSnapshot snap;
  snap.overall = suite.overall;
  snap.minority = suite.minority_accuracy;
  snap.gm = geometric_mean(suite.per_class_recall, eval.gm_floor);
  return snap;
}

struct StageSetup {
  int stage = 1;
  int epoch_base = 0;
  int warmup_epochs = 0;
  bool include_teacher_terms = true;
  const ModelParams* frozen_teacher = nullptr;
  std::uint64_t init_seed = 0;
};

TrainResult run_stage(const Dataset& dataset, const TrainConfig& config, const StageSetup& setup,
                      const EvalContext* eval, const EpochObserver& observer) {
  const int input_dim = dataset.feature_dim();
  if (input_dim < 1) throw std::invalid_argument("dataset has no features");

  ClassPrior prior = config.prior_counts.empty()
                         ? make_class_prior(dataset.labeled_counts, config.prior_smoothing)
                         : make_class_prior(config.prior_counts, config.prior_smoothing);
  if (static_cast<int>(prior.num_classes()) != dataset.num_classes) {
    throw std::invalid_argument("prior size does not match dataset classes");
  }
  AdjustmentSchedule sched = make_adjustment_schedule(config.A, config.B, prior);
  Augmenter augmenter = Augmenter::from_dataset(dataset);

  TrainResult result;
  result.params = init_params(input_dim, config.hidden_dims, dataset.num_classes,
                              mix_seed(setup.init_seed, kInitStream));
  result.ema_params = result.params;
  OptimizerState opt = make_optimizer_state(result.params);

  const std::size_t n_labeled = dataset.labeled.size();
  const std::size_t n_unlabeled = dataset.unlabeled.size();
  std::vector<std::size_t> labeled_order(n_labeled);
  std::vector<std::size_t> unlabeled_order(n_unlabeled);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.learning_rate * std::pow(config.lr_decay, epoch);
    const bool kl_active = epoch >= setup.warmup_epochs;

    for (std::size_t i = 0; i < n_labeled; ++i) labeled_order[i] = i;
    for (std::size_t j = 0; j < n_unlabeled; ++j) unlabeled_order[j] = j;
    {
      Rng rng = make_rng(mix_seed(config.seed, kShuffleStream,
                                  static_cast<std::uint64_t>(setup.stage),
                                  static_cast<std::uint64_t>(epoch)));
      std::shuffle(labeled_order.begin(), labeled_order.end(), rng);
      std::shuffle(unlabeled_order.begin(), unlabeled_order.end(), rng);
    }

    EpochRecord record;
    record.epoch = setup.epoch_base + epoch;
    record.stage = setup.stage;
    record.lr = lr;
    long teacher_mask_total = 0;
    long student_mask_total = 0;
    long unlabeled_slots = 0;

    for (int step = 0; step < config.batches_per_epoch; ++step) {
      LabeledBatch labeled_batch;
      for (int k = 0; k < config.batch_size; ++k) {
        const std::size_t idx =
            labeled_order[(static_cast<std::size_t>(step) * config.batch_size + k) % n_labeled];
        const LabeledExample& ex = dataset.labeled[idx];
        labeled_batch.views.push_back(augmenter.augment(
            ex.x, AugmentMode::kWeak,
            mix_seed(config.seed, kAugmentStream, static_cast<std::uint64_t>(setup.stage),
                     static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(step),
                     static_cast<std::uint64_t>(k), 0)));
        labeled_batch.labels.push_back(ex.y);
      }

      UnlabeledBatch unlabeled_batch;
      if (n_unlabeled > 0) {
        for (int k = 0; k < config.batch_size; ++k) {
          const std::size_t idx =
              unlabeled_order[(static_cast<std::size_t>(step) * config.batch_size + k) %
                              n_unlabeled];
          const UnlabeledExample& ex = dataset.unlabeled[idx];
          unlabeled_batch.source_indices.push_back(idx);
          unlabeled_batch.weak_views.push_back(augmenter.augment(
              ex.x, AugmentMode::kWeak,
              mix_seed(config.seed, kAugmentStream, static_cast<std::uint64_t>(setup.stage),
                       static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(step),
                       static_cast<std::uint64_t>(k), 1)));
          unlabeled_batch.strong_views.push_back(augmenter.augment(
              ex.x, AugmentMode::kStrong,
              mix_seed(config.seed, kAugmentStream, static_cast<std::uint64_t>(setup.stage),
                       static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(step),
                       static_cast<std::uint64_t>(k), 2)));
        }
      }

      AssembleOptions opts;
      opts.kl_active = kl_active;
      opts.include_teacher_terms = setup.include_teacher_terms;
      opts.frozen_teacher = setup.frozen_teacher;
      TotalLossResult step_result = assemble_and_backward(
          result.params, labeled_batch, unlabeled_batch, prior, sched, config, opts);

      adam_step(result.params, step_result.grads, opt, lr);
      ema_update(result.ema_params, result.params, config.ema_decay);

      record.loss_total += step_result.loss;
      record.ssl_supervised += step_result.ssl_supervised;
      record.ssl_unsupervised += step_result.ssl_unsupervised;
      record.tras_supervised += step_result.tras_supervised;
      record.tras_unsupervised += step_result.tras_unsupervised;
      teacher_mask_total += step_result.teacher_mask_count;
      student_mask_total += step_result.student_mask_count;
      unlabeled_slots += static_cast<long>(unlabeled_batch.size());
    }

    if (unlabeled_slots > 0) {
      record.teacher_mask_rate =
          static_cast<double>(teacher_mask_total) / static_cast<double>(unlabeled_slots);
      record.student_mask_rate =
          static_cast<double>(student_mask_total) / static_cast<double>(unlabeled_slots);
    }

    // Epoch-end diagnostics on clean unlabeled inputs: pseudo-label quality
    // per frequency group and balancedness of the (transformed) teacher
    // distribution.
    if (n_unlabeled > 0) {
      const ModelParams& teacher_net =
          setup.frozen_teacher ? *setup.frozen_teacher : result.params;
      std::vector<int> hidden(n_unlabeled);
      std::vector<int> pseudo(n_unlabeled);
      std::vector<bool> mask(n_unlabeled);
      std::vector<ProbDist> transformed;
      std::vector<ProbDist> raw;
      transformed.reserve(n_unlabeled);
      raw.reserve(n_unlabeled);
      for (std::size_t j = 0; j < n_unlabeled; ++j) {
        const UnlabeledExample& ex = dataset.unlabeled[j];
        ForwardOutput fw = forward(teacher_net, ex.x);
        const Logits scores =
            pseudo_scores(fw.teacher_logits, prior, !config.disable_teacher_transform);
        const int pseudo_label = argmax(scores);
        ProbDist target =
            transform_teacher_logits(fw.teacher_logits, pseudo_label, prior, sched);
        hidden[j] = ex.hidden_y;
        // quality is measured on the distribution the student imitates
        pseudo[j] = argmax(target.values);
        mask[j] = max_prob(softmax(scores)) >= config.threshold;
        transformed.push_back(std::move(target));
        raw.push_back(fw.teacher_probs);
      }
      const ClassGrouping grouping =
          eval ? eval->grouping : ClassGrouping::default_for(dataset.num_classes);
      record.pseudo_quality = pseudo_label_quality(hidden, pseudo, mask, grouping);
      record.balancedness_transformed = balancedness(transformed);
      record.balancedness_raw = balancedness(raw);
    }

    if (eval != nullptr && !eval->test_set.empty()) {
      const ModelParams& eval_params =
          config.eval_with_ema ? result.ema_params : result.params;
      TestSnapshot student =
          snapshot_metrics(predict_student(eval_params, eval->test_set), *eval);
      record.test_student_overall = student.overall;
      record.test_student_minority = student.minority;
      record.test_student_gm = student.gm;
      const ModelParams& teacher_eval =
          setup.frozen_teacher ? *setup.frozen_teacher
                               : (config.eval_with_ema ? result.ema_params : result.params);
      TestSnapshot teacher =
          snapshot_metrics(predict_teacher(teacher_eval, eval->test_set), *eval);
      record.test_teacher_overall = teacher.overall;
      record.test_teacher_minority = teacher.minority;
      record.test_teacher_gm = teacher.gm;
    }

    result.log.epochs.push_back(record);
    if (observer) observer(record.epoch, result.params, result.ema_params);
  }

  result.opt_state = std::move(opt);
  return result;
}

}  // namespace

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kShared: return "shared";
    case TrainMode::kTwoStage: return "two-stage";
    case TrainMode::kTrasMinus: return "tras-minus";
  }
  return "shared";
}

TrainMode parse_train_mode(const std::string& name) {
  if (name == "shared") return TrainMode::kShared;
  if (name == "two-stage" || name == "two_stage") return TrainMode::kTwoStage;
  if (name == "tras-minus" || name == "tras_minus") return TrainMode::kTrasMinus;
  throw std::invalid_argument("unknown mode '" + name +
                              "' (expected shared, two-stage, or tras-minus)");
}

void TrainConfig::validate() const {
  if (A < 0.0) throw std::invalid_argument("A must be >= 0");
  if (B < 0.0) throw std::invalid_argument("B must be >= 0");
  if (tau_labeled < 0.0) throw std::invalid_argument("tau_labeled must be >= 0");
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw std::invalid_argument("t must lie in (0,1]");
  }
  if (warmup_epochs < 0) throw std::invalid_argument("warmup_epochs must be >= 0");
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (warmup_epochs > epochs) throw std::invalid_argument("warmup_epochs must be <= epochs");
  if (batches_per_epoch < 1) throw std::invalid_argument("batches_per_epoch must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (learning_rate <= 0.0) throw std::invalid_argument("learning_rate must be > 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) {
    throw std::invalid_argument("lr_decay must lie in (0,1]");
  }
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) {
    throw std::invalid_argument("ema_decay must lie in [0,1)");
  }
  if (prior_smoothing < 0.0) throw std::invalid_argument("prior_smoothing must be >= 0");
  for (int d : hidden_dims) {
    if (d < 1) throw std::invalid_argument("hidden_dims entries must be >= 1");
  }
}

OptimizerState make_optimizer_state(const ModelParams& params) {
  OptimizerState state;
  state.first_moment = zero_gradients(params);
  state.second_moment = zero_gradients(params);
  state.step = 0;
  return state;
}

void adam_step(ModelParams& params, const GradientSet& grads, OptimizerState& state, double lr) {
  std::vector<double*> p = param_pointers(params);
  std::vector<const double*> g = param_pointers(grads);
  std::vector<double*> m = param_pointers(state.first_moment);
  std::vector<double*> v = param_pointers(state.second_moment);
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size()) {
    throw std::invalid_argument("adam_step: parameter/gradient shape mismatch");
  }
  ++state.step;
  const double bias1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double grad = *g[i];
    *m[i] = kAdamBeta1 * *m[i] + (1.0 - kAdamBeta1) * grad;
    *v[i] = kAdamBeta2 * *v[i] + (1.0 - kAdamBeta2) * grad * grad;
    const double m_hat = *m[i] / bias1;
    const double v_hat = *v[i] / bias2;
    *p[i] -= lr * m_hat / (std::sqrt(v_hat) + kAdamEps);
  }
}

void ema_update(ModelParams& ema_params, const ModelParams& params, double decay) {
  std::vector<double*> e = param_pointers(ema_params);
  std::vector<const double*> p = param_pointers(params);
  if (e.size() != p.size()) throw std::invalid_argument("ema_update: shape mismatch");
  for (std::size_t i = 0; i < e.size(); ++i) {
    *e[i] = decay * *e[i] + (1.0 - decay) * *p[i];
  }
}

LossBreakdown ssl_loss(const ModelParams& params, const LabeledBatch& labeled,
                       const UnlabeledBatch& unlabeled, const ClassPrior& prior,
                       const TrainConfig& config) {
  LossBreakdown out;
  for (std::size_t i = 0; i < labeled.views.size(); ++i) {
    ForwardOutput fw = forward(params, labeled.views[i]);
    out.supervised += ce_loss(labeled.labels[i], fw.teacher_logits);
  }
  const double unsup_weight =
      config.mean_normalize && unlabeled.size() > 0 ? 1.0 / static_cast<double>(unlabeled.size())
                                                    : 1.0;
  for (std::size_t j = 0; j < unlabeled.size(); ++j) {
    ForwardOutput fw_weak = forward(params, unlabeled.weak_views[j]);
    const Logits scores =
        pseudo_scores(fw_weak.teacher_logits, prior, !config.disable_teacher_transform);
    if (max_prob(softmax(scores)) < config.threshold) continue;
    ++out.mask_count;
    ForwardOutput fw_strong = forward(params, unlabeled.strong_views[j]);
    out.unsupervised += unsup_weight * ce_loss(argmax(scores), fw_strong.teacher_logits);
  }
  out.total = out.supervised + out.unsupervised;
  return out;
}

LossBreakdown tras_loss(const ModelParams& params, const LabeledBatch& labeled,
                        const UnlabeledBatch& unlabeled, const ClassPrior& prior,
                        const AdjustmentSchedule& sched, const TrainConfig& config) {
  LossBreakdown out;
  const double tau_sup = config.use_plain_ce_labeled ? 0.0 : config.tau_labeled;
  for (std::size_t i = 0; i < labeled.views.size(); ++i) {
    ForwardOutput fw = forward(params, labeled.views[i]);
    out.supervised += da_ce_loss(labeled.labels[i], fw.student_logits, prior, tau_sup);
  }
  const double unsup_weight =
      config.mean_normalize && unlabeled.size() > 0 ? 1.0 / static_cast<double>(unlabeled.size())
                                                    : 1.0;
  for (std::size_t j = 0; j < unlabeled.size(); ++j) {
    ForwardOutput fw_weak = forward(params, unlabeled.weak_views[j]);
    const bool student_mask =
        config.disable_student_mask || max_prob(fw_weak.student_probs) >= config.threshold;
    if (!student_mask) continue;
    ++out.mask_count;
    const Logits scores =
        pseudo_scores(fw_weak.teacher_logits, prior, !config.disable_teacher_transform);
    const ProbDist target =
        transform_teacher_logits(fw_weak.teacher_logits, argmax(scores), prior, sched);
    out.unsupervised += unsup_weight * kl_div(target, fw_weak.student_probs);
  }
  out.total = out.supervised + out.unsupervised;
  return out;
}

TotalLossResult total_loss_and_grads(const ModelParams& params, const LabeledBatch& labeled,
                                     const UnlabeledBatch& unlabeled, const ClassPrior& prior,
                                     const AdjustmentSchedule& sched, const TrainConfig& config,
                                     int epoch) {
  AssembleOptions opts;
  opts.kl_active = epoch >= config.warmup_epochs;
  opts.include_teacher_terms = true;
  return assemble_and_backward(params, labeled, unlabeled, prior, sched, config, opts);
}

TrainResult train(const Dataset& dataset, const TrainConfig& config, const EvalContext* eval,
                  const EpochObserver& observer) {
  config.validate();
  if (dataset.num_classes < 2) throw std::invalid_argument("dataset needs at least 2 classes");
  if (dataset.labeled.empty()) throw std::invalid_argument("dataset has no labeled examples");
  if (eval != nullptr && !eval->grouping.is_partition(dataset.num_classes)) {
    throw std::invalid_argument("eval grouping is not a partition of the classes");
  }

  if (config.mode != TrainMode::kTwoStage) {
    StageSetup setup;
    setup.stage = 1;
    setup.warmup_epochs = config.warmup_epochs;
    setup.init_seed = config.seed;
    return run_stage(dataset, config, setup, eval, observer);
  }

  // Stage 1: a full FixMatch-style run (the KL term never activates).
  TrainConfig stage1_config = config;
  stage1_config.mode = TrainMode::kShared;
  stage1_config.warmup_epochs = stage1_config.epochs;
  StageSetup stage1;
  stage1.stage = 1;
  stage1.warmup_epochs = stage1_config.epochs;
  stage1.init_seed = config.seed;
  TrainResult stage1_result = run_stage(dataset, stage1_config, stage1, eval, observer);

  // Stage 2: fresh network; the frozen stage-1 model supplies the pseudo-label
  // distribution. Only the student objective trains.
  const ModelParams& frozen = config.eval_with_ema ? stage1_result.ema_params
                                                   : stage1_result.params;
  TrainConfig stage2_config = config;
  stage2_config.mode = TrainMode::kShared;
  StageSetup stage2;
  stage2.stage = 2;
  stage2.epoch_base = config.epochs;
  stage2.warmup_epochs = 0;
  stage2.include_teacher_terms = false;
  stage2.frozen_teacher = &frozen;
  stage2.init_seed = mix_seed(config.seed, kStage2Stream);
  TrainResult stage2_result = run_stage(dataset, stage2_config, stage2, eval, observer);

  TrainResult result;
  result.params = std::move(stage2_result.params);
  result.ema_params = std::move(stage2_result.ema_params);
  result.opt_state = std::move(stage2_result.opt_state);
  result.log.epochs = std::move(stage1_result.log.epochs);
  result.log.epochs.insert(result.log.epochs.end(), stage2_result.log.epochs.begin(),
                           stage2_result.log.epochs.end());
  return result;
}

std::vector<int> predict_student(const ModelParams& params,
                                 const std::vector<LabeledExample>& examples) {
  std::vector<int> out(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    out[i] = argmax(forward(params, examples[i].x).student_logits);
  }
  return out;
}

std::vector<int> predict_teacher(const ModelParams& params,
                                 const std::vector<LabeledExample>& examples) {
  std::vector<int> out(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    out[i] = argmax(forward(params, examples[i].x).teacher_logits);
  }
  return out;
}

std::string epoch_record_to_json(const EpochRecord& record) {
  json j;
  j["epoch"] = record.epoch;
  j["stage"] = record.stage;
  j["lr"] = record.lr;
  j["loss_total"] = record.loss_total;
  j["ssl_supervised"] = record.ssl_supervised;
  j["ssl_unsupervised"] = record.ssl_unsupervised;
  j["tras_supervised"] = record.tras_supervised;
  j["tras_unsupervised"] = record.tras_unsupervised;
  j["teacher_mask_rate"] = record.teacher_mask_rate;
  j["student_mask_rate"] = record.student_mask_rate;
  j["pl_precision"] = {{"head", record.pseudo_quality.head_precision},
                       {"torso", record.pseudo_quality.torso_precision},
                       {"tail", record.pseudo_quality.tail_precision}};
  j["pl_recall"] = {{"head", record.pseudo_quality.head_recall},
                    {"torso", record.pseudo_quality.torso_recall},
                    {"tail", record.pseudo_quality.tail_recall}};
  j["balancedness_transformed"] = record.balancedness_transformed;
  j["balancedness_raw"] = record.balancedness_raw;
  j["test_student"] = {{"overall", record.test_student_overall},
                       {"minority", record.test_student_minority},
                       {"gm", record.test_student_gm}};
  j["test_teacher"] = {{"overall", record.test_teacher_overall},
                       {"minority", record.test_teacher_minority},
                       {"gm", record.test_teacher_gm}};
  return j.dump();
}

void write_train_log(const std::string& path, const TrainLog& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const EpochRecord& record : log.epochs) out << epoch_record_to_json(record) << "\n";
}

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const ModelParams& ema_params, const OptimizerState& state,
                     const TrainConfig& config) {
  json j;
  j["version"] = 1;
  j["train_config"] = config_to_json(config);
  j["params"] = params_to_json(params);
  j["ema_params"] = params_to_json(ema_params);
  j["optimizer"] = json{{"step", state.step},
                        {"first_moment", grads_to_json(state.first_moment)},
                        {"second_moment", grads_to_json(state.second_moment)}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j;
  in >> j;
  if (j.at("version").get<int>() != 1) {
    throw std::runtime_error(path + ": unsupported checkpoint version");
  }
  Checkpoint ckpt;
  ckpt.config = config_from_json(j.at("train_config"));
  ckpt.params = params_from_json(j.at("params"));
  ckpt.ema_params = params_from_json(j.at("ema_params"));
  ckpt.state.step = j.at("optimizer").at("step").get<long>();
  ckpt.state.first_moment = grads_from_json(j.at("optimizer").at("first_moment"));
  ckpt.state.second_moment = grads_from_json(j.at("optimizer").at("second_moment"));
  return ckpt;
}

}  // namespace tras
