#include <benchmark/benchmark.h>

#include "tras/data.hpp"
#include "tras/losses.hpp"
#include "tras/model.hpp"
#include "tras/rng.hpp"
#include "tras/trainer.hpp"

namespace {

using namespace tras;

std::vector<double> random_point(Rng& rng, int dim) {
  std::vector<double> x(static_cast<std::size_t>(dim));
  for (double& v : x) v = draw_normal(rng);
  return x;
}

void BM_Softmax(benchmark::State& state) {
  Rng rng = make_rng(1);
  Logits z = random_point(rng, 10);
  for (auto _ : state) {
    benchmark::DoNotOptimize(softmax(z));
  }
}
BENCHMARK(BM_Softmax);

void BM_Forward(benchmark::State& state) {
  ModelParams params = init_params(5, {64, 64}, 10, 7);
  Rng rng = make_rng(2);
  std::vector<double> x = random_point(rng, 5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward(params, x));
  }
}
BENCHMARK(BM_Forward);

void BM_BackwardBatch(benchmark::State& state) {
  ModelParams params = init_params(5, {64, 64}, 10, 7);
  ClassPrior prior = make_class_prior(longtail_counts(200, 50.0, 10));
  AdjustmentSchedule sched = make_adjustment_schedule(2.0, 2.0, prior);
  Rng rng = make_rng(3);
  std::vector<ExampleContribution> contributions;
  for (int i = 0; i < 64; ++i) {
    ExampleContribution contrib;
    contrib.input = random_point(rng, 5);
    contrib.terms.push_back({LossKind::kTeacherCE, i % 10, 0.0, {}, 1.0, 0});
    contrib.terms.push_back({LossKind::kStudentDACE, i % 10, 1.0, {}, 1.0, 2});
    contributions.push_back(std::move(contrib));
  }
  BackwardOptions options;
  options.prior = &prior;
  for (auto _ : state) {
    benchmark::DoNotOptimize(backward(params, contributions, options));
  }
}
BENCHMARK(BM_BackwardBatch);

void BM_TrainEpoch(benchmark::State& state) {
  MixtureSpec spec = circle_mixture(10, 5, 1.0, 0.35, 11);
  std::vector<std::int64_t> totals = longtail_counts(400, 20.0, 10);
  SplitCounts split = split_labeled_unlabeled(totals, 0.2);
  Dataset dataset = synth_gaussian_mixture(spec, split.labeled, split.unlabeled);
  TrainConfig config;
  config.epochs = 1;
  config.warmup_epochs = 0;
  config.batches_per_epoch = 4;
  config.batch_size = 32;
  config.hidden_dims = {64, 64};
  config.ema_decay = 0.99;
  for (auto _ : state) {
    benchmark::DoNotOptimize(train(dataset, config));
  }
}
BENCHMARK(BM_TrainEpoch);

}  // namespace

BENCHMARK_MAIN();
