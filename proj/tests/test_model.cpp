#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "tras/losses.hpp"
#include "tras/model.hpp"
#include "tras/rng.hpp"
#include "tras/trainer.hpp"

using namespace tras;

namespace {

// Test-side forward pass, written independently of model.cpp: plain affine
// chains with ReLU. Used both as a forward oracle and to reject gradient-check
// instances that sit too close to a ReLU kink.
struct ManualForward {
  std::vector<std::vector<double>> preacts;
  std::vector<double> features;
  Logits teacher;
  Logits student;
};

std::vector<double> manual_affine(const AffineLayer& layer, const std::vector<double>& x) {
  std::vector<double> out(static_cast<std::size_t>(layer.out_dim), 0.0);
  for (int r = 0; r < layer.out_dim; ++r) {
    double acc = layer.bias[static_cast<std::size_t>(r)];
    for (int c = 0; c < layer.in_dim; ++c) {
      acc += layer.weights[static_cast<std::size_t>(r) * layer.in_dim + c] *
             x[static_cast<std::size_t>(c)];
    }
    out[static_cast<std::size_t>(r)] = acc;
  }
  return out;
}

ManualForward manual_forward(const ModelParams& params, const std::vector<double>& x) {
  ManualForward out;
  std::vector<double> h = x;
  for (const AffineLayer& layer : params.backbone) {
    std::vector<double> pre = manual_affine(layer, h);
    out.preacts.push_back(pre);
    h.resize(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) h[i] = pre[i] > 0.0 ? pre[i] : 0.0;
  }
  out.features = h;
  out.teacher = manual_affine(params.teacher_head, h);
  out.student = manual_affine(params.student_head, h);
  return out;
}

// Loss value assembled purely from forward() and the losses primitives. The
// teacher/student switches allow scoped checks for the blocked-backbone mode.
double eval_loss(const ModelParams& params, const std::vector<ExampleContribution>& contributions,
                 const ClassPrior& prior, bool teacher_terms = true, bool student_terms = true) {
  double total = 0.0;
  for (const ExampleContribution& contrib : contributions) {
    ForwardOutput fw = forward(params, contrib.input);
    for (const LossTerm& term : contrib.terms) {
      switch (term.kind) {
        case LossKind::kTeacherCE:
          if (teacher_terms) total += term.weight * ce_loss(term.label, fw.teacher_logits);
          break;
        case LossKind::kStudentDACE:
          if (student_terms) {
            total += term.weight * da_ce_loss(term.label, fw.student_logits, prior, term.tau);
          }
          break;
        case LossKind::kStudentKL:
          if (student_terms) total += term.weight * kl_div(term.target, fw.student_probs);
          break;
      }
    }
  }
  return total;
}

bool instance_has_kink_margin(const ModelParams& params,
                              const std::vector<ExampleContribution>& contributions,
                              double margin = 1e-3) {
  for (const ExampleContribution& contrib : contributions) {
    ManualForward fw = manual_forward(params, contrib.input);
    for (const std::vector<double>& pre : fw.preacts) {
      for (double p : pre) {
        if (std::abs(p) < margin) return false;
      }
    }
  }
  return true;
}

// Central finite differences against backward() on every parameter. When the
// student branch is blocked from the backbone, backbone entries are checked
// against the teacher-only objective (that is the gradient actually applied).
double max_gradient_error(ModelParams& params,
                          const std::vector<ExampleContribution>& contributions,
                          const BackwardOptions& options) {
  const double h = 1e-5;
  BackwardResult analytic = backward(params, contributions, options);
  auto p = param_pointers(params);
  const GradientSet& grads = analytic.grads;
  auto g = param_pointers(grads);
  REQUIRE(p.size() == g.size());
  std::size_t backbone_count = 0;
  for (const AffineLayer& layer : params.backbone) {
    backbone_count += layer.weights.size() + layer.bias.size();
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool scoped_to_teacher =
        options.block_student_backbone && i < backbone_count;
    const bool student_terms = !scoped_to_teacher;
    const double original = *p[i];
    *p[i] = original + h;
    const double up = eval_loss(params, contributions, *options.prior, true, student_terms);
    *p[i] = original - h;
    const double down = eval_loss(params, contributions, *options.prior, true, student_terms);
    *p[i] = original;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({1e-6, std::abs(numeric), std::abs(*g[i])});
    worst = std::max(worst, std::abs(numeric - *g[i]) / denom);
  }
  return worst;
}

ProbDist random_target(Rng& rng, int L) {
  std::vector<double> v(static_cast<std::size_t>(L));
  double sum = 0.0;
  for (double& x : v) {
    x = 0.05 + draw_uniform(rng);
    sum += x;
  }
  for (double& x : v) x /= sum;
  return ProbDist{std::move(v)};
}

std::vector<double> random_input(Rng& rng, int dim) {
  std::vector<double> x(static_cast<std::size_t>(dim));
  for (double& v : x) v = draw_normal(rng);
  return x;
}

bool all_zero(const std::vector<const double*>& values) {
  for (const double* v : values) {
    if (*v != 0.0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("init_params") {
  SUBCASE("deterministic in the seed") {
    ModelParams a = init_params(4, {8}, 3, 42);
    ModelParams b = init_params(4, {8}, 3, 42);
    auto pa = param_pointers(a);
    auto pb = param_pointers(b);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);
    ModelParams c = init_params(4, {8}, 3, 43);
    auto pc = param_pointers(c);
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) any_diff |= (*pa[i] != *pc[i]);
    CHECK(any_diff);
  }

  SUBCASE("empty hidden dims give an identity backbone") {
    ModelParams params = init_params(5, {}, 3, 1);
    CHECK(params.backbone.empty());
    CHECK(params.feature_dim == 5);
    Rng rng = make_rng(5);
    std::vector<double> x = random_input(rng, 5);
    ForwardOutput fw = forward(params, x);
    CHECK(fw.features == x);
    CHECK(params.teacher_head.in_dim == 5);
    CHECK(params.teacher_head.out_dim == 3);
  }

  SUBCASE("shapes chain consistently") {
    ModelParams params = init_params(4, {8}, 3, 7);
    REQUIRE(params.backbone.size() == 1);
    CHECK(params.backbone[0].weights.size() == 8 * 4);
    CHECK(params.backbone[0].bias.size() == 8);
    CHECK(params.teacher_head.weights.size() == 3 * 8);
    CHECK(params.teacher_head.bias.size() == 3);
    CHECK(params.student_head.weights.size() == 3 * 8);
    CHECK(params.student_head.bias.size() == 3);
    for (double b : params.backbone[0].bias) CHECK(b == 0.0);
  }

  SUBCASE("bad dims are rejected") {
    CHECK_THROWS_AS(init_params(0, {8}, 3, 1), std::invalid_argument);
    CHECK_THROWS_AS(init_params(4, {0}, 3, 1), std::invalid_argument);
    CHECK_THROWS_AS(init_params(4, {8}, 1, 1), std::invalid_argument);
  }
}

TEST_CASE("forward") {
  SUBCASE("zero parameters give uniform probabilities") {
    ModelParams params = init_params(4, {6}, 3, 1);
    for (double* p : param_pointers(params)) *p = 0.0;
    ForwardOutput fw = forward(params, {1.0, -2.0, 0.5, 3.0});
    for (double z : fw.teacher_logits) CHECK(z == 0.0);
    for (double z : fw.student_logits) CHECK(z == 0.0);
    for (double p : fw.teacher_probs.values) CHECK(p == doctest::Approx(1.0 / 3.0));
  }

  SUBCASE("identical heads produce identical logits") {
    ModelParams params = init_params(4, {6}, 3, 2);
    params.student_head = params.teacher_head;
    Rng rng = make_rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      ForwardOutput fw = forward(params, random_input(rng, 4));
      CHECK(fw.teacher_logits == fw.student_logits);
    }
  }

  SUBCASE("matches an independent forward pass and stays finite") {
    Rng rng = make_rng(9);
    ModelParams params = init_params(5, {7, 6}, 4, 11);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> x = random_input(rng, 5);
      ForwardOutput fw = forward(params, x);
      ManualForward manual = manual_forward(params, x);
      REQUIRE(fw.teacher_logits.size() == manual.teacher.size());
      for (std::size_t l = 0; l < manual.teacher.size(); ++l) {
        CHECK(fw.teacher_logits[l] == doctest::Approx(manual.teacher[l]).epsilon(1e-12));
        CHECK(fw.student_logits[l] == doctest::Approx(manual.student[l]).epsilon(1e-12));
      }
      double sum = 0.0;
      for (double p : fw.student_probs.values) {
        CHECK(std::isfinite(p));
        sum += p;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(fw.pseudo_label == argmax(fw.teacher_logits));
    }
  }

  SUBCASE("dimension mismatch is rejected") {
    ModelParams params = init_params(4, {6}, 3, 1);
    CHECK_THROWS_AS(forward(params, {1.0, 2.0}), std::invalid_argument);
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  ClassPrior prior = make_class_prior({40, 25, 10});
  BackwardOptions shared;
  shared.prior = &prior;
  BackwardOptions blocked = shared;
  blocked.block_student_backbone = true;

  // every nonempty subset of {TeacherCE, StudentDACE, StudentKL}
  int instances = 0;
  for (int combo = 1; combo < 8; ++combo) {
    for (int block = 0; block < 2; ++block) {
      for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        Rng rng = make_rng(mix_seed(900 + combo, seed, block));
        ModelParams params;
        std::vector<ExampleContribution> contributions;
        // resample until the instance is safely away from ReLU kinks
        for (int attempt = 0;; ++attempt) {
          REQUIRE(attempt < 50);
          params = init_params(3, {4}, 3, draw_uniform(rng) * 1e9);
          contributions.clear();
          for (int e = 0; e < 3; ++e) {
            ExampleContribution contrib;
            contrib.input = random_input(rng, 3);
            int y = static_cast<int>(draw_uniform(rng) * 3);
            if (combo & 1) contrib.terms.push_back({LossKind::kTeacherCE, y, 0.0, {}, 1.0, 0});
            if (combo & 2) {
              contrib.terms.push_back({LossKind::kStudentDACE, y, 1.0, {}, 1.0, 2});
            }
            if (combo & 4) {
              contrib.terms.push_back(
                  {LossKind::kStudentKL, -1, 0.0, random_target(rng, 3), 1.0, 3});
            }
            contributions.push_back(std::move(contrib));
          }
          if (instance_has_kink_margin(params, contributions)) break;
        }
        const BackwardOptions& options = block ? blocked : shared;
        CHECK(max_gradient_error(params, contributions, options) < 1e-4);
        ++instances;
      }
    }
  }
  CHECK(instances == 56);
}

TEST_CASE("stop-gradient: KL term alone leaves the teacher untouched") {
  ClassPrior prior = make_class_prior({40, 25, 10});
  Rng rng = make_rng(77);
  ModelParams params = init_params(4, {5}, 3, 123);

  std::vector<ExampleContribution> contributions;
  for (int e = 0; e < 4; ++e) {
    ExampleContribution contrib;
    contrib.input = random_input(rng, 4);
    contrib.terms.push_back({LossKind::kStudentKL, -1, 0.0, random_target(rng, 3), 1.0, 3});
    contributions.push_back(std::move(contrib));
  }

  BackwardOptions options;
  options.prior = &prior;
  BackwardResult result = backward(params, contributions, options);

  for (double w : result.grads.teacher_head.weights) CHECK(w == 0.0);
  for (double b : result.grads.teacher_head.bias) CHECK(b == 0.0);

  // an optimizer step on that gradient leaves the teacher head bitwise intact
  ModelParams stepped = params;
  OptimizerState state = make_optimizer_state(stepped);
  adam_step(stepped, result.grads, state, 0.01);
  CHECK(stepped.teacher_head.weights == params.teacher_head.weights);
  CHECK(stepped.teacher_head.bias == params.teacher_head.bias);
  // while the student head moved
  CHECK(stepped.student_head.weights != params.student_head.weights);

  SUBCASE("tras-minus blocks the backbone as well") {
    options.block_student_backbone = true;
    BackwardResult minus = backward(params, contributions, options);
    for (const AffineLayer& layer : minus.grads.backbone) {
      for (double w : layer.weights) CHECK(w == 0.0);
      for (double b : layer.bias) CHECK(b == 0.0);
    }
    const GradientSet& minus_grads = minus.grads;
    CHECK_FALSE(all_zero(param_pointers(minus_grads)));  // the student head still learns
  }
}

TEST_CASE("branch symmetry and shared-backbone accumulation") {
  ClassPrior uniform = make_class_prior({10, 10, 10});
  Rng rng = make_rng(31);

  SUBCASE("identical heads receive identical gradients from symmetric terms") {
    ModelParams params = init_params(4, {5}, 3, 55);
    params.student_head = params.teacher_head;
    std::vector<ExampleContribution> contributions;
    for (int e = 0; e < 3; ++e) {
      ExampleContribution contrib;
      contrib.input = random_input(rng, 4);
      int y = static_cast<int>(draw_uniform(rng) * 3);
      // with a uniform prior and tau arbitrary, DA-CE == CE, so the two
      // branches see the same objective
      contrib.terms.push_back({LossKind::kTeacherCE, y, 0.0, {}, 1.0, 0});
      contrib.terms.push_back({LossKind::kStudentDACE, y, 1.0, {}, 1.0, 2});
      contributions.push_back(std::move(contrib));
    }
    BackwardOptions options;
    options.prior = &uniform;
    BackwardResult result = backward(params, contributions, options);
    for (std::size_t i = 0; i < result.grads.teacher_head.weights.size(); ++i) {
      CHECK(result.grads.teacher_head.weights[i] ==
            doctest::Approx(result.grads.student_head.weights[i]).epsilon(1e-12));
    }
  }

  SUBCASE("backbone gradient is the sum of per-branch contributions") {
    ClassPrior prior = make_class_prior({40, 25, 10});
    ModelParams params = init_params(4, {5}, 3, 99);
    std::vector<ExampleContribution> teacher_only, student_only, both;
    for (int e = 0; e < 3; ++e) {
      std::vector<double> x = random_input(rng, 4);
      int y = static_cast<int>(draw_uniform(rng) * 3);
      ProbDist target = random_target(rng, 3);
      ExampleContribution t;
      t.input = x;
      t.terms.push_back({LossKind::kTeacherCE, y, 0.0, {}, 1.0, 0});
      teacher_only.push_back(t);
      ExampleContribution s;
      s.input = x;
      s.terms.push_back({LossKind::kStudentKL, -1, 0.0, target, 1.0, 3});
      student_only.push_back(s);
      ExampleContribution b;
      b.input = x;
      b.terms = t.terms;
      b.terms.push_back(s.terms[0]);
      both.push_back(b);
    }
    BackwardOptions options;
    options.prior = &prior;
    GradientSet g_teacher = backward(params, teacher_only, options).grads;
    GradientSet g_student = backward(params, student_only, options).grads;
    GradientSet g_both = backward(params, both, options).grads;
    for (std::size_t k = 0; k < g_both.backbone.size(); ++k) {
      for (std::size_t i = 0; i < g_both.backbone[k].weights.size(); ++i) {
        CHECK(g_both.backbone[k].weights[i] ==
              doctest::Approx(g_teacher.backbone[k].weights[i] +
                              g_student.backbone[k].weights[i])
                  .epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("export_features") {
  ModelParams params = init_params(3, {4}, 2, 5);

  SUBCASE("empty dataset gives an empty matrix") {
    CHECK(export_features(params, {}).empty());
  }

  SUBCASE("single example equals forward features") {
    std::vector<double> x = {0.3, -1.2, 0.8};
    std::vector<std::vector<double>> rows = export_features(params, {x});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0] == forward(params, x).features);
  }

  SUBCASE("zero weights give all-zero rows") {
    for (double* p : param_pointers(params)) *p = 0.0;
    std::vector<std::vector<double>> rows =
        export_features(params, {{1.0, 2.0, 3.0}, {-1.0, 0.0, 4.0}});
    for (const std::vector<double>& row : rows) {
      for (double v : row) CHECK(v == 0.0);
    }
  }
}
