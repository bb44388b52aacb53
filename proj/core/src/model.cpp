#include "tras/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "tras/rng.hpp"

namespace tras {

namespace {

AffineLayer init_affine(int in_dim, int out_dim, Rng& rng) {
  AffineLayer layer;
  layer.in_dim = in_dim;
  layer.out_dim = out_dim;
  layer.weights.resize(static_cast<std::size_t>(in_dim) * static_cast<std::size_t>(out_dim));
  layer.bias.assign(static_cast<std::size_t>(out_dim), 0.0);
  const double scale = std::sqrt(2.0 / static_cast<double>(in_dim));
  for (double& w : layer.weights) w = draw_normal(rng, 0.0, scale);
  return layer;
}

AffineLayer zero_like(const AffineLayer& layer) {
  AffineLayer out;
  out.in_dim = layer.in_dim;
  out.out_dim = layer.out_dim;
  out.weights.assign(layer.weights.size(), 0.0);
  out.bias.assign(layer.bias.size(), 0.0);
  return out;
}

std::vector<double> apply_affine(const AffineLayer& layer, const std::vector<double>& x) {
  std::vector<double> out(static_cast<std::size_t>(layer.out_dim));
  for (int r = 0; r < layer.out_dim; ++r) {
    const double* wrow = layer.weights.data() + static_cast<std::size_t>(r) * layer.in_dim;
    double acc = layer.bias[static_cast<std::size_t>(r)];
    for (int c = 0; c < layer.in_dim; ++c) acc += wrow[c] * x[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(r)] = acc;
  }
  return out;
}

inline double relu(double v) { return v > 0.0 ? v : 0.0; }

struct BackboneTrace {
  // activations[0] = input, activations[k] = relu(preacts[k-1])
  std::vector<std::vector<double>> activations;
  std::vector<std::vector<double>> preacts;
};

BackboneTrace run_backbone(const ModelParams& params, const std::vector<double>& x) {
  if (static_cast<int>(x.size()) != params.input_dim) {
    throw std::invalid_argument("forward: input has dimension " + std::to_string(x.size()) +
                                ", model expects " + std::to_string(params.input_dim));
  }
  BackboneTrace trace;
  trace.activations.push_back(x);
  for (const AffineLayer& layer : params.backbone) {
    std::vector<double> pre = apply_affine(layer, trace.activations.back());
    std::vector<double> act(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) act[i] = relu(pre[i]);
    trace.preacts.push_back(std::move(pre));
    trace.activations.push_back(std::move(act));
  }
  return trace;
}

// dL/dz for -log softmax(z)[y]: softmax(z) - e_y.
Logits ce_grad(int y, const Logits& z) {
  ProbDist s = softmax(z);
  Logits dz = std::move(s.values);
  dz[static_cast<std::size_t>(y)] -= 1.0;
  return dz;
}

void accumulate_head(AffineLayer& grad, const Logits& dz, const std::vector<double>& h,
                     double weight) {
  for (int r = 0; r < grad.out_dim; ++r) {
    const double g = weight * dz[static_cast<std::size_t>(r)];
    double* wrow = grad.weights.data() + static_cast<std::size_t>(r) * grad.in_dim;
    for (int c = 0; c < grad.in_dim; ++c) wrow[c] += g * h[static_cast<std::size_t>(c)];
    grad.bias[static_cast<std::size_t>(r)] += g;
  }
}

void accumulate_input_grad(const AffineLayer& head, const Logits& dz, double weight,
                           std::vector<double>& dh) {
  for (int r = 0; r < head.out_dim; ++r) {
    const double g = weight * dz[static_cast<std::size_t>(r)];
    const double* wrow = head.weights.data() + static_cast<std::size_t>(r) * head.in_dim;
    for (int c = 0; c < head.in_dim; ++c) dh[static_cast<std::size_t>(c)] += g * wrow[c];
  }
}

void append_pointers(AffineLayer& layer, std::vector<double*>& out) {
  for (double& w : layer.weights) out.push_back(&w);
  for (double& b : layer.bias) out.push_back(&b);
}

void append_pointers(const AffineLayer& layer, std::vector<const double*>& out) {
  for (const double& w : layer.weights) out.push_back(&w);
  for (const double& b : layer.bias) out.push_back(&b);
}

}  // namespace

ModelParams init_params(int input_dim, const std::vector<int>& hidden_dims, int num_classes,
                        std::uint64_t seed) {
  if (input_dim < 1) throw std::invalid_argument("input_dim must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  for (int d : hidden_dims) {
    if (d < 1) throw std::invalid_argument("hidden dims must be >= 1");
  }
  ModelParams params;
  params.input_dim = input_dim;
  params.num_classes = num_classes;
  params.feature_dim = hidden_dims.empty() ? input_dim : hidden_dims.back();

  Rng rng = make_rng(seed);
  int in_dim = input_dim;
  for (int d : hidden_dims) {
    params.backbone.push_back(init_affine(in_dim, d, rng));
    in_dim = d;
  }
  params.teacher_head = init_affine(params.feature_dim, num_classes, rng);
  params.student_head = init_affine(params.feature_dim, num_classes, rng);
  return params;
}

GradientSet zero_gradients(const ModelParams& params) {
  GradientSet grads;
  grads.backbone.reserve(params.backbone.size());
  for (const AffineLayer& layer : params.backbone) grads.backbone.push_back(zero_like(layer));
  grads.teacher_head = zero_like(params.teacher_head);
  grads.student_head = zero_like(params.student_head);
  return grads;
}

ForwardOutput forward(const ModelParams& params, const std::vector<double>& x) {
  BackboneTrace trace = run_backbone(params, x);
  ForwardOutput out;
  out.features = trace.activations.back();
  out.teacher_logits = apply_affine(params.teacher_head, out.features);
  out.student_logits = apply_affine(params.student_head, out.features);
  out.teacher_probs = softmax(out.teacher_logits);
  out.student_probs = softmax(out.student_logits);
  out.pseudo_label = argmax(out.teacher_logits);
  return out;
}

BackwardResult backward(const ModelParams& params,
                        const std::vector<ExampleContribution>& contributions,
                        const BackwardOptions& options) {
  BackwardResult result;
  result.grads = zero_gradients(params);

  for (const ExampleContribution& contrib : contributions) {
    BackboneTrace trace = run_backbone(params, contrib.input);
    const std::vector<double>& h = trace.activations.back();

    Logits z_teacher = apply_affine(params.teacher_head, h);
    Logits z_student = apply_affine(params.student_head, h);

    std::vector<double> dh(h.size(), 0.0);

    for (const LossTerm& term : contrib.terms) {
      if (term.weight == 0.0) continue;
      if (term.tag < 0 || static_cast<std::size_t>(term.tag) >= kNumLossTags) {
        throw std::invalid_argument("backward: loss term tag out of range");
      }
      switch (term.kind) {
        case LossKind::kTeacherCE: {
          const double value = term.weight * ce_loss(term.label, z_teacher);
          result.teacher_ce += value;
          result.tag_sums[static_cast<std::size_t>(term.tag)] += value;
          Logits dz = ce_grad(term.label, z_teacher);
          accumulate_head(result.grads.teacher_head, dz, h, term.weight);
          accumulate_input_grad(params.teacher_head, dz, term.weight, dh);
          break;
        }
        case LossKind::kStudentDACE: {
          if (options.prior == nullptr) {
            throw std::invalid_argument("backward: DA-CE term needs a class prior");
          }
          const double value =
              term.weight * da_ce_loss(term.label, z_student, *options.prior, term.tau);
          result.student_dace += value;
          result.tag_sums[static_cast<std::size_t>(term.tag)] += value;
          Logits shifted(z_student.size());
          for (std::size_t l = 0; l < shifted.size(); ++l) {
            shifted[l] = z_student[l] + term.tau * options.prior->log_probs[l];
          }
          Logits dz = ce_grad(term.label, shifted);
          accumulate_head(result.grads.student_head, dz, h, term.weight);
          if (!options.block_student_backbone) {
            accumulate_input_grad(params.student_head, dz, term.weight, dh);
          }
          break;
        }
        case LossKind::kStudentKL: {
          ProbDist s = softmax(z_student);
          const double value = term.weight * kl_div(term.target, s);
          result.student_kl += value;
          result.tag_sums[static_cast<std::size_t>(term.tag)] += value;
          Logits dz(s.values.size());
          for (std::size_t l = 0; l < dz.size(); ++l) dz[l] = s.values[l] - term.target.values[l];
          accumulate_head(result.grads.student_head, dz, h, term.weight);
          if (!options.block_student_backbone) {
            accumulate_input_grad(params.student_head, dz, term.weight, dh);
          }
          break;
        }
      }
    }

    // Backbone backprop; dh already merges both branch contributions.
    for (int k = static_cast<int>(params.backbone.size()) - 1; k >= 0; --k) {
      const AffineLayer& layer = params.backbone[static_cast<std::size_t>(k)];
      AffineLayer& grad = result.grads.backbone[static_cast<std::size_t>(k)];
      const std::vector<double>& pre = trace.preacts[static_cast<std::size_t>(k)];
      const std::vector<double>& below = trace.activations[static_cast<std::size_t>(k)];

      std::vector<double> dpre(pre.size());
      for (std::size_t i = 0; i < pre.size(); ++i) dpre[i] = pre[i] > 0.0 ? dh[i] : 0.0;

      for (int r = 0; r < layer.out_dim; ++r) {
        const double g = dpre[static_cast<std::size_t>(r)];
        if (g == 0.0) continue;
        double* wrow = grad.weights.data() + static_cast<std::size_t>(r) * layer.in_dim;
        for (int c = 0; c < layer.in_dim; ++c) wrow[c] += g * below[static_cast<std::size_t>(c)];
        grad.bias[static_cast<std::size_t>(r)] += g;
      }

      std::vector<double> dbelow(static_cast<std::size_t>(layer.in_dim), 0.0);
      for (int r = 0; r < layer.out_dim; ++r) {
        const double g = dpre[static_cast<std::size_t>(r)];
        if (g == 0.0) continue;
        const double* wrow = layer.weights.data() + static_cast<std::size_t>(r) * layer.in_dim;
        for (int c = 0; c < layer.in_dim; ++c) dbelow[static_cast<std::size_t>(c)] += g * wrow[c];
      }
      dh = std::move(dbelow);
    }
  }

  result.loss = result.teacher_ce + result.student_dace + result.student_kl;
  return result;
}

std::vector<std::vector<double>> export_features(const ModelParams& params,
                                                 const std::vector<std::vector<double>>& inputs) {
  std::vector<std::vector<double>> rows;
  rows.reserve(inputs.size());
  for (const std::vector<double>& x : inputs) {
    rows.push_back(run_backbone(params, x).activations.back());
  }
  return rows;
}

void write_features_csv(const std::string& path, const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  const std::size_t dim = rows.empty() ? 0 : rows[0].size();
  for (std::size_t i = 0; i < dim; ++i) {
    out << (i == 0 ? "" : ",") << "f" << i;
  }
  out << "\n";
  char buf[32];
  for (const std::vector<double>& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", row[i]);
      out << (i == 0 ? "" : ",") << buf;
    }
    out << "\n";
  }
}

std::vector<double*> param_pointers(ModelParams& params) {
  std::vector<double*> out;
  for (AffineLayer& layer : params.backbone) append_pointers(layer, out);
  append_pointers(params.teacher_head, out);
  append_pointers(params.student_head, out);
  return out;
}

std::vector<const double*> param_pointers(const ModelParams& params) {
  std::vector<const double*> out;
  for (const AffineLayer& layer : params.backbone) append_pointers(layer, out);
  append_pointers(params.teacher_head, out);
  append_pointers(params.student_head, out);
  return out;
}

std::vector<double*> param_pointers(GradientSet& grads) {
  std::vector<double*> out;
  for (AffineLayer& layer : grads.backbone) append_pointers(layer, out);
  append_pointers(grads.teacher_head, out);
  append_pointers(grads.student_head, out);
  return out;
}

std::vector<const double*> param_pointers(const GradientSet& grads) {
  std::vector<const double*> out;
  for (const AffineLayer& layer : grads.backbone) append_pointers(layer, out);
  append_pointers(grads.teacher_head, out);
  append_pointers(grads.student_head, out);
  return out;
}

std::size_t param_count(const ModelParams& params) {
  std::size_t n = 0;
  for (const AffineLayer& layer : params.backbone) n += layer.weights.size() + layer.bias.size();
  n += params.teacher_head.weights.size() + params.teacher_head.bias.size();
  n += params.student_head.weights.size() + params.student_head.bias.size();
  return n;
}

}  // namespace tras
