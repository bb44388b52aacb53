#include "tras/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "tras/rng.hpp"

namespace tras {

namespace {

constexpr std::uint64_t kLabeledStream = 0x4c41u;    // section tags for seed mixing
constexpr std::uint64_t kUnlabeledStream = 0x554eu;
constexpr std::uint64_t kBalancedStream = 0x4241u;

std::vector<double> draw_point(const std::vector<double>& mean, double sigma, Rng& rng) {
  std::vector<double> x(mean.size());
  for (std::size_t d = 0; d < mean.size(); ++d) x[d] = mean[d] + sigma * draw_normal(rng);
  return x;
}

void format_double(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

struct CsvRow {
  std::vector<double> values;
};

// Parses one CSV line; throws with the 1-based row number on bad cells.
CsvRow parse_row(const std::string& line, const std::string& path, std::size_t row_number) {
  CsvRow row;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos
                                                                     : comma - start);
    try {
      std::size_t used = 0;
      double v = std::stod(cell, &used);
      while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
      if (used != cell.size()) throw std::invalid_argument(cell);
      row.values.push_back(v);
    } catch (const std::exception&) {
      throw std::runtime_error(path + ": row " + std::to_string(row_number) +
                               ": non-numeric cell '" + cell + "'");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return row;
}

int checked_label(double v, int num_classes, const std::string& path, std::size_t row_number) {
  double rounded = std::round(v);
  if (std::abs(v - rounded) > 1e-9) {
    throw std::runtime_error(path + ": row " + std::to_string(row_number) +
                             ": label must be an integer, got " + std::to_string(v));
  }
  int label = static_cast<int>(rounded);
  if (label < 0 || (num_classes > 0 && label >= num_classes)) {
    throw std::runtime_error(path + ": row " + std::to_string(row_number) + ": label " +
                             std::to_string(label) + " out of range for " +
                             std::to_string(num_classes) + " classes");
  }
  return label;
}

}  // namespace

MixtureSpec circle_mixture(int num_classes, int feature_dim, double radius, double sigma,
                           std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("mixture needs at least 2 classes");
  if (feature_dim < 2) throw std::invalid_argument("circle mixture needs feature_dim >= 2");
  if (radius <= 0.0) throw std::invalid_argument("radius must be > 0");
  MixtureSpec spec;
  spec.num_classes = num_classes;
  spec.feature_dim = feature_dim;
  spec.sigma = sigma;
  spec.seed = seed;
  const double two_pi = 2.0 * std::acos(-1.0);
  for (int l = 0; l < num_classes; ++l) {
    std::vector<double> mean(static_cast<std::size_t>(feature_dim), 0.0);
    const double angle = two_pi * static_cast<double>(l) / static_cast<double>(num_classes);
    mean[0] = radius * std::cos(angle);
    mean[1] = radius * std::sin(angle);
    spec.means.push_back(std::move(mean));
  }
  return spec;
}

std::vector<std::int64_t> longtail_counts(std::int64_t n1, double gamma, int num_classes) {
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (n1 < num_classes) throw std::invalid_argument("n1 must be >= num_classes");
  if (gamma < 1.0) throw std::invalid_argument("gamma must be >= 1");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes));
  for (int l = 0; l < num_classes; ++l) {
    const double exponent = -static_cast<double>(l) / static_cast<double>(num_classes - 1);
    const double raw = static_cast<double>(n1) * std::pow(gamma, exponent);
    counts[static_cast<std::size_t>(l)] = std::max<std::int64_t>(1, std::llround(raw));
  }
  counts[0] = n1;
  return counts;
}

SplitCounts split_labeled_unlabeled(const std::vector<std::int64_t>& totals, double beta,
                                    std::uint64_t /*seed*/) {
  if (beta <= 0.0 || beta >= 1.0) throw std::invalid_argument("beta must lie in (0,1)");
  SplitCounts split;
  split.labeled.resize(totals.size());
  split.unlabeled.resize(totals.size());
  for (std::size_t l = 0; l < totals.size(); ++l) {
    if (totals[l] < 2) {
      throw std::invalid_argument("cannot split class " + std::to_string(l) + " with only " +
                                  std::to_string(totals[l]) + " examples");
    }
    std::int64_t labeled = std::llround(beta * static_cast<double>(totals[l]));
    labeled = std::clamp<std::int64_t>(labeled, 1, totals[l] - 1);
    split.labeled[l] = labeled;
    split.unlabeled[l] = totals[l] - labeled;
  }
  return split;
}

Dataset synth_gaussian_mixture(const MixtureSpec& spec,
                               const std::vector<std::int64_t>& labeled_counts,
                               const std::vector<std::int64_t>& unlabeled_counts) {
  if (static_cast<int>(spec.means.size()) != spec.num_classes) {
    throw std::invalid_argument("mixture spec means/class count mismatch");
  }
  if (static_cast<int>(labeled_counts.size()) != spec.num_classes ||
      static_cast<int>(unlabeled_counts.size()) != spec.num_classes) {
    throw std::invalid_argument("counts length must equal num_classes");
  }
  for (const std::vector<double>& mean : spec.means) {
    if (static_cast<int>(mean.size()) != spec.feature_dim) {
      throw std::invalid_argument("mixture mean dimension mismatch");
    }
  }

  Dataset dataset;
  dataset.num_classes = spec.num_classes;
  dataset.labeled_counts = labeled_counts;
  dataset.unlabeled_counts = unlabeled_counts;

  // Independent stream per (class, section) so one class's count does not
  // perturb another's draws.
  for (int l = 0; l < spec.num_classes; ++l) {
    Rng rng = make_rng(mix_seed(spec.seed, kLabeledStream, static_cast<std::uint64_t>(l)));
    for (std::int64_t i = 0; i < labeled_counts[static_cast<std::size_t>(l)]; ++i) {
      dataset.labeled.push_back({draw_point(spec.means[static_cast<std::size_t>(l)], spec.sigma, rng), l});
    }
  }
  for (int l = 0; l < spec.num_classes; ++l) {
    Rng rng = make_rng(mix_seed(spec.seed, kUnlabeledStream, static_cast<std::uint64_t>(l)));
    for (std::int64_t i = 0; i < unlabeled_counts[static_cast<std::size_t>(l)]; ++i) {
      dataset.unlabeled.push_back({draw_point(spec.means[static_cast<std::size_t>(l)], spec.sigma, rng), l});
    }
  }
  return dataset;
}

std::vector<LabeledExample> synth_balanced_sample(const MixtureSpec& spec, int per_class,
                                                  std::uint64_t seed) {
  std::vector<LabeledExample> rows;
  for (int l = 0; l < spec.num_classes; ++l) {
    Rng rng = make_rng(mix_seed(seed, kBalancedStream, static_cast<std::uint64_t>(l)));
    for (int i = 0; i < per_class; ++i) {
      rows.push_back({draw_point(spec.means[static_cast<std::size_t>(l)], spec.sigma, rng), l});
    }
  }
  return rows;
}

Augmenter Augmenter::from_dataset(const Dataset& dataset) {
  Augmenter aug;
  const int dim = dataset.feature_dim();
  aug.scale.assign(static_cast<std::size_t>(dim), 0.0);
  if (dataset.labeled.empty()) return aug;

  std::vector<double> mean(static_cast<std::size_t>(dim), 0.0);
  for (const LabeledExample& ex : dataset.labeled) {
    for (int d = 0; d < dim; ++d) mean[static_cast<std::size_t>(d)] += ex.x[static_cast<std::size_t>(d)];
  }
  const double n = static_cast<double>(dataset.labeled.size());
  for (double& m : mean) m /= n;
  for (const LabeledExample& ex : dataset.labeled) {
    for (int d = 0; d < dim; ++d) {
      const double diff = ex.x[static_cast<std::size_t>(d)] - mean[static_cast<std::size_t>(d)];
      aug.scale[static_cast<std::size_t>(d)] += diff * diff;
    }
  }
  for (double& s : aug.scale) s = std::sqrt(s / n);
  return aug;
}

std::vector<double> Augmenter::augment(const std::vector<double>& x, AugmentMode mode,
                                       std::uint64_t seed) const {
  Rng rng = make_rng(seed);
  const double factor = mode == AugmentMode::kWeak ? weak_factor : strong_factor;
  std::vector<double> out(x.size());
  for (std::size_t d = 0; d < x.size(); ++d) {
    const double s = d < scale.size() ? scale[d] : 0.0;
    out[d] = x[d] + factor * s * draw_normal(rng);
  }
  if (mode == AugmentMode::kStrong) {
    const std::size_t n_mask =
        static_cast<std::size_t>(std::floor(mask_rate * static_cast<double>(x.size())));
    if (n_mask > 0) {
      // Partial Fisher-Yates for a seeded choice of distinct coordinates.
      std::vector<std::size_t> idx(x.size());
      std::iota(idx.begin(), idx.end(), 0);
      for (std::size_t i = 0; i < n_mask; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
        out[idx[i]] = 0.0;
      }
    }
  }
  return out;
}

namespace {

std::vector<LabeledExample> read_labeled_rows(const std::string& path, int num_classes,
                                              int& feature_dim, int& max_label) {
  std::vector<LabeledExample> rows;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::size_t row_number = 0;
  while (std::getline(in, line)) {
    ++row_number;
    if (line.empty()) continue;
    CsvRow row = parse_row(line, path, row_number);
    if (row.values.size() < 2) {
      throw std::runtime_error(path + ": row " + std::to_string(row_number) +
                               ": needs at least one feature and a label");
    }
    if (feature_dim < 0) feature_dim = static_cast<int>(row.values.size()) - 1;
    if (static_cast<int>(row.values.size()) != feature_dim + 1) {
      throw std::runtime_error(path + ": row " + std::to_string(row_number) + ": ragged row (" +
                               std::to_string(row.values.size()) + " cells, expected " +
                               std::to_string(feature_dim + 1) + ")");
    }
    int label = checked_label(row.values.back(), num_classes, path, row_number);
    max_label = std::max(max_label, label);
    row.values.pop_back();
    rows.push_back({std::move(row.values), label});
  }
  if (rows.empty()) throw std::runtime_error(path + ": no labeled rows");
  return rows;
}

}  // namespace

std::vector<LabeledExample> load_labeled_csv(const std::string& path, int num_classes) {
  int feature_dim = -1;
  int max_label = -1;
  return read_labeled_rows(path, num_classes, feature_dim, max_label);
}

Dataset load_csv_dataset(const std::string& labeled_path, const std::string& unlabeled_path,
                         int num_classes) {
  Dataset dataset;
  int feature_dim = -1;
  int max_label = -1;
  dataset.labeled = read_labeled_rows(labeled_path, num_classes, feature_dim, max_label);
  std::string line;
  std::size_t row_number = 0;

  std::ifstream unlabeled_in(unlabeled_path);
  if (!unlabeled_in) throw std::runtime_error("cannot open " + unlabeled_path);
  row_number = 0;
  while (std::getline(unlabeled_in, line)) {
    ++row_number;
    if (line.empty()) continue;
    CsvRow row = parse_row(line, unlabeled_path, row_number);
    int hidden = -1;
    if (static_cast<int>(row.values.size()) == feature_dim + 1) {
      hidden = checked_label(row.values.back(), num_classes, unlabeled_path, row_number);
      max_label = std::max(max_label, hidden);
      row.values.pop_back();
    } else if (static_cast<int>(row.values.size()) != feature_dim) {
      throw std::runtime_error(unlabeled_path + ": row " + std::to_string(row_number) +
                               ": ragged row (" + std::to_string(row.values.size()) +
                               " cells, expected " + std::to_string(feature_dim) + " or " +
                               std::to_string(feature_dim + 1) + ")");
    }
    dataset.unlabeled.push_back({std::move(row.values), hidden});
  }

  dataset.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  dataset.labeled_counts.assign(static_cast<std::size_t>(dataset.num_classes), 0);
  dataset.unlabeled_counts.assign(static_cast<std::size_t>(dataset.num_classes), 0);
  for (const LabeledExample& ex : dataset.labeled) {
    ++dataset.labeled_counts[static_cast<std::size_t>(ex.y)];
  }
  for (const UnlabeledExample& ex : dataset.unlabeled) {
    if (ex.hidden_y >= 0) ++dataset.unlabeled_counts[static_cast<std::size_t>(ex.hidden_y)];
  }
  return dataset;
}

void write_labeled_csv(const std::string& path, const std::vector<LabeledExample>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  std::string line;
  for (const LabeledExample& ex : rows) {
    line.clear();
    for (double v : ex.x) {
      format_double(line, v);
      line += ',';
    }
    line += std::to_string(ex.y);
    out << line << "\n";
  }
}

void write_unlabeled_csv(const std::string& path, const std::vector<UnlabeledExample>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  std::string line;
  for (const UnlabeledExample& ex : rows) {
    line.clear();
    for (double v : ex.x) {
      format_double(line, v);
      line += ',';
    }
    if (ex.hidden_y >= 0) {
      line += std::to_string(ex.hidden_y);
    } else if (!line.empty()) {
      line.pop_back();
    }
    out << line << "\n";
  }
}

void write_manifest(const std::string& path, const ManifestInfo& info) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "num_classes=" << info.num_classes << "\n";
  out << "gamma=" << info.gamma << "\n";
  out << "beta=" << info.beta << "\n";
  out << "seed=" << info.seed << "\n";
  out << "feature_dim=" << info.feature_dim << "\n";
  out << "sigma=" << info.sigma << "\n";
  auto write_counts = [&out](const char* key, const std::vector<std::int64_t>& counts) {
    out << key << "=";
    for (std::size_t i = 0; i < counts.size(); ++i) out << (i == 0 ? "" : ",") << counts[i];
    out << "\n";
  };
  write_counts("labeled_counts", info.labeled_counts);
  write_counts("unlabeled_counts", info.unlabeled_counts);
}

}  // namespace tras
