#include "mindprobe/probing.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mindprobe/errors.hpp"
#include "mindprobe/rng.hpp"

namespace mindprobe {

namespace {

double softplus(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

void check_training_data(const MatrixD& x, const std::vector<bool>& z) {
  if (static_cast<std::size_t>(x.rows()) != z.size()) {
    throw ShapeError("probe data has " + std::to_string(x.rows()) + " rows but " + std::to_string(z.size()) +
                     " labels");
  }
  if (!x.allFinite()) throw NumericError("probe features contain non-finite values");
  const auto pos = static_cast<std::size_t>(std::count(z.begin(), z.end(), true));
  if (pos < 2 || z.size() - pos < 2) {
    throw DataError("probe training needs at least two examples of each class (got " + std::to_string(pos) +
                    " positive, " + std::to_string(z.size() - pos) + " negative)");
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

double probe_objective(const MatrixD& x, const std::vector<bool>& z, const Eigen::VectorXd& params, double c,
                       Eigen::VectorXd* grad) {
  const Eigen::Index d = x.cols();
  const auto w = params.head(d);
  const double b = params[d];
  const Eigen::VectorXd margin = (x * w).array() + b;
  double data_loss = 0.0;
  Eigen::VectorXd coef(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double y = z[static_cast<std::size_t>(i)] ? 1.0 : -1.0;
    data_loss += softplus(-y * margin[i]);
    coef[i] = -y * sigmoid(-y * margin[i]);
  }
  if (grad != nullptr) {
    grad->resize(d + 1);
    grad->head(d) = c * (x.transpose() * coef) + w;
    (*grad)[d] = c * coef.sum();
  }
  return c * data_loss + 0.5 * w.squaredNorm();
}

Probe train_probe(const MatrixD& x, const std::vector<bool>& z, const ProbeOptions& options) {
  check_training_data(x, z);
  if (!(options.l2_inverse_strength > 0)) throw ConfigError("l2_inverse_strength must be positive");
  const double c = options.l2_inverse_strength;
  LbfgsOptions lo;
  lo.max_iterations = options.max_iter;
  lo.gradient_tolerance = options.gradient_tolerance;
  // Deterministic from a zero start; the seed is only recorded.
  const auto res = lbfgs_minimize([&](const Eigen::VectorXd& p, Eigen::VectorXd& g) {
    return probe_objective(x, z, p, c, &g);
  }, Eigen::VectorXd::Zero(x.cols() + 1), lo);
  if (!res.x.allFinite()) throw NumericError("probe parameters became non-finite");
  Probe p;
  p.w = res.x.head(x.cols());
  p.b = res.x[x.cols()];
  p.iterations = res.iterations;
  p.converged = res.converged;
  p.loss = res.value;
  return p;
}

bool probe_predict(const Probe& probe, const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  return sigmoid(row.dot(probe.w) + probe.b) >= 0.5;
}

std::vector<bool> probe_predictions(const Probe& probe, const MatrixD& x) {
  if (x.cols() != probe.w.size()) {
    throw ShapeError("probe expects width " + std::to_string(probe.w.size()) + ", data has " +
                     std::to_string(x.cols()));
  }
  std::vector<bool> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) out[static_cast<std::size_t>(i)] = probe_predict(probe, x.row(i));
  return out;
}

double eval_probe(const Probe& probe, const MatrixD& x, const std::vector<bool>& z) {
  if (static_cast<std::size_t>(x.rows()) != z.size()) throw ShapeError("row and label counts differ");
  if (z.empty()) throw DataError("cannot evaluate a probe on zero rows");
  const auto pred = probe_predictions(probe, x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < z.size(); ++i) hit += pred[i] == z[i];
  return static_cast<double>(hit) / static_cast<double>(z.size());
}

Split stratified_split(const std::vector<bool>& z, std::uint64_t seed, double test_fraction) {
  Split s;
  s.seed = seed;
  Rng rng(seed);
  for (bool cls : {false, true}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (z[i] == cls) idx.push_back(i);
    }
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    if (idx.size() < 5 || n_test < 1 || idx.size() - n_test < 2) {
      throw DataError("too few items for a stratified split: class " + std::to_string(cls) + " has " +
                      std::to_string(idx.size()));
    }
    rng.shuffle(std::span<std::size_t>(idx));
    s.test.insert(s.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.train.insert(s.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

MatrixD select_rows(const MatrixD& x, const std::vector<std::size_t>& rows) {
  MatrixD out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

std::vector<bool> select_labels(const std::vector<bool>& z, const std::vector<std::size_t>& rows) {
  std::vector<bool> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = z[rows[i]];
  return out;
}

nlohmann::json ProbeReport::to_json() const {
  nlohmann::json layers_json = nlohmann::json::array();
  for (const auto& l : layers) {
    layers_json.push_back({{"layer", l.layer},
                           {"accuracy", l.accuracy},
                           {"train_accuracy", l.train_accuracy},
                           {"standard_error", l.standard_error},
                           {"converged", l.converged},
                           {"iterations", l.iterations}});
  }
  return {{"layers", layers_json},
          {"best_layer", best_layer},
          {"best_accuracy", best_accuracy},
          {"split", {{"kind", "stratified 80/20"}, {"seed", split_seed}}},
          {"l2_inverse_strength", l2_inverse_strength},
          {"n_train", n_train},
          {"n_test", n_test}};
}

std::string ProbeReport::to_csv() const {
  std::string out = "layer,k,accuracy,n_train,n_test,converged\n";
  for (const auto& l : layers) {
    out += std::to_string(l.layer) + ",All," + fmt(l.accuracy) + "," + std::to_string(n_train) + "," +
           std::to_string(n_test) + "," + (l.converged ? "true" : "false") + "\n";
  }
  return out;
}

ProbeReport layer_sweep(const std::vector<MatrixD>& layers, const std::vector<bool>& z, std::uint64_t split_seed,
                        const ProbeOptions& options) {
  if (layers.empty()) throw DataError("dataset has no layers");
  const Split split = stratified_split(z, split_seed);
  const auto z_train = select_labels(z, split.train);
  const auto z_test = select_labels(z, split.test);
  ProbeReport report;
  report.split_seed = split_seed;
  report.l2_inverse_strength = options.l2_inverse_strength;
  report.n_train = split.train.size();
  report.n_test = split.test.size();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const MatrixD x_train = select_rows(layers[l], split.train);
    const MatrixD x_test = select_rows(layers[l], split.test);
    Probe p = train_probe(x_train, z_train, options);
    p.layer = static_cast<int>(l);
    LayerResult r;
    r.layer = static_cast<int>(l);
    r.accuracy = eval_probe(p, x_test, z_test);
    r.train_accuracy = eval_probe(p, x_train, z_train);
    r.standard_error = std::sqrt(r.accuracy * (1.0 - r.accuracy) / static_cast<double>(z_test.size()));
    r.converged = p.converged;
    r.iterations = p.iterations;
    if (report.best_layer < 0 || r.accuracy > report.best_accuracy) {
      report.best_layer = r.layer;
      report.best_accuracy = r.accuracy;
    }
    report.layers.push_back(r);
  }
  return report;
}

const SweepCell* MemorisationReport::find(int layer, std::optional<int> k) const {
  for (const auto& c : cells) {
    if (c.layer == layer && c.k == k) return &c;
  }
  return nullptr;
}

nlohmann::json MemorisationReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json row{{"layer", c.layer}, {"k", c.k ? nlohmann::json(*c.k) : nlohmann::json("All")}};
    row["accuracy"] = c.accuracy ? nlohmann::json(*c.accuracy) : nlohmann::json(nullptr);
    row["converged"] = c.converged;
    if (!c.note.empty()) row["note"] = c.note;
    rows.push_back(std::move(row));
  }
  return {{"cells", rows},
          {"k_list", k_list},
          {"split", {{"kind", "stratified 80/20"}, {"seed", split_seed}}},
          {"n_train", n_train},
          {"n_test", n_test}};
}

std::string MemorisationReport::to_csv() const {
  std::string out = "layer,k,accuracy,n_train,n_test,converged\n";
  for (const auto& c : cells) {
    out += std::to_string(c.layer) + "," + (c.k ? std::to_string(*c.k) : std::string("All")) + "," +
           (c.accuracy ? fmt(*c.accuracy) : std::string("n/a")) + "," + std::to_string(n_train) + "," +
           std::to_string(n_test) + "," + (c.converged ? "true" : "false") + "\n";
  }
  return out;
}

MemorisationReport memorisation_sweep(const std::vector<MatrixD>& layers, const std::vector<bool>& z,
                                      std::uint64_t split_seed, std::vector<int> k_list,
                                      const ProbeOptions& options) {
  if (layers.empty()) throw DataError("dataset has no layers");
  for (int k : k_list) {
    if (k < 1) throw ConfigError("PCA k must be positive");
  }
  const Split split = stratified_split(z, split_seed);
  const auto z_train = select_labels(z, split.train);
  const auto z_test = select_labels(z, split.test);
  MemorisationReport report;
  report.k_list = k_list;
  report.split_seed = split_seed;
  report.n_train = split.train.size();
  report.n_test = split.test.size();

  for (std::size_t l = 0; l < layers.size(); ++l) {
    const int layer = static_cast<int>(l);
    const MatrixD x_train = select_rows(layers[l], split.train);
    const MatrixD x_test = select_rows(layers[l], split.test);
    {
      const Probe p = train_probe(x_train, z_train, options);
      report.cells.push_back({layer, std::nullopt, eval_probe(p, x_test, z_test), p.converged, ""});
    }
    std::optional<PCABasis> basis;
    std::string degenerate;
    try {
      basis = fit_pca(x_train);
    } catch (const DataError& e) {
      degenerate = e.what();
    }
    for (int k : k_list) {
      SweepCell cell{layer, k, std::nullopt, false, ""};
      if (k > layers[l].cols()) {
        cell.note = "not applicable: k exceeds width " + std::to_string(layers[l].cols());
      } else if (!basis) {
        cell.note = "not applicable: " + degenerate;
      } else {
        const Probe p = train_probe(pca_project(x_train, *basis, k), z_train, options);
        cell.accuracy = eval_probe(p, pca_project(x_test, *basis, k), z_test);
        cell.converged = p.converged;
      }
      report.cells.push_back(std::move(cell));
    }
  }
  return report;
}

ScalingFit fit_scaling(const std::vector<double>& sizes, const std::vector<double>& accuracies, ScalingKind kind) {
  if (sizes.size() != accuracies.size()) throw ShapeError("sizes and accuracies differ in length");
  std::vector<double> xs;
  for (double s : sizes) {
    if (kind == ScalingKind::logarithmic && !(s > 0)) throw DataError("logarithmic fit needs positive sizes");
    xs.push_back(kind == ScalingKind::logarithmic ? std::log(s) : s);
  }
  std::vector<double> distinct = xs;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) throw DataError("scaling fit needs at least two distinct sizes");

  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += accuracies[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (accuracies[i] - my);
    syy += (accuracies[i] - my) * (accuracies[i] - my);
  }
  ScalingFit fit;
  fit.kind = kind;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  if (syy == 0.0) {
    fit.degenerate = true;
    fit.r_squared = 1.0;
    return fit;
  }
  double ss_res = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = accuracies[i] - (fit.intercept + fit.slope * xs[i]);
    ss_res += r * r;
  }
  fit.r_squared = 1.0 - ss_res / syy;
  return fit;
}

}  // namespace mindprobe
