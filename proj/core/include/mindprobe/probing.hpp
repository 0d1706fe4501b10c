#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "mindprobe/lbfgs.hpp"
#include "mindprobe/model.hpp"

namespace mindprobe {

struct ProbeOptions {
  double l2_inverse_strength = 10.0;  // C
  int max_iter = 1000;
  std::uint64_t seed = 0;
  double gradient_tolerance = 1e-6;
};

struct Probe {
  Eigen::VectorXd w;
  double b = 0.0;
  int layer = -1;
  int iterations = 0;
  bool converged = false;
  double loss = 0.0;  // regularised objective at (w, b)
};

/// C * sum_i logloss_i + 0.5 * |w|^2 with the bias unpenalised. The packed
/// parameter vector is [w..., b]. Writes the gradient when `grad` is given.
double probe_objective(const MatrixD& x, const std::vector<bool>& z, const Eigen::VectorXd& params, double c,
                       Eigen::VectorXd* grad = nullptr);

Probe train_probe(const MatrixD& x, const std::vector<bool>& z, const ProbeOptions& options = {});

/// Predicted class of one row: sigma(w.x + b) >= 0.5.
bool probe_predict(const Probe& probe, const Eigen::Ref<const Eigen::RowVectorXd>& row);
std::vector<bool> probe_predictions(const Probe& probe, const MatrixD& x);
double eval_probe(const Probe& probe, const MatrixD& x, const std::vector<bool>& z);

struct Split {
  std::vector<std::size_t> train;  // ascending
  std::vector<std::size_t> test;   // ascending
  std::uint64_t seed = 0;
};

/// Stratified split: round(test_fraction * n_class) test rows per class.
Split stratified_split(const std::vector<bool>& z, std::uint64_t seed, double test_fraction = 0.2);

MatrixD select_rows(const MatrixD& x, const std::vector<std::size_t>& rows);
std::vector<bool> select_labels(const std::vector<bool>& z, const std::vector<std::size_t>& rows);

struct LayerResult {
  int layer = 0;
  double accuracy = 0.0;        // test
  double train_accuracy = 0.0;
  double standard_error = 0.0;  // binomial, test
  bool converged = false;
  int iterations = 0;
};

struct ProbeReport {
  std::vector<LayerResult> layers;
  int best_layer = -1;
  double best_accuracy = 0.0;
  std::uint64_t split_seed = 0;
  double l2_inverse_strength = 10.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;

  nlohmann::json to_json() const;
  /// Columns: layer,k,accuracy,n_train,n_test,converged
  std::string to_csv() const;
};

/// One probe per layer matrix, trained and tested on the same split.
ProbeReport layer_sweep(const std::vector<MatrixD>& layers, const std::vector<bool>& z, std::uint64_t split_seed,
                        const ProbeOptions& options = {});

struct PCABasis {
  Eigen::RowVectorXd mean;
  Eigen::MatrixXd components;  // d x d, one component per column
  Eigen::VectorXd explained_variance;  // descending
};

PCABasis fit_pca(const MatrixD& x);
/// (x - mean) * components[:, :k]
MatrixD pca_project(const MatrixD& x, const PCABasis& basis, int k);

struct SweepCell {
  int layer = 0;
  std::optional<int> k;  // empty = all components, i.e. the raw activations
  std::optional<double> accuracy;  // empty when not applicable
  bool converged = false;
  std::string note;
};

struct MemorisationReport {
  std::vector<SweepCell> cells;
  std::vector<int> k_list;
  std::uint64_t split_seed = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;

  const SweepCell* find(int layer, std::optional<int> k) const;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

/// Retrains probes on the top-k principal components (fit on the training
/// split) for every layer and k, next to the all-components baseline.
MemorisationReport memorisation_sweep(const std::vector<MatrixD>& layers, const std::vector<bool>& z,
                                      std::uint64_t split_seed, std::vector<int> k_list = {2, 10, 100, 1000},
                                      const ProbeOptions& options = {});

enum class ScalingKind { logarithmic, linear };

struct ScalingFit {
  ScalingKind kind = ScalingKind::logarithmic;
  double intercept = 0.0;
  double slope = 0.0;
  double r_squared = 0.0;
  bool degenerate = false;  // accuracies had zero variance
};

/// Least squares of accuracy against log(size) or size.
ScalingFit fit_scaling(const std::vector<double>& sizes, const std::vector<double>& accuracies, ScalingKind kind);

}  // namespace mindprobe
