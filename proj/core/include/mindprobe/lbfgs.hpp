#pragma once

#include <functional>
#include <string>

#include <Eigen/Core>

namespace mindprobe {

struct LbfgsOptions {
  int max_iterations = 1000;
  int history = 10;
  /// Converged when the largest gradient component falls below this.
  double gradient_tolerance = 1e-6;
  /// ... or when the relative objective decrease over one step is below this.
  double relative_tolerance = 1e-14;
  int max_line_search_steps = 40;
  double wolfe_c1 = 1e-4;
  double wolfe_c2 = 0.9;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string message;
};

/// Objective: returns f(x) and writes the gradient into `grad`.
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

/// Limited-memory BFGS with a strong-Wolfe line search.
LbfgsResult lbfgs_minimize(const Objective& f, Eigen::VectorXd x0, const LbfgsOptions& options = {});

}  // namespace mindprobe
