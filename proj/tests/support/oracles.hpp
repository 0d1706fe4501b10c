#pragma once

// Slow, straightforward reference implementations used as test oracles.

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "mindprobe/model.hpp"
#include "mindprobe/rng.hpp"

namespace mindprobe::oracle {

struct LogisticFit {
  std::vector<double> w;
  double b = 0.0;
  double loss = 0.0;
};

inline double logistic_loss(const MatrixD& x, const std::vector<bool>& z, const std::vector<double>& w, double b,
                            double c) {
  double data = 0.0, reg = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = b;
    for (Eigen::Index j = 0; j < x.cols(); ++j) m += x(i, j) * w[static_cast<std::size_t>(j)];
    const double t = (z[static_cast<std::size_t>(i)] ? -1.0 : 1.0) * m;
    data += t > 30 ? t : std::log(1.0 + std::exp(t));
  }
  for (double v : w) reg += v * v;
  return c * data + 0.5 * reg;
}

/// Fixed-step gradient descent on C * sum log(1 + exp(-y m)) + |w|^2 / 2.
inline LogisticFit gradient_descent_logistic(const MatrixD& x, const std::vector<bool>& z, double c, int steps) {
  const auto n = x.rows();
  const auto d = x.cols();
  // Step 1/L with L bounding the Hessian: C * |[X 1]|_2^2 / 4 + 1.
  Eigen::MatrixXd xa(n, d + 1);
  xa << x, Eigen::VectorXd::Ones(n);
  const double top = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(xa.transpose() * xa).eigenvalues().maxCoeff();
  const double step = 1.0 / (c * top / 4.0 + 1.0);
  std::vector<double> w(static_cast<std::size_t>(d), 0.0);
  double b = 0.0;
  std::vector<double> gw(static_cast<std::size_t>(d));
  for (int s = 0; s < steps; ++s) {
    for (Eigen::Index j = 0; j < d; ++j) gw[static_cast<std::size_t>(j)] = w[static_cast<std::size_t>(j)];
    double gb = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double m = b;
      for (Eigen::Index j = 0; j < d; ++j) m += x(i, j) * w[static_cast<std::size_t>(j)];
      const double y = z[static_cast<std::size_t>(i)] ? 1.0 : -1.0;
      const double r = -y / (1.0 + std::exp(y * m));
      for (Eigen::Index j = 0; j < d; ++j) gw[static_cast<std::size_t>(j)] += c * r * x(i, j);
      gb += c * r;
    }
    for (Eigen::Index j = 0; j < d; ++j) w[static_cast<std::size_t>(j)] -= step * gw[static_cast<std::size_t>(j)];
    b -= step * gb;
  }
  return {w, b, logistic_loss(x, z, w, b, c)};
}

inline double accuracy(const MatrixD& x, const std::vector<bool>& z, const std::vector<double>& w, double b) {
  std::size_t ok = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = b;
    for (Eigen::Index j = 0; j < x.cols(); ++j) m += x(i, j) * w[static_cast<std::size_t>(j)];
    ok += (m >= 0) == z[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(ok) / static_cast<double>(x.rows());
}

/// Gaussian features with labels from a random linear rule, 10% flipped.
inline void noisy_linear_dataset(std::uint64_t seed, int n, int d, MatrixD& x, std::vector<bool>& z) {
  Rng rng(seed);
  x.resize(n, d);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  Eigen::VectorXd w(d);
  for (int j = 0; j < d; ++j) w[j] = rng.normal();
  z.assign(static_cast<std::size_t>(n), false);
  for (int i = 0; i < n; ++i) {
    bool label = x.row(i).dot(w) + 0.3 > 0;
    if (rng.uniform() < 0.1) label = !label;
    z[static_cast<std::size_t>(i)] = label;
  }
}

/// Leading eigenvector and eigenvalue of the sample covariance by power
/// iteration.
inline std::pair<Eigen::VectorXd, double> top_component(const MatrixD& x, int iterations = 5000) {
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centred = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(x.rows() - 1);
  Eigen::VectorXd v = Eigen::VectorXd::Ones(x.cols()).normalized();
  for (int i = 0; i < iterations; ++i) v = (cov * v).normalized();
  return {v, v.dot(cov * v)};
}

}  // namespace mindprobe::oracle
