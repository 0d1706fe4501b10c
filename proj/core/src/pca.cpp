#include <Eigen/Eigenvalues>

#include "mindprobe/errors.hpp"
#include "mindprobe/probing.hpp"

namespace mindprobe {

PCABasis fit_pca(const MatrixD& x) {
  if (x.rows() < 2) throw DataError("PCA needs at least two rows");
  if (!x.allFinite()) throw NumericError("PCA input contains non-finite values");
  PCABasis basis;
  basis.mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - basis.mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  if (cov.trace() <= 0.0) throw DataError("degenerate data: all rows are equal");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");
  // Eigen returns ascending eigenvalues.
  const Eigen::Index d = cov.rows();
  basis.components.resize(d, d);
  basis.explained_variance.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const Eigen::Index src = d - 1 - i;
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    basis.components.col(i) = v;
    basis.explained_variance[i] = std::max(0.0, solver.eigenvalues()[src]);
  }
  return basis;
}

MatrixD pca_project(const MatrixD& x, const PCABasis& basis, int k) {
  const Eigen::Index d = basis.components.rows();
  if (k < 1 || k > d) {
    throw ConfigError("k = " + std::to_string(k) + " is outside [1, " + std::to_string(d) + "]");
  }
  if (x.cols() != d) throw ShapeError("PCA basis expects width " + std::to_string(d));
  return (x.rowwise() - basis.mean) * basis.components.leftCols(k);
}

}  // namespace mindprobe
