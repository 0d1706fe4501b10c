#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "mindprobe/errors.hpp"
#include "mindprobe/lbfgs.hpp"
#include "mindprobe/probing.hpp"
#include "mindprobe/rng.hpp"
#include "support/oracles.hpp"

namespace mindprobe {
namespace {

TEST(Lbfgs, MinimisesRosenbrock) {
  const auto f = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    const double a = 1 - x[0], b = x[1] - x[0] * x[0];
    g.resize(2);
    g[0] = -2 * a - 400 * x[0] * b;
    g[1] = 200 * b;
    return a * a + 100 * b * b;
  };
  const auto r = lbfgs_minimize(f, Eigen::Vector2d(-1.2, 1.0));
  EXPECT_TRUE(r.converged) << r.message;
  EXPECT_NEAR(r.x[0], 1.0, 1e-5);
  EXPECT_NEAR(r.x[1], 1.0, 1e-5);
}

TEST(Lbfgs, SolvesIllConditionedQuadratic) {
  Eigen::VectorXd scale(6);
  scale << 1, 10, 100, 1000, 1e4, 1e5;
  const Eigen::VectorXd target = Eigen::VectorXd::LinSpaced(6, -2, 3);
  const auto f = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    const Eigen::VectorXd d = x - target;
    g = scale.cwiseProduct(d);
    return 0.5 * d.dot(g);
  };
  const auto r = lbfgs_minimize(f, Eigen::VectorXd::Zero(6));
  EXPECT_TRUE(r.converged);
  EXPECT_LT((r.x - target).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Lbfgs, RejectsNonFiniteStart) {
  const auto f = [](const Eigen::VectorXd&, Eigen::VectorXd& g) {
    g = Eigen::VectorXd::Zero(1);
    return std::nan("");
  };
  EXPECT_THROW(lbfgs_minimize(f, Eigen::VectorXd::Zero(1)), NumericError);
}

TEST(ProbeObjective, MatchesOracleAndFiniteDifferences) {
  MatrixD x;
  std::vector<bool> z;
  oracle::noisy_linear_dataset(3, 30, 5, x, z);
  Eigen::VectorXd p(6);
  p << 0.3, -0.2, 0.1, 0.5, -0.4, 0.05;
  Eigen::VectorXd g;
  const double f = probe_objective(x, z, p, 10.0, &g);
  std::vector<double> w(p.data(), p.data() + 5);
  EXPECT_NEAR(f, oracle::logistic_loss(x, z, w, p[5], 10.0), 1e-9);
  for (int i = 0; i < 6; ++i) {
    Eigen::VectorXd hi = p, lo = p;
    hi[i] += 1e-6;
    lo[i] -= 1e-6;
    const double fd = (probe_objective(x, z, hi, 10.0, nullptr) - probe_objective(x, z, lo, 10.0, nullptr)) / 2e-6;
    EXPECT_NEAR(g[i], fd, 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST(TrainProbe, NoWorseThanGradientDescentOracle) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    MatrixD x;
    std::vector<bool> z;
    oracle::noisy_linear_dataset(100 + seed, 200, 32, x, z);
    const auto probe = train_probe(x, z);
    const auto gd = oracle::gradient_descent_logistic(x, z, 10.0, 10000);
    EXPECT_LE(probe.loss, gd.loss + 1e-4);
    std::vector<double> w(probe.w.data(), probe.w.data() + probe.w.size());
    EXPECT_NEAR(oracle::accuracy(x, z, w, probe.b), oracle::accuracy(x, z, gd.w, gd.b), 0.01);
  }
}

TEST(TrainProbe, FindsPlantedSignal) {
  Rng rng(8);
  MatrixD x(400, 20);
  std::vector<bool> z(400);
  for (int i = 0; i < 400; ++i) {
    z[i] = i % 2 == 0;
    for (int j = 0; j < 20; ++j) x(i, j) = rng.normal();
    x(i, 7) += z[i] ? 1.5 : -1.5;
  }
  const auto split = stratified_split(z, 4);
  const auto probe = train_probe(select_rows(x, split.train), select_labels(z, split.train));
  EXPECT_GT(eval_probe(probe, select_rows(x, split.test), select_labels(z, split.test)), 0.85);
  Eigen::Index top;
  probe.w.cwiseAbs().maxCoeff(&top);
  EXPECT_EQ(top, 7);
}

TEST(TrainProbe, ShuffledLabelsStayNearChance) {
  Rng rng(21);
  double total = 0;
  const int trials = 10;
  for (int t = 0; t < trials; ++t) {
    MatrixD x;
    std::vector<bool> z;
    oracle::noisy_linear_dataset(500 + t, 300, 16, x, z);
    std::vector<char> shuffled(z.begin(), z.end());
    rng.shuffle(std::span<char>(shuffled));
    z.assign(shuffled.begin(), shuffled.end());
    const auto split = stratified_split(z, 1);
    const auto probe = train_probe(select_rows(x, split.train), select_labels(z, split.train));
    total += eval_probe(probe, select_rows(x, split.test), select_labels(z, split.test));
  }
  EXPECT_NEAR(total / trials, 0.5, 0.08);
}

TEST(TrainProbe, InputErrors) {
  MatrixD x = MatrixD::Zero(4, 2);
  EXPECT_THROW(train_probe(x, {true, false, true}), ShapeError);
  EXPECT_THROW(train_probe(x, {true, true, true, false}), DataError);
  x(0, 0) = std::nan("");
  EXPECT_THROW(train_probe(x, {true, true, false, false}), NumericError);
}

TEST(StratifiedSplit, KeepsClassSharesAndIsDeterministic) {
  std::vector<bool> z;
  for (int i = 0; i < 47; ++i) z.push_back(true);
  for (int i = 0; i < 33; ++i) z.push_back(false);
  const auto a = stratified_split(z, 12);
  const auto b = stratified_split(z, 12);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  std::size_t pos = 0;
  for (auto i : a.test) pos += z[i];
  EXPECT_EQ(pos, 9u);  // round(0.2 * 47)
  EXPECT_EQ(a.test.size() - pos, 7u);  // round(0.2 * 33)
  std::set<std::size_t> all(a.train.begin(), a.train.end());
  for (auto i : a.test) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), z.size());
  EXPECT_NE(stratified_split(z, 13).test, a.test);

  std::vector<bool> tiny{true, true, true, true, false, false, false, false, false, false};
  EXPECT_THROW(stratified_split(tiny, 0), DataError);
}

TEST(LayerSweep, ReportsBestLayer) {
  Rng rng(2);
  std::vector<bool> z(200);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = i % 2 == 0;
  std::vector<MatrixD> layers(3, MatrixD(200, 6));
  for (auto& m : layers) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  }
  for (int i = 0; i < 200; ++i) layers[1](i, 0) += z[i] ? 4.0 : -4.0;
  const auto rep = layer_sweep(layers, z, 5);
  EXPECT_EQ(rep.best_layer, 1);
  EXPECT_GT(rep.best_accuracy, 0.95);
  EXPECT_EQ(rep.n_test, 40u);
  EXPECT_EQ(rep.to_csv().substr(0, rep.to_csv().find('\n')), "layer,k,accuracy,n_train,n_test,converged");
}

TEST(Pca, MatchesPowerIterationAndSignConvention) {
  Rng rng(4);
  MatrixD x(300, 5);
  for (int i = 0; i < 300; ++i) {
    const double t = rng.normal() * 3;
    for (int j = 0; j < 5; ++j) x(i, j) = t * (j + 1) * 0.2 + rng.normal() * 0.3;
  }
  const auto basis = fit_pca(x);
  const auto [v, lambda] = oracle::top_component(x);
  EXPECT_NEAR(basis.explained_variance[0], lambda, 1e-8 * lambda);
  EXPECT_NEAR(std::abs(basis.components.col(0).dot(v)), 1.0, 1e-8);
  for (int c = 0; c < 5; ++c) {
    Eigen::Index at;
    basis.components.col(c).cwiseAbs().maxCoeff(&at);
    EXPECT_GT(basis.components(at, c), 0.0);
    if (c > 0) EXPECT_GE(basis.explained_variance[c - 1], basis.explained_variance[c]);
  }
  EXPECT_LT((basis.components.transpose() * basis.components - Eigen::MatrixXd::Identity(5, 5)).norm(), 1e-10);
}

TEST(Pca, FullProjectionIsARotation) {
  Rng rng(9);
  MatrixD x(50, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const auto basis = fit_pca(x);
  const MatrixD p = pca_project(x, basis, 4);
  for (int i = 1; i < 50; ++i) EXPECT_NEAR((p.row(i) - p.row(0)).norm(), (x.row(i) - x.row(0)).norm(), 1e-9);
  EXPECT_EQ(pca_project(x, basis, 2).cols(), 2);
  EXPECT_THROW(pca_project(x, basis, 5), ConfigError);
  EXPECT_THROW(fit_pca(MatrixD::Ones(5, 3)), DataError);
}

TEST(MemorisationSweep, MarksOversizedKAndRecoversFullAccuracy) {
  Rng rng(6);
  std::vector<bool> z(120);
  std::vector<MatrixD> layers(2, MatrixD(120, 8));
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = i % 3 == 0;
  for (auto& m : layers) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  }
  for (int i = 0; i < 120; ++i) layers[0](i, 2) += z[i] ? 2.0 : -2.0;
  const auto rep = memorisation_sweep(layers, z, 3, {2, 8, 100});
  const auto* big = rep.find(0, 100);
  ASSERT_NE(big, nullptr);
  EXPECT_FALSE(big->accuracy.has_value());
  EXPECT_NE(big->note.find("k exceeds width"), std::string::npos);
  for (int l = 0; l < 2; ++l) {
    const auto* full = rep.find(l, std::nullopt);
    const auto* all = rep.find(l, 8);
    ASSERT_TRUE(full && all && full->accuracy && all->accuracy);
    EXPECT_NEAR(*full->accuracy, *all->accuracy, 0.01);
  }
}

TEST(ScalingFit, ExactLogarithmicPoints) {
  const std::vector<double> sizes{70e6, 160e6, 410e6, 1e9, 2.8e9, 6.9e9, 12e9};
  std::vector<double> acc;
  for (double s : sizes) acc.push_back(0.2 + 0.05 * std::log(s));
  const auto fit = fit_scaling(sizes, acc, ScalingKind::logarithmic);
  EXPECT_NEAR(fit.r_squared, 1.0, 1e-12);
  EXPECT_NEAR(fit.slope, 0.05, 1e-12);
  EXPECT_LT(fit_scaling(sizes, acc, ScalingKind::linear).r_squared, 0.95);
}

TEST(ScalingFit, DegenerateAndInvalid) {
  const auto flat = fit_scaling({1, 2, 3}, {0.5, 0.5, 0.5}, ScalingKind::linear);
  EXPECT_TRUE(flat.degenerate);
  EXPECT_DOUBLE_EQ(flat.r_squared, 1.0);
  EXPECT_THROW(fit_scaling({1, 2}, {0.5}, ScalingKind::linear), ShapeError);
  EXPECT_THROW(fit_scaling({0, 2}, {0.5, 0.6}, ScalingKind::logarithmic), DataError);
  EXPECT_THROW(fit_scaling({2, 2}, {0.5, 0.6}, ScalingKind::linear), DataError);
}

}  // namespace
}  // namespace mindprobe
