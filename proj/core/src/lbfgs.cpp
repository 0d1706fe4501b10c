#include "mindprobe/lbfgs.hpp"

#include <cmath>
#include <deque>
#include <limits>

#include "mindprobe/errors.hpp"

namespace mindprobe {

namespace {

struct Probe1d {
  double alpha, value, slope;
};

// Minimiser of the cubic through (a, fa, ga) and (b, fb, gb), clamped to the
// interval; falls back to bisection when the cubic is degenerate.
double cubic_step(const Probe1d& a, const Probe1d& b) {
  const double lo = std::min(a.alpha, b.alpha), hi = std::max(a.alpha, b.alpha);
  const double d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.alpha - b.alpha);
  const double disc = d1 * d1 - a.slope * b.slope;
  if (disc >= 0.0) {
    const double d2 = std::copysign(std::sqrt(disc), b.alpha - a.alpha);
    const double t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    const double margin = 0.1 * (hi - lo);
    if (std::isfinite(t) && t > lo + margin && t < hi - margin) return t;
  }
  return 0.5 * (lo + hi);
}

struct LineSearch {
  const Objective& f;
  const LbfgsOptions& opt;
  const Eigen::VectorXd& x;
  const Eigen::VectorXd& dir;
  Eigen::VectorXd trial;
  Eigen::VectorXd grad;
  int evaluations = 0;
  double last_alpha = std::numeric_limits<double>::quiet_NaN();

  Probe1d eval(double alpha) {
    last_alpha = alpha;
    trial = x + alpha * dir;
    const double v = f(trial, grad);
    ++evaluations;
    return {alpha, v, grad.dot(dir)};
  }

  // Nocedal & Wright, algorithms 3.5 / 3.6.
  bool run(const Probe1d& start, double alpha, Probe1d& out) {
    Probe1d prev = start;
    for (int i = 0; i < opt.max_line_search_steps; ++i) {
      Probe1d cur = eval(alpha);
      if (!std::isfinite(cur.value) || cur.value > start.value + opt.wolfe_c1 * alpha * start.slope ||
          (i > 0 && cur.value >= prev.value)) {
        return zoom(start, prev, cur, out);
      }
      if (std::abs(cur.slope) <= -opt.wolfe_c2 * start.slope) {
        out = cur;
        return true;
      }
      if (cur.slope >= 0.0) return zoom(start, cur, prev, out);
      prev = cur;
      alpha *= 2.0;
    }
    return false;
  }

  bool zoom(const Probe1d& start, Probe1d lo, Probe1d hi, Probe1d& out) {
    for (int i = 0; i < opt.max_line_search_steps; ++i) {
      double alpha = std::isfinite(hi.value) ? cubic_step(lo, hi) : 0.5 * (lo.alpha + hi.alpha);
      if (std::abs(hi.alpha - lo.alpha) < 1e-16 * std::max(1.0, std::abs(lo.alpha))) break;
      Probe1d cur = eval(alpha);
      if (!std::isfinite(cur.value) || cur.value > start.value + opt.wolfe_c1 * alpha * start.slope ||
          cur.value >= lo.value) {
        hi = cur;
      } else {
        if (std::abs(cur.slope) <= -opt.wolfe_c2 * start.slope) {
          out = cur;
          return true;
        }
        if (cur.slope * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
        lo = cur;
      }
    }
    // Accept the best sufficient-decrease point found, if any.
    if (lo.alpha > 0.0 && lo.value < start.value) {
      if (lo.alpha != last_alpha) eval(lo.alpha);
      out = lo;
      return true;
    }
    return false;
  }
};

}  // namespace

LbfgsResult lbfgs_minimize(const Objective& f, Eigen::VectorXd x0, const LbfgsOptions& opt) {
  if (opt.history < 1 || opt.max_iterations < 0) throw ConfigError("invalid L-BFGS options");
  LbfgsResult res;
  res.x = std::move(x0);
  Eigen::VectorXd g(res.x.size());
  res.value = f(res.x, g);
  res.evaluations = 1;
  if (!std::isfinite(res.value) || !g.allFinite()) throw NumericError("objective is not finite at the start point");

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  std::vector<double> alpha_buf(static_cast<std::size_t>(opt.history));

  if (g.size() == 0 || g.lpNorm<Eigen::Infinity>() <= opt.gradient_tolerance) {
    res.converged = true;
    res.message = "gradient below tolerance";
    return res;
  }

  for (int it = 0; it < opt.max_iterations; ++it) {
    // Two-loop recursion.
    Eigen::VectorXd q = g;
    const std::size_t m = s_hist.size();
    for (std::size_t i = m; i-- > 0;) {
      alpha_buf[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha_buf[i] * y_hist[i];
    }
    double gamma = 1.0;
    if (m > 0) gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    q *= gamma;
    for (std::size_t i = 0; i < m; ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(q);
      q += (alpha_buf[i] - beta) * s_hist[i];
    }
    Eigen::VectorXd dir = -q;
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      // Not a descent direction: restart from steepest descent.
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      dir = -g;
      slope = g.dot(dir);
    }
    const double first_alpha = m == 0 ? std::min(1.0, 1.0 / g.lpNorm<Eigen::Infinity>()) : 1.0;

    LineSearch ls{f, opt, res.x, dir, {}, Eigen::VectorXd(g.size())};
    Probe1d accepted{};
    const bool ok = ls.run({0.0, res.value, slope}, first_alpha, accepted);
    res.evaluations += ls.evaluations;
    res.iterations = it + 1;
    if (!ok) {
      res.message = "line search failed";
      return res;
    }
    Eigen::VectorXd s = ls.trial - res.x;
    Eigen::VectorXd y = ls.grad - g;
    const double previous = res.value;
    res.x = ls.trial;
    res.value = accepted.value;
    g = ls.grad;

    const double sy = s.dot(y);
    if (sy > 1e-12 * y.squaredNorm()) {
      if (static_cast<int>(s_hist.size()) == opt.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
    }

    if (g.lpNorm<Eigen::Infinity>() <= opt.gradient_tolerance) {
      res.converged = true;
      res.message = "gradient below tolerance";
      return res;
    }
    if (previous - res.value <= opt.relative_tolerance * std::max({std::abs(previous), std::abs(res.value), 1.0})) {
      res.converged = true;
      res.message = "objective decrease below tolerance";
      return res;
    }
  }
  res.message = "iteration limit reached";
  return res;
}

}  // namespace mindprobe
