#pragma once

// Independent reference computations shared by the unit and acceptance tests.
// Nothing here calls into the library's own formulas for the quantity checked.

#include "affcl/flow.hpp"
#include "affcl/linalg.hpp"
#include "affcl/metrics.hpp"
#include "affcl/params.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

namespace affcl::oracle {

inline Mat random_mat(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline std::vector<int> random_labels(Rng& rng, std::size_t n, int classes) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> y(n);
  for (auto& v : y) v = u(rng);
  return y;
}

/// Overwrites every parameter with U(-scale, scale).
inline void randomize(const ParamRefs& params, Rng& rng, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (Param* p : params)
    for (auto& v : p->value) v = u(rng);
}

inline Param* find_param(const ParamRefs& params, const std::string& name) {
  for (Param* p : params)
    if (p->name == name) return p;
  return nullptr;
}

inline constexpr double kLogTwoPi = 1.8378770664093453;

/// log N(u; 0, I) written out term by term.
inline double normal_log_density(const RowVec& u) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < u.size(); ++j) s += -0.5 * std::log(2.0 * std::numbers::pi) - 0.5 * u[j] * u[j];
  return s;
}

/// log of the literal diagonal-covariance Gaussian density formula.
inline double diag_gaussian_log_density(const RowVec& u, const Vec& mean, const Vec& var) {
  const auto d = static_cast<double>(u.size());
  double det = 1.0;
  double quad = 0.0;
  for (Eigen::Index j = 0; j < u.size(); ++j) {
    det *= var[j];
    quad += (u[j] - mean[j]) * (u[j] - mean[j]) / var[j];
  }
  return std::log(1.0 / std::sqrt(std::pow(2.0 * std::numbers::pi, d) * det)) - 0.5 * quad;
}

/// log|det J| of z -> g(z|y) at a single point, by central differences.
inline double numerical_logdet(const flow::FlowModel& flow, const RowVec& z, int label, double h = 1e-4) {
  const Eigen::Index d = z.size();
  Mat jac(d, d);
  const std::vector<int> y{label};
  for (Eigen::Index j = 0; j < d; ++j) {
    Mat plus = z;
    Mat minus = z;
    plus(0, j) += h;
    minus(0, j) -= h;
    const RowVec fp = flow.forward(plus, y).u.row(0);
    const RowVec fm = flow.forward(minus, y).u.row(0);
    jac.col(j) = ((fp - fm) / (2.0 * h)).transpose();
  }
  return std::log(std::abs(Eigen::MatrixXd(jac).determinant()));
}

struct GradientReport {
  std::size_t checked = 0;
  double max_rel = 0.0;
  std::string worst;
};

/// Compares accumulated analytic gradients (already in p->grad) with central
/// differences of `loss`. Relative error uses max(|a|, |n|, floor) as the
/// denominator so coordinates with vanishing gradient are judged absolutely.
inline GradientReport check_gradients(const ParamRefs& params, const std::function<double()>& loss,
                                      double h = 1e-6, double floor = 1e-6) {
  GradientReport r;
  for (Param* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = loss();
      p->value[i] = saved - h;
      const double down = loss();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++r.checked;
      if (rel > r.max_rel) {
        r.max_rel = rel;
        r.worst = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

inline std::size_t parameter_count(const ParamRefs& params) {
  std::size_t n = 0;
  for (const Param* p : params) n += p->size();
  return n;
}

/// Trapezoid rule of exp(log_prob) over [-L, L] for a d = 1 flow.
inline double quadrature_1d(const flow::FlowModel& flow, int label, double L = 30.0, int points = 10000) {
  Mat z(points, 1);
  for (int i = 0; i < points; ++i) z(i, 0) = -L + 2.0 * L * i / (points - 1);
  const std::vector<int> y(static_cast<std::size_t>(points), label);
  const Vec lp = flow.log_prob(z, y);
  const double dx = 2.0 * L / (points - 1);
  double s = 0.0;
  for (int i = 0; i < points; ++i) s += (i == 0 || i == points - 1 ? 0.5 : 1.0) * std::exp(lp[i]);
  return s * dx;
}

/// Tensor-product trapezoid rule for a d = 2 flow.
inline double quadrature_2d(const flow::FlowModel& flow, int label, double L = 20.0, int points = 801) {
  const double dx = 2.0 * L / (points - 1);
  Mat z(static_cast<Eigen::Index>(points) * points, 2);
  for (int i = 0; i < points; ++i)
    for (int j = 0; j < points; ++j) {
      z(static_cast<Eigen::Index>(i) * points + j, 0) = -L + dx * i;
      z(static_cast<Eigen::Index>(i) * points + j, 1) = -L + dx * j;
    }
  const std::vector<int> y(static_cast<std::size_t>(z.rows()), label);
  const Vec lp = flow.log_prob(z, y);
  double s = 0.0;
  for (int i = 0; i < points; ++i)
    for (int j = 0; j < points; ++j) {
      const double wi = (i == 0 || i == points - 1) ? 0.5 : 1.0;
      const double wj = (j == 0 || j == points - 1) ? 0.5 : 1.0;
      s += wi * wj * std::exp(lp[static_cast<Eigen::Index>(i) * points + j]);
    }
  return s * dx * dx;
}

/// Weighted mean of a final row, written as the literal double sum.
inline double average_accuracy(const std::vector<std::vector<std::vector<double>>>& a,
                               const std::vector<std::vector<double>>& n) {
  const std::size_t T = a[0].size() - 1;
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i <= T; ++i) {
      num += a[k][T][i] * n[k][i];
      den += n[k][i];
    }
  return num / den;
}

/// Brute-force max scan over all earlier steps at which a task had been learned.
inline double average_forgetting(const std::vector<std::vector<std::vector<double>>>& a,
                                 const std::vector<std::vector<double>>& n) {
  const std::size_t T = a[0].size() - 1;
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < T; ++i) {
      double best = -1e300;
      for (std::size_t t = 0; t < T; ++t)
        if (t >= i) best = std::max(best, a[k][t][i] - a[k][T][i]);
      num += best * n[k][i];
      den += n[k][i];
    }
  return num / den;
}

inline metrics::AccuracyMatrix to_matrix(const std::vector<std::vector<std::vector<double>>>& a,
                                         const std::vector<std::vector<double>>& n) {
  metrics::AccuracyMatrix m(a.size(), a[0].size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k].size(); ++i) m.set_count(k, i, static_cast<std::size_t>(n[k][i]));
    for (std::size_t t = 0; t < a[k].size(); ++t)
      for (std::size_t i = 0; i <= t; ++i) m.set(k, t, i, a[k][t][i]);
  }
  return m;
}

/// Random lower-triangular accuracies with integer counts.
inline void random_accuracies(Rng& rng, std::size_t clients, std::size_t steps,
                              std::vector<std::vector<std::vector<double>>>& a, std::vector<std::vector<double>>& n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> c(1, 500);
  a.assign(clients, std::vector<std::vector<double>>(steps, std::vector<double>(steps, 0.0)));
  n.assign(clients, std::vector<double>(steps, 0.0));
  for (std::size_t k = 0; k < clients; ++k) {
    for (std::size_t i = 0; i < steps; ++i) n[k][i] = c(rng);
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t i = 0; i <= t; ++i) a[k][t][i] = u(rng);
  }
}

}  // namespace affcl::oracle
