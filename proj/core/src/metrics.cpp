#include "affcl/metrics.hpp"

#include "affcl/error.hpp"

#include <algorithm>
#include <limits>
#include <string>

namespace affcl::metrics {

AccuracyMatrix::AccuracyMatrix(std::size_t clients, std::size_t steps)
    : steps_(steps),
      acc_(clients, std::vector<std::vector<std::optional<double>>>(steps, std::vector<std::optional<double>>(steps))),
      counts_(clients, std::vector<std::size_t>(steps, 0)) {}

void AccuracyMatrix::set(std::size_t client, std::size_t step, std::size_t task, double accuracy) {
  if (client >= clients() || step >= steps_ || task > step)
    throw Error(ErrorKind::InputShape, "accuracy entry outside the lower triangle");
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw Error(ErrorKind::NumericInput, "accuracy must lie in [0, 1]");
  acc_[client][step][task] = accuracy;
}

void AccuracyMatrix::set_count(std::size_t client, std::size_t task, std::size_t count) {
  if (client >= clients() || task >= steps_) throw Error(ErrorKind::InputShape, "count entry out of range");
  counts_[client][task] = count;
}

std::optional<double> AccuracyMatrix::at(std::size_t client, std::size_t step, std::size_t task) const {
  if (client >= clients() || step >= steps_ || task > step) return std::nullopt;
  return acc_[client][step][task];
}

std::size_t AccuracyMatrix::completed_steps() const {
  std::size_t done = 0;
  for (std::size_t t = 0; t < steps_; ++t) {
    for (std::size_t k = 0; k < clients(); ++k)
      for (std::size_t i = 0; i <= t; ++i)
        if (!acc_[k][t][i]) return done;
    ++done;
  }
  return done;
}

AccuracyMatrix AccuracyMatrix::truncated(std::size_t steps) const {
  AccuracyMatrix m(clients(), steps);
  for (std::size_t k = 0; k < clients(); ++k)
    for (std::size_t t = 0; t < steps; ++t) {
      m.counts_[k][t] = counts_[k][t];
      for (std::size_t i = 0; i <= t; ++i) m.acc_[k][t][i] = acc_[k][t][i];
    }
  return m;
}

namespace {

double final_entry(const AccuracyMatrix& m, std::size_t k, std::size_t i) {
  const auto v = m.at(k, m.steps() - 1, i);
  if (!v) throw Error(ErrorKind::IncompleteMatrix, "final row missing client " + std::to_string(k) + " task " +
                                                       std::to_string(i));
  if (m.count(k, i) == 0)
    throw Error(ErrorKind::IncompleteMatrix, "no test count for client " + std::to_string(k) + " task " +
                                                 std::to_string(i));
  return *v;
}

}  // namespace

double average_accuracy(const AccuracyMatrix& m) {
  if (m.steps() == 0 || m.clients() == 0) throw Error(ErrorKind::IncompleteMatrix, "empty accuracy matrix");
  std::vector<std::size_t> all(m.steps());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return evaluate_clean_subset(m, all);
}

double average_forgetting(const AccuracyMatrix& m, bool clamp_at_zero) {
  if (m.steps() < 2) throw Error(ErrorKind::IncompleteMatrix, "forgetting needs at least two steps");
  const std::size_t last = m.steps() - 1;
  double num = 0.0;
  double den = 0.0;
  for (std::size_t k = 0; k < m.clients(); ++k) {
    for (std::size_t i = 0; i < last; ++i) {
      const double end = final_entry(m, k, i);
      double peak_gap = -std::numeric_limits<double>::infinity();
      for (std::size_t t = i; t < last; ++t) {
        const auto v = m.at(k, t, i);
        if (!v) throw Error(ErrorKind::IncompleteMatrix, "missing intermediate accuracy");
        peak_gap = std::max(peak_gap, *v - end);
      }
      if (clamp_at_zero) peak_gap = std::max(peak_gap, 0.0);
      const auto n = static_cast<double>(m.count(k, i));
      num += peak_gap * n;
      den += n;
    }
  }
  return num / den;
}

double evaluate_clean_subset(const AccuracyMatrix& m, const std::vector<std::size_t>& task_indices) {
  if (task_indices.empty()) throw Error(ErrorKind::EmptyIndexSet, "no tasks selected");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t k = 0; k < m.clients(); ++k) {
    for (std::size_t i : task_indices) {
      if (i >= m.steps()) throw Error(ErrorKind::IncompleteMatrix, "task index " + std::to_string(i) + " undefined");
      const auto n = static_cast<double>(m.count(k, i));
      num += final_entry(m, k, i) * n;
      den += n;
    }
  }
  return num / den;
}

}  // namespace affcl::metrics
