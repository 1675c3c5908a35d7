#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace affcl::metrics {

/// a[k][t][i]: accuracy on client k's task i measured after learning step t,
/// defined for i <= t. n[k][i]: test-sample count of that task. Indices are
/// zero-based here; step T in the formulas is `steps() - 1`.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  AccuracyMatrix(std::size_t clients, std::size_t steps);

  void set(std::size_t client, std::size_t step, std::size_t task, double accuracy);
  void set_count(std::size_t client, std::size_t task, std::size_t count);

  std::optional<double> at(std::size_t client, std::size_t step, std::size_t task) const;
  std::size_t count(std::size_t client, std::size_t task) const { return counts_[client][task]; }

  std::size_t clients() const { return acc_.size(); }
  std::size_t steps() const { return steps_; }
  /// Steps whose row is fully populated for every client.
  std::size_t completed_steps() const;

  /// Drops everything after `steps` (for truncated or resumed runs).
  AccuracyMatrix truncated(std::size_t steps) const;

 private:
  std::size_t steps_ = 0;
  std::vector<std::vector<std::vector<std::optional<double>>>> acc_;
  std::vector<std::vector<std::size_t>> counts_;
};

double average_accuracy(const AccuracyMatrix& m);

/// Sample-weighted mean over clients and tasks i < T of
/// max_{i <= t < T} (a[t][i] - a[T][i]). Unclamped unless `clamp_at_zero`.
double average_forgetting(const AccuracyMatrix& m, bool clamp_at_zero = false);

/// average_accuracy restricted to the given (zero-based) task indices.
double evaluate_clean_subset(const AccuracyMatrix& m, const std::vector<std::size_t>& task_indices);

}  // namespace affcl::metrics
