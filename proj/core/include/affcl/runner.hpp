#pragma once

#include "affcl/classifier.hpp"
#include "affcl/config.hpp"
#include "affcl/flow.hpp"
#include "affcl/metrics.hpp"
#include "affcl/streams.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace affcl::runner {

struct SeedResult {
  std::uint64_t seed = 0;
  metrics::AccuracyMatrix matrix;
  double accuracy = 0.0;
  /// Absent when the run has a single task step.
  std::optional<double> forgetting;
  /// Noisy federations only: accuracy over tasks at or after noisy_steps.
  std::optional<double> clean_accuracy;
  /// Average accuracy after each completed step.
  std::vector<double> task_curve;
};

struct Summary {
  replay::Method method = replay::Method::AfFcl;
  std::string config_hash;
  /// Hash of the config with the method and noisy-client count neutralized;
  /// runs that may share a plot carry the same family hash.
  std::string family_hash;
  int noisy_clients = 0;
  bool complete = true;
  std::vector<SeedResult> seeds;
};

struct MeanStd {
  double mean = 0.0;
  /// Sample standard deviation; zero for a single value.
  double std = 0.0;
};
MeanStd mean_std(const std::vector<double>& values);

struct RunOptions {
  std::function<void(const std::string&)> progress;
  /// Stop every seed after this task step (inclusive) without writing the
  /// summary. Negative runs all steps.
  int stop_after_task = -1;
  /// Continue from the last completed task checkpoint whose hash matches.
  bool resume = true;
};

/// The example pool selected by the data section. Relative IDX paths resolve
/// against $AFCL_DATA_ROOT when it is set.
streams::Dataset build_pool(const DataConfig& data);

struct Models {
  classifier::SplitClassifier classifier;
  flow::FlowModel flow;
};
Models build_models(const ExperimentConfig& config, const streams::Federation& federation, std::uint64_t seed);

/// Runs every seed and writes, under out_dir/<method>/:
///   seed_<s>/events.jsonl, manifest.json, accuracy.json, task_<t>/...
///   summary.json and summary.csv (only when every seed completed).
Summary run(const ExperimentConfig& config, const RunOptions& options = {});

/// Flat per-seed report: method,seed,accuracy,forgetting,clean_accuracy plus
/// mean and std rows. Contains no timing, so it is byte-stable.
std::string summary_csv(const Summary& summary);
std::string summary_json(const Summary& summary);

struct SweepCell {
  replay::Method method = replay::Method::AfFcl;
  int noisy_clients = 0;
  MeanStd clean_accuracy;
  std::vector<double> per_seed;
};

/// Runs each sweep method for each M under out_dir/M_<m>/ and writes
/// sweep_table.csv (|methods| x |M| rows) and sweep_series.csv.
std::vector<SweepCell> sweep_noisy(const ExperimentConfig& config, const std::vector<int>& noisy_values,
                                   const RunOptions& options = {});

/// Scans `dir` for summaries and writes acc_vs_noisy.csv and one
/// task_curve_<method>[_M<m>].csv per run group. Returns the written files.
std::vector<std::filesystem::path> emit_plot_data(const std::filesystem::path& dir);

}  // namespace affcl::runner
