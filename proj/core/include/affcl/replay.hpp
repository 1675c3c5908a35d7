#pragma once

#include "affcl/classifier.hpp"
#include "affcl/flow.hpp"
#include "affcl/linalg.hpp"
#include "affcl/params.hpp"
#include "affcl/streams.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace affcl::replay {

inline constexpr double kVarianceFloor = 1e-5;

/// Diagonal Gaussian with 1/n moments.
struct DiagGaussian {
  Vec mean;
  Vec var;
  std::size_t count = 0;

  double log_density(const Eigen::Ref<const RowVec>& u) const;
};

struct LatentClassStats {
  std::map<int, DiagGaussian> per_class;
  DiagGaussian pooled;
};

LatentClassStats fit_latent_stats(const Mat& latents, std::span<const int> labels, double floor = kVarianceFloor);
/// Latents g(h_a(x) | y) of the whole local dataset.
LatentClassStats fit_latent_stats(const flow::FlowModel& flow, const classifier::FeatureExtractor& extractor,
                                  const Mat& x, std::span<const int> labels, double floor = kVarianceFloor);

/// Log-density of `u` under the Gaussian of class `label`, or under the pooled
/// Gaussian when the current task has no samples of that class.
double correlation_density(const LatentClassStats& stats, const Eigen::Ref<const RowVec>& u, int label);

/// w_i = exp(l_i - max_j l_j): the most credible sample gets weight exactly 1.
std::vector<double> weights_from_density(std::span<const double> log_densities);

enum class Method { AfFcl, FedAvg, FedProx, AfWoGr, AfWoKd, AfWoAf };

Method parse_method(std::string_view name);
std::string_view to_string(Method method);

struct MethodSwitches {
  bool train_flow = true;
  bool generative_replay = true;
  bool distill = true;
  bool accurate_forgetting = true;
  bool proximal = false;
};

MethodSwitches switches_for(Method method);

struct LocalConfig {
  int iterations = 100;
  int batch = 64;
  /// Generated samples per iteration; matches the mini-batch by default.
  int replay_batch = 64;
  int stats_refit_every = 10;
  double lr = 1e-4;
  double prox_mu = 0.01;
};

/// Read-only inputs of one client's local training in one round.
struct ClientContext {
  const classifier::SplitClassifier* classifier = nullptr;
  const flow::FlowModel* flow = nullptr;
  const streams::TaskData* task = nullptr;
  /// h_a' and g'; both null on the first task.
  const classifier::FeatureExtractor* frozen_extractor = nullptr;
  const flow::FlowModel* frozen_flow = nullptr;
  /// Classes seen globally before the current step (labels for g' replay).
  std::span<const int> previous_classes;
  /// Classes seen globally through the current step (labels for g samples).
  std::span<const int> seen_classes;
  /// FedProx anchor; required when the method is proximal.
  const ParameterVector* global_classifier = nullptr;
  std::uint64_t seed = 0;
};

/// Per-round means of the loss terms and a summary of replay weights.
struct LocalStepLog {
  double nf_local = 0.0;
  double nf_replay = 0.0;
  double ce_raw = 0.0;
  double ce_generated = 0.0;
  double kd = 0.0;
  double prox = 0.0;
  std::size_t weight_count = 0;
  double weight_mean = 0.0;
  double weight_min = 0.0;
  double weight_max = 0.0;
};

/// What a client sends back: parameters and a sample count, never data.
struct ClientUpdate {
  ParameterVector classifier;
  std::optional<ParameterVector> flow;
  std::size_t sample_count = 0;
  LocalStepLog log;
};

/// Each iteration: (1) a flow update on local features plus g' replay,
/// (2) a refit of the latent statistics every `stats_refit_every` iterations,
/// (3) a classifier update on raw data plus weighted samples from g.
ClientUpdate client_local_step(const ClientContext& ctx, const MethodSwitches& method, const LocalConfig& config);

}  // namespace affcl::replay
