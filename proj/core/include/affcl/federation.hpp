#pragma once

#include "affcl/classifier.hpp"
#include "affcl/flow.hpp"
#include "affcl/params.hpp"
#include "affcl/replay.hpp"
#include "affcl/streams.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace affcl::federation {

/// Coordinate-wise sum_k (n_k / sum n) p_k.
ParameterVector aggregate(std::span<const ParameterVector> params, std::span<const double> counts);

/// (mu / 2) ||local - global||^2.
double fedprox_penalty(const ParameterVector& local, const ParameterVector& global, double mu);

struct RoundPlan {
  int task = 0;
  int round = 0;
  std::vector<int> selected_clients;
  std::vector<std::uint64_t> seeds;
};

/// Selects ceil(participation * N) clients (all by default) and derives one
/// seed per selected client from (global_seed, task, round, client).
RoundPlan plan_round(std::uint64_t global_seed, int task, int round, int clients, double participation = 1.0);

struct GlobalState {
  ParameterVector classifier;
  ParameterVector flow;
  /// Classes observed in any client's tasks up to the current step.
  std::vector<int> seen_classes;
  /// seen_classes as of the previous step.
  std::vector<int> previous_classes;
  std::optional<classifier::FrozenSnapshot> snapshot;
};

struct FederationConfig {
  replay::Method method = replay::Method::AfFcl;
  replay::LocalConfig local;
  int rounds_per_task = 10;
  double participation = 1.0;
  std::uint64_t seed = 0;
};

/// Everything the server sees from one client in one round. No example,
/// feature or label ever appears here.
struct ClientReport {
  int client = 0;
  std::size_t samples = 0;
  replay::LocalStepLog log;
};

struct RoundRecord {
  int task = 0;
  int round = 0;
  std::vector<ClientReport> clients;
  double classifier_norm = 0.0;
  double flow_norm = 0.0;
  double wall_seconds = 0.0;
};

using RoundObserver = std::function<void(const RoundRecord&)>;

/// In-process simulation of the server protocol over a fixed federation.
class Simulator {
 public:
  Simulator(const streams::Federation& federation, classifier::SplitClassifier classifier_architecture,
            flow::FlowModel flow_architecture, FederationConfig config);

  GlobalState initial_state() const;

  /// One task step: snapshot, rounds of broadcast / local training /
  /// aggregation, then evaluation. Returns, per client, accuracies on its
  /// tasks 0..task.
  std::vector<std::vector<double>> run_task_step(int task, GlobalState& state, const RoundObserver& observer = {}) const;

  /// Accuracy of the global classifier on each of the client's tasks 0..through.
  std::vector<double> evaluate(const GlobalState& state, int client, int through) const;

  const FederationConfig& config() const { return config_; }
  const streams::Federation& federation() const { return federation_; }

 private:
  const streams::Federation& federation_;
  classifier::SplitClassifier classifier_;
  flow::FlowModel flow_;
  FederationConfig config_;
};

}  // namespace affcl::federation
