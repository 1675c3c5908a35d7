#include "affcl/federation.hpp"

#include "affcl/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

namespace affcl::federation {

ParameterVector aggregate(std::span<const ParameterVector> params, std::span<const double> counts) {
  if (params.empty()) throw Error(ErrorKind::DegenerateAggregation, "nothing to aggregate");
  if (params.size() != counts.size()) throw Error(ErrorKind::InputShape, "one count per parameter vector required");
  double total = 0.0;
  for (double c : counts) {
    if (!(c >= 0.0)) throw Error(ErrorKind::DegenerateAggregation, "negative sample count");
    total += c;
  }
  if (total <= 0.0) throw Error(ErrorKind::DegenerateAggregation, "total sample count is zero");
  for (const auto& p : params) require_same_manifest(params.front(), p);

  ParameterVector out;
  out.manifest = params.front().manifest;
  out.values.assign(params.front().size(), 0.0);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double w = counts[k] / total;
    const auto& v = params[k].values;
    for (std::size_t j = 0; j < v.size(); ++j) out.values[j] += w * v[j];
  }
  return out;
}

double fedprox_penalty(const ParameterVector& local, const ParameterVector& global, double mu) {
  require_same_manifest(local, global);
  double s = 0.0;
  for (std::size_t j = 0; j < local.values.size(); ++j) {
    const double d = local.values[j] - global.values[j];
    s += d * d;
  }
  return 0.5 * mu * s;
}

RoundPlan plan_round(std::uint64_t global_seed, int task, int round, int clients, double participation) {
  if (clients < 1) throw Error(ErrorKind::Config, "a round needs at least one client");
  if (!(participation > 0.0 && participation <= 1.0)) throw Error(ErrorKind::Config, "participation must lie in (0, 1]");
  RoundPlan plan;
  plan.task = task;
  plan.round = round;
  const auto take = static_cast<int>(std::ceil(participation * clients - 1e-12));
  std::vector<int> all(static_cast<std::size_t>(clients));
  std::iota(all.begin(), all.end(), 0);
  if (take < clients) {
    Rng rng(derive_seed(global_seed, {static_cast<std::uint64_t>(task), static_cast<std::uint64_t>(round), ~0ULL}));
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(static_cast<std::size_t>(std::max(take, 1)));
    std::sort(all.begin(), all.end());
  }
  plan.selected_clients = all;
  for (int k : plan.selected_clients)
    plan.seeds.push_back(derive_seed(global_seed, {static_cast<std::uint64_t>(task), static_cast<std::uint64_t>(round),
                                                   static_cast<std::uint64_t>(k)}));
  return plan;
}

Simulator::Simulator(const streams::Federation& federation, classifier::SplitClassifier classifier_architecture,
                     flow::FlowModel flow_architecture, FederationConfig config)
    : federation_(federation),
      classifier_(std::move(classifier_architecture)),
      flow_(std::move(flow_architecture)),
      config_(config) {}

GlobalState Simulator::initial_state() const {
  GlobalState s;
  s.classifier = classifier_.parameters();
  s.flow = flow_.parameters();
  return s;
}

std::vector<std::vector<double>> Simulator::run_task_step(int task, GlobalState& state,
                                                          const RoundObserver& observer) const {
  const auto t = static_cast<std::size_t>(task);
  const replay::MethodSwitches sw = replay::switches_for(config_.method);

  if (task > 0) {
    classifier::SplitClassifier previous = classifier_;
    previous.set_parameters(state.classifier);
    state.snapshot.emplace(previous.extractor_parameters(), state.flow, task - 1);
  }

  // Clients report the class sets of their current task; the server
  // broadcasts the union.
  std::set<int> seen(state.seen_classes.begin(), state.seen_classes.end());
  state.previous_classes = state.seen_classes;
  for (const auto& cs : federation_.clients) seen.insert(cs.tasks[t].class_list.begin(), cs.tasks[t].class_list.end());
  state.seen_classes.assign(seen.begin(), seen.end());

  classifier::SplitClassifier global_h = classifier_;
  flow::FlowModel global_g = flow_;
  std::unique_ptr<classifier::FeatureExtractor> frozen_extractor;
  std::optional<flow::FlowModel> frozen_flow;
  if (state.snapshot) {
    frozen_extractor = state.snapshot->materialize_extractor(classifier_);
    if (sw.train_flow) frozen_flow = state.snapshot->materialize_flow(flow_);
  }

  for (int r = 0; r < config_.rounds_per_task; ++r) {
    const auto start = std::chrono::steady_clock::now();
    const RoundPlan plan =
        plan_round(config_.seed, task, r, static_cast<int>(federation_.clients.size()), config_.participation);
    global_h.set_parameters(state.classifier);
    if (sw.train_flow) global_g.set_parameters(state.flow);

    std::vector<ParameterVector> h_params;
    std::vector<ParameterVector> g_params;
    std::vector<double> counts;
    RoundRecord record;
    record.task = task;
    record.round = r;
    for (std::size_t i = 0; i < plan.selected_clients.size(); ++i) {
      const int k = plan.selected_clients[i];
      replay::ClientContext ctx;
      ctx.classifier = &global_h;
      ctx.flow = sw.train_flow ? &global_g : nullptr;
      ctx.task = &federation_.clients[static_cast<std::size_t>(k)].data[t];
      ctx.frozen_extractor = frozen_extractor.get();
      ctx.frozen_flow = frozen_flow ? &*frozen_flow : nullptr;
      ctx.previous_classes = state.previous_classes;
      ctx.seen_classes = state.seen_classes;
      ctx.global_classifier = &state.classifier;
      ctx.seed = plan.seeds[i];
      replay::ClientUpdate u = replay::client_local_step(ctx, sw, config_.local);
      counts.push_back(static_cast<double>(u.sample_count));
      record.clients.push_back({k, u.sample_count, u.log});
      h_params.push_back(std::move(u.classifier));
      if (u.flow) g_params.push_back(std::move(*u.flow));
    }
    state.classifier = aggregate(h_params, counts);
    if (!g_params.empty()) state.flow = aggregate(g_params, counts);
    record.classifier_norm = std::sqrt(squared_norm(state.classifier));
    record.flow_norm = std::sqrt(squared_norm(state.flow));
    record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (observer) observer(record);
  }

  std::vector<std::vector<double>> acc;
  for (std::size_t k = 0; k < federation_.clients.size(); ++k)
    acc.push_back(evaluate(state, static_cast<int>(k), task));
  return acc;
}

std::vector<double> Simulator::evaluate(const GlobalState& state, int client, int through) const {
  classifier::SplitClassifier h = classifier_;
  h.set_parameters(state.classifier);
  const auto& cs = federation_.clients[static_cast<std::size_t>(client)];
  std::vector<double> out;
  for (int i = 0; i <= through; ++i) {
    const auto& d = cs.data[static_cast<std::size_t>(i)];
    if (d.test_y.empty()) throw Error(ErrorKind::EmptyBatch, "task has no test samples");
    const std::vector<int> pred = h.predict(d.test_x);
    std::size_t correct = 0;
    for (std::size_t j = 0; j < pred.size(); ++j) correct += pred[j] == d.test_y[j] ? 1 : 0;
    out.push_back(static_cast<double>(correct) / static_cast<double>(pred.size()));
  }
  return out;
}

}  // namespace affcl::federation
