// One pass/fail line per acceptance criterion. Usage: affcl_acceptance <criterion>|all
// Exit status is nonzero when any selected criterion fails.

#include "affcl/classifier.hpp"
#include "affcl/config.hpp"
#include "affcl/error.hpp"
#include "affcl/federation.hpp"
#include "affcl/flow.hpp"
#include "affcl/metrics.hpp"
#include "affcl/replay.hpp"
#include "affcl/runner.hpp"
#include "oracles.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

namespace {

using namespace affcl;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    detail += (detail.empty() ? "" : "; ") + what + (ok ? "" : " [violated]");
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(AFFCL_ACCEPTANCE_WORKDIR) / name;
  fs::remove_all(p);
  return p;
}

flow::FlowModel random_flow(const flow::FlowConfig& c, std::uint64_t seed, double scale) {
  flow::FlowModel f(c, seed);
  Rng rng(seed ^ 0x5eedULL);
  oracle::randomize(f.params(), rng, scale);
  return f;
}

flow::FlowConfig flow_config(int dim, int layers, int hidden, int classes = 4) {
  flow::FlowConfig c;
  c.dim = dim;
  c.num_classes = classes;
  c.layers = layers;
  c.hidden = hidden;
  c.embed_dim = 4;
  c.res_blocks = 1;
  return c;
}

Outcome flow_suite() {
  Outcome o;
  double round_trip = 0.0;
  const auto big = flow_config(512, 8, 32, 10);
  for (std::uint64_t draw = 0; draw < 100; ++draw) {
    const flow::FlowModel f = random_flow(big, 1000 + draw, 0.05);
    Rng rng(draw);
    const Mat z = oracle::random_mat(rng, 4, 512);
    const auto y = oracle::random_labels(rng, 4, 10);
    round_trip = std::max(round_trip, (f.inverse(f.forward(z, y).u, y) - z).cwiseAbs().maxCoeff());
    const Mat u = oracle::random_mat(rng, 4, 512);
    round_trip = std::max(round_trip, (f.forward(f.inverse(u, y), y).u - u).cwiseAbs().maxCoeff());
  }
  o.require(round_trip < 1e-4, "round-trip max error " + fmt("%.2e", round_trip) + " at d=512 over 100 draws");

  double logdet_rel = 0.0;
  for (int d = 2; d <= 6; ++d)
    for (std::uint64_t draw = 0; draw < 10; ++draw) {
      const flow::FlowModel f = random_flow(flow_config(d, 4, 16), 2000 + 10 * d + draw, 0.3);
      Rng rng(draw + 17);
      const RowVec z = oracle::random_mat(rng, 1, d).row(0);
      const int label = static_cast<int>(draw % 4);
      const double analytic = f.forward(z, std::vector<int>{label}).logdet[0];
      const double numeric = oracle::numerical_logdet(f, z, label);
      logdet_rel = std::max(logdet_rel, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
    }
  o.require(logdet_rel < 1e-3, "log-det vs numerical Jacobian rel error " + fmt("%.2e", logdet_rel) + " at d<=6");

  double quad = 0.0;
  for (std::uint64_t draw = 0; draw < 3; ++draw) {
    quad = std::max(quad, std::abs(oracle::quadrature_1d(random_flow(flow_config(1, 4, 16), 3000 + draw, 0.3), 1) - 1.0));
    quad = std::max(quad, std::abs(oracle::quadrature_2d(random_flow(flow_config(2, 4, 16), 3100 + draw, 0.4),
                                                         static_cast<int>(draw), 20.0, 401) -
                                   1.0));
  }
  o.require(quad < 0.02, "quadrature |integral - 1| " + fmt("%.2e", quad) + " at d in {1,2}");
  return o;
}

std::unique_ptr<classifier::MlpExtractor> mlp(int in, int width, std::uint64_t seed) {
  auto ex = std::make_unique<classifier::MlpExtractor>(in, std::vector<int>{width});
  Rng rng(seed);
  ex->init(rng);
  return ex;
}

flow::GeneratedBatch generated(Rng& rng, int n, int dim, int classes) {
  flow::GeneratedBatch b;
  b.features = oracle::random_mat(rng, n, dim);
  b.latents = b.features;
  b.labels = oracle::random_labels(rng, static_cast<std::size_t>(n), classes);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i) b.weights.push_back(u(rng));
  return b;
}

Outcome gradient_suite() {
  Outcome o;
  double nf_worst = 0.0;
  std::size_t nf_params = 0;
  for (std::uint64_t draw = 0; draw < 5; ++draw) {
    auto c = flow_config(4, 2, 4, 3);
    c.embed_dim = 2;
    flow::FlowModel f = random_flow(c, 4000 + draw, 0.5);
    const ParamRefs params = f.params();
    nf_params = std::max(nf_params, oracle::parameter_count(params));
    Rng rng(draw);
    const Mat local = oracle::random_mat(rng, 8, 4);
    const auto y = oracle::random_labels(rng, 8, 3);
    const flow::FlowModel other = random_flow(c, 4100 + draw, 0.5);
    const flow::GeneratedBatch replay = other.sample(6, std::vector<int>{0, 2}, draw);
    zero_grads(params);
    flow::nf_loss_backward(f, local, y, &replay);
    nf_worst = std::max(nf_worst,
                        oracle::check_gradients(params, [&] { return flow::nf_loss(f, local, y, &replay).total(); }).max_rel);
  }
  o.require(nf_params <= 500 && nf_worst < 1e-3,
            "nf_loss max rel error " + fmt("%.2e", nf_worst) + " (" + std::to_string(nf_params) + " params)");

  double total_worst = 0.0;
  std::size_t total_params = 0;
  for (std::uint64_t draw = 0; draw < 5; ++draw) {
    classifier::SplitClassifier h(mlp(5, 8, 5000 + draw), 10, 1, 6, 5100 + draw);
    const auto prev = mlp(5, 8, 5200 + draw);
    const ParamRefs params = h.params();
    total_params = std::max(total_params, oracle::parameter_count(params));
    Rng rng(draw + 50);
    const Mat x = oracle::random_mat(rng, 8, 5);
    const auto y = oracle::random_labels(rng, 8, 6);
    const auto g = generated(rng, 6, 8, 6);
    zero_grads(params);
    classifier::total_loss_backward(h, x, y, &g, prev.get(), {});
    total_worst = std::max(total_worst, oracle::check_gradients(params, [&] {
                                          return classifier::total_loss(h, x, y, &g, prev.get(), {}).total();
                                        }).max_rel);
  }
  {
    classifier::ClassifierConfig c;
    c.input = {1, 6, 6};
    c.conv_channels = {2, 3};
    c.feature_dim = 4;
    c.mid_dim = 5;
    c.num_classes = 3;
    classifier::SplitClassifier h(c, 5300);
    const classifier::SplitClassifier prev(c, 5301);
    const ParamRefs params = h.params();
    total_params = std::max(total_params, oracle::parameter_count(params));
    Rng rng(5302);
    const Mat x = oracle::random_mat(rng, 4, 36);
    const auto y = oracle::random_labels(rng, 4, 3);
    const auto g = generated(rng, 5, 4, 3);
    zero_grads(params);
    classifier::total_loss_backward(h, x, y, &g, &prev.extractor(), {});
    total_worst = std::max(total_worst, oracle::check_gradients(params, [&] {
                                          return classifier::total_loss(h, x, y, &g, &prev.extractor(), {}).total();
                                        }).max_rel);
  }
  o.require(total_params <= 500 && total_worst < 1e-3,
            "total_loss max rel error " + fmt("%.2e", total_worst) + " (<= " + std::to_string(total_params) + " params)");
  return o;
}

Outcome oracle_equivalence() {
  Outcome o;
  Rng rng(7);
  std::uniform_int_distribution<int> dim(1, 8), classes(1, 4), clients(2, 6), steps(2, 6), count(1, 1000);
  std::uniform_real_distribution<double> var(0.2, 3.0), mu(0.0, 2.0);
  double moments = 0.0, density = 0.0, fedavg = 0.0, fedprox = 0.0, accuracy = 0.0, forgetting = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    // Per-class diagonal moments with 1/n normalization.
    {
      const int d = dim(rng), k = classes(rng);
      const int n = 20 + trial % 50;
      const Mat u = oracle::random_mat(rng, n, d, 2.0);
      const auto y = oracle::random_labels(rng, static_cast<std::size_t>(n), k);
      const auto s = replay::fit_latent_stats(u, y);
      for (const auto& [c, g] : s.per_class) {
        for (int j = 0; j < d; ++j) {
          double sum = 0.0, sq = 0.0;
          int m = 0;
          for (int i = 0; i < n; ++i)
            if (y[static_cast<std::size_t>(i)] == c) {
              sum += u(i, j);
              ++m;
            }
          const double mean = sum / m;
          for (int i = 0; i < n; ++i)
            if (y[static_cast<std::size_t>(i)] == c) sq += (u(i, j) - mean) * (u(i, j) - mean);
          moments = std::max({moments, std::abs(g.mean[j] - mean),
                              std::abs(g.var[j] - std::max(sq / m, replay::kVarianceFloor))});
        }
      }
    }
    // Diagonal Gaussian density against the literal formula.
    {
      const int d = dim(rng);
      replay::LatentClassStats s;
      replay::DiagGaussian g;
      g.mean = oracle::random_mat(rng, d, 1).col(0);
      g.var.resize(d);
      for (auto& v : g.var) v = var(rng);
      g.count = 1;
      s.per_class[0] = g;
      s.pooled = g;
      const RowVec u = oracle::random_mat(rng, 1, d).row(0);
      density = std::max(density, std::abs(replay::correlation_density(s, u, 0) -
                                            oracle::diag_gaussian_log_density(u, g.mean, g.var)));
    }
    // FedAvg and FedProx.
    {
      const int k = clients(rng), p = dim(rng) * 5;
      std::vector<ParameterVector> vs;
      std::vector<double> n;
      for (int i = 0; i < k; ++i) {
        const Mat m = oracle::random_mat(rng, 1, p, 3.0);
        ParameterVector v;
        v.manifest.push_back({"w", {static_cast<std::size_t>(p)}, 0, static_cast<std::size_t>(p)});
        v.values.assign(m.data(), m.data() + p);
        vs.push_back(std::move(v));
        n.push_back(count(rng));
      }
      const ParameterVector avg = federation::aggregate(vs, n);
      for (int j = 0; j < p; ++j) {
        double num = 0.0, den = 0.0;
        for (int i = 0; i < k; ++i) {
          num += n[static_cast<std::size_t>(i)] * vs[static_cast<std::size_t>(i)].values[static_cast<std::size_t>(j)];
          den += n[static_cast<std::size_t>(i)];
        }
        fedavg = std::max(fedavg, std::abs(avg.values[static_cast<std::size_t>(j)] - num / den));
      }
      const double mu_value = mu(rng);
      double sq = 0.0;
      for (int j = 0; j < p; ++j) sq += std::pow(vs[0].values[static_cast<std::size_t>(j)] - vs[1].values[static_cast<std::size_t>(j)], 2);
      fedprox = std::max(fedprox, std::abs(federation::fedprox_penalty(vs[0], vs[1], mu_value) - 0.5 * mu_value * sq));
    }
    // Average accuracy and forgetting.
    {
      std::vector<std::vector<std::vector<double>>> a;
      std::vector<std::vector<double>> n;
      oracle::random_accuracies(rng, static_cast<std::size_t>(clients(rng)), static_cast<std::size_t>(steps(rng)), a, n);
      const auto m = oracle::to_matrix(a, n);
      accuracy = std::max(accuracy, std::abs(metrics::average_accuracy(m) - oracle::average_accuracy(a, n)));
      forgetting = std::max(forgetting, std::abs(metrics::average_forgetting(m) - oracle::average_forgetting(a, n)));
    }
  }
  o.require(moments <= 1e-6, "moments " + fmt("%.1e", moments));
  o.require(density <= 1e-6, "density " + fmt("%.1e", density));
  o.require(fedavg <= 1e-7, "fedavg " + fmt("%.1e", fedavg));
  o.require(fedprox <= 1e-7, "fedprox " + fmt("%.1e", fedprox));
  o.require(accuracy <= 1e-9, "average accuracy " + fmt("%.1e", accuracy));
  o.require(forgetting <= 1e-9, "average forgetting " + fmt("%.1e", forgetting));
  o.detail += " (1000 cases each)";
  return o;
}

runner::ExperimentConfig small_run(const fs::path& out) {
  runner::ExperimentConfig c = runner::load_config(fs::path(AFFCL_SOURCE_DIR) / "configs" / "desk_ltp.ini");
  c.optimizer.rounds_per_task = 2;
  c.optimizer.local_iters = 5;
  c.run.seeds = {0, 1};
  c.run.out_dir = out.string();
  return c;
}

Outcome ablation_exactness() {
  Outcome o;
  // Every logged replay weight of a w/o-AF run is exactly 1.
  runner::ExperimentConfig c = small_run(scratch("ablation"));
  c.method = replay::Method::AfWoAf;
  c.run.seeds = {0};
  runner::RunOptions opt;
  opt.resume = false;
  runner::run(c, opt);
  std::ifstream events(fs::path(c.run.out_dir) / "af_wo_af" / "seed_0" / "events.jsonl");
  std::size_t weights = 0;
  bool all_one = true;
  for (std::string line; std::getline(events, line);) {
    const auto e = nlohmann::json::parse(line);
    if (e.at("event") != "round") continue;
    for (const auto& client : e.at("clients")) {
      const auto n = client.at("weight_count").get<std::size_t>();
      weights += n;
      if (n > 0) all_one &= client.at("weight_min").get<double>() == 1.0 && client.at("weight_max").get<double>() == 1.0;
    }
  }
  o.require(all_one && weights > 0, "af_wo_af logged " + std::to_string(weights) + " replay weights, all equal to 1");

  double gap = 0.0;
  for (std::uint64_t draw = 0; draw < 20; ++draw) {
    const classifier::SplitClassifier h(mlp(5, 8, 6000 + draw), 10, 1, 6, 6100 + draw);
    const auto prev = mlp(5, 8, 6200 + draw);
    Rng rng(draw + 70);
    const Mat x = oracle::random_mat(rng, 12, 5);
    const auto y = oracle::random_labels(rng, 12, 6);
    const auto g = generated(rng, 10, 8, 6);
    const double raw = classifier::ce_loss_raw(h, x, y), gen = classifier::ce_loss_generated(h, g),
                 kd = classifier::kd_loss(h, prev.get(), x);
    const auto wo_gr = replay::switches_for(replay::Method::AfWoGr);
    const auto wo_kd = replay::switches_for(replay::Method::AfWoKd);
    const auto l_gr = classifier::total_loss(h, x, y, &g, prev.get(),
                                             {.raw = true, .generated = wo_gr.generative_replay, .distill = wo_gr.distill});
    const auto l_kd = classifier::total_loss(h, x, y, &g, prev.get(),
                                             {.raw = true, .generated = wo_kd.generative_replay, .distill = wo_kd.distill});
    gap = std::max({gap, std::abs(l_gr.total() - (raw + kd)), std::abs(l_kd.total() - (raw + gen))});
  }
  o.require(gap <= 1e-6, "af_wo_gr / af_wo_kd loss minus remaining terms " + fmt("%.1e", gap));
  return o;
}

double mean_of(const std::vector<runner::SweepCell>& cells, replay::Method m, int noisy) {
  for (const auto& c : cells)
    if (c.method == m && c.noisy_clients == noisy) return c.clean_accuracy.mean;
  throw Error(ErrorKind::Inventory, "missing sweep cell");
}

Outcome noisy_directional() {
  Outcome o;
  runner::ExperimentConfig c = runner::load_config(fs::path(AFFCL_SOURCE_DIR) / "configs" / "desk_noisy.ini");
  c.run.out_dir = scratch("noisy").string();
  c.sweep.methods = {replay::Method::AfFcl, replay::Method::AfWoAf};
  runner::RunOptions opt;
  opt.resume = false;
  const auto start = Clock::now();
  const auto cells = runner::sweep_noisy(c, {0, 1, 2}, opt);
  const double minutes = std::chrono::duration<double>(Clock::now() - start).count() / 60.0;
  const double af2 = mean_of(cells, replay::Method::AfFcl, 2), wo2 = mean_of(cells, replay::Method::AfWoAf, 2);
  const double af_drop = mean_of(cells, replay::Method::AfFcl, 0) - af2;
  const double wo_drop = mean_of(cells, replay::Method::AfWoAf, 0) - wo2;
  o.require(af2 >= wo2 + 0.02, "M=2 clean accuracy af_fcl " + fmt("%.4f", af2) + " vs af_wo_af " + fmt("%.4f", wo2) +
                                   " (needs +0.02)");
  o.require(af_drop <= wo_drop, "drop M=0->2 af_fcl " + fmt("%.4f", af_drop) + " vs af_wo_af " + fmt("%.4f", wo_drop));
  o.require(minutes < 30.0, "runtime " + fmt("%.1f", minutes) + " min");
  return o;
}

Outcome heterogeneity_directional() {
  Outcome o;
  runner::ExperimentConfig c = runner::load_config(fs::path(AFFCL_SOURCE_DIR) / "configs" / "desk_ltp.ini");
  c.run.out_dir = scratch("ltp").string();
  runner::RunOptions opt;
  opt.resume = false;
  const auto start = Clock::now();
  std::map<replay::Method, double> acc;
  for (const auto m : {replay::Method::AfFcl, replay::Method::FedAvg}) {
    c.method = m;
    std::vector<double> seeds;
    for (const auto& r : runner::run(c, opt).seeds) seeds.push_back(r.accuracy);
    acc[m] = runner::mean_std(seeds).mean;
  }
  const double minutes = std::chrono::duration<double>(Clock::now() - start).count() / 60.0;
  o.require(acc[replay::Method::AfFcl] >= acc[replay::Method::FedAvg] + 0.03,
            "average accuracy af_fcl " + fmt("%.4f", acc[replay::Method::AfFcl]) + " vs fedavg " +
                fmt("%.4f", acc[replay::Method::FedAvg]) + " (needs +0.03)");
  o.require(minutes < 20.0, "runtime " + fmt("%.1f", minutes) + " min");
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  Outcome o;
  runner::RunOptions opt;
  opt.resume = false;
  const auto a = small_run(scratch("det_a"));
  const auto b = small_run(scratch("det_b"));
  o.require(runner::config_hash(a) == runner::config_hash(b), "config hash " + runner::config_hash(a));
  runner::run(a, opt);
  runner::run(b, opt);
  for (const char* file : {"summary.csv", "summary.json"}) {
    const std::string x = slurp(fs::path(a.run.out_dir) / "af_fcl" / file);
    const std::string y = slurp(fs::path(b.run.out_dir) / "af_fcl" / file);
    o.require(!x.empty() && x == y, std::string(file) + " byte-identical (" + std::to_string(x.size()) + " bytes)");
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"flow_correctness", flow_suite},
      {"gradient_suite", gradient_suite},
      {"oracle_equivalence", oracle_equivalence},
      {"ablation_exactness", ablation_exactness},
      {"noisy_directional", noisy_directional},
      {"heterogeneity_directional", heterogeneity_directional},
      {"determinism", determinism},
  };
  const std::string which = argc > 1 ? argv[1] : "all";
  // The unit suites' runtime bounds: flow and gradient 2 min, oracles 1 min.
  const std::map<std::string, double> budget{{"flow_correctness", 120.0},
                                             {"gradient_suite", 120.0},
                                             {"oracle_equivalence", 60.0}};
  bool ok = true, matched = false;
  for (const auto& [name, check] : criteria) {
    if (which != "all" && which != name) continue;
    matched = true;
    Outcome out;
    const auto start = Clock::now();
    try {
      out = check();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("error: ") + e.what();
    }
    const double seconds = std::chrono::duration<double>(Clock::now() - start).count();
    if (const auto it = budget.find(name); it != budget.end())
      out.require(seconds < it->second, "runtime " + fmt("%.1f", seconds) + " s");
    std::printf("%s %s: %s [%.1f s]\n", out.pass ? "PASS" : "FAIL", name.c_str(), out.detail.c_str(), seconds);
    std::fflush(stdout);
    ok &= out.pass;
  }
  if (!matched) {
    std::fprintf(stderr, "unknown criterion '%s'\n", which.c_str());
    return 2;
  }
  return ok ? 0 : 1;
}
