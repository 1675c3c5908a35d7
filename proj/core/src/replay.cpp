#include "affcl/replay.hpp"

#include "affcl/error.hpp"
#include "affcl/federation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace affcl::replay {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

DiagGaussian moments(const Mat& rows, double floor) {
  DiagGaussian g;
  g.count = static_cast<std::size_t>(rows.rows());
  g.mean = rows.colwise().mean().transpose();
  const Mat centred = rows.rowwise() - g.mean.transpose();
  g.var = (centred.array().square().colwise().sum() / static_cast<double>(rows.rows())).matrix().transpose();
  g.var = g.var.cwiseMax(floor);
  return g;
}

}  // namespace

double DiagGaussian::log_density(const Eigen::Ref<const RowVec>& u) const {
  const auto d = static_cast<double>(mean.size());
  const double maha = ((u.transpose() - mean).array().square() / var.array()).sum();
  return -0.5 * (d * kLog2Pi + var.array().log().sum() + maha);
}

LatentClassStats fit_latent_stats(const Mat& latents, std::span<const int> labels, double floor) {
  if (latents.rows() == 0) throw Error(ErrorKind::EmptyBatch, "cannot fit statistics to an empty dataset");
  if (static_cast<std::size_t>(latents.rows()) != labels.size())
    throw Error(ErrorKind::InputShape, "latent rows do not match labels");
  LatentClassStats stats;
  stats.pooled = moments(latents, floor);
  std::map<int, std::vector<Eigen::Index>> rows_of;
  for (std::size_t i = 0; i < labels.size(); ++i) rows_of[labels[i]].push_back(static_cast<Eigen::Index>(i));
  for (const auto& [label, rows] : rows_of) stats.per_class[label] = moments(latents(rows, Eigen::all), floor);
  return stats;
}

LatentClassStats fit_latent_stats(const flow::FlowModel& flow, const classifier::FeatureExtractor& extractor,
                                  const Mat& x, std::span<const int> labels, double floor) {
  if (x.rows() == 0) throw Error(ErrorKind::EmptyBatch, "cannot fit statistics to an empty dataset");
  return fit_latent_stats(flow.forward(extractor.forward(x), labels).u, labels, floor);
}

double correlation_density(const LatentClassStats& stats, const Eigen::Ref<const RowVec>& u, int label) {
  const auto it = stats.per_class.find(label);
  return (it != stats.per_class.end() ? it->second : stats.pooled).log_density(u);
}

std::vector<double> weights_from_density(std::span<const double> log_densities) {
  if (log_densities.empty()) throw Error(ErrorKind::EmptyBatch, "no densities to normalize");
  double top = -std::numeric_limits<double>::infinity();
  for (double l : log_densities) {
    if (std::isnan(l)) throw Error(ErrorKind::NumericInput, "NaN log-density");
    top = std::max(top, l);
  }
  if (!std::isfinite(top)) throw Error(ErrorKind::DegenerateBatch, "every log-density is -inf");
  std::vector<double> w(log_densities.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_densities[i] - top);
  return w;
}

Method parse_method(std::string_view name) {
  if (name == "af_fcl") return Method::AfFcl;
  if (name == "fedavg") return Method::FedAvg;
  if (name == "fedprox") return Method::FedProx;
  if (name == "af_wo_gr") return Method::AfWoGr;
  if (name == "af_wo_kd") return Method::AfWoKd;
  if (name == "af_wo_af") return Method::AfWoAf;
  throw Error(ErrorKind::Config, "unknown method '" + std::string(name) + "'");
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::AfFcl: return "af_fcl";
    case Method::FedAvg: return "fedavg";
    case Method::FedProx: return "fedprox";
    case Method::AfWoGr: return "af_wo_gr";
    case Method::AfWoKd: return "af_wo_kd";
    case Method::AfWoAf: return "af_wo_af";
  }
  return "?";
}

MethodSwitches switches_for(Method method) {
  switch (method) {
    case Method::AfFcl: return {};
    case Method::FedAvg: return {false, false, false, false, false};
    case Method::FedProx: return {false, false, false, false, true};
    // Without replay nothing consumes the flow, so it is not trained.
    case Method::AfWoGr: return {false, false, true, false, false};
    case Method::AfWoKd: return {true, true, false, true, false};
    case Method::AfWoAf: return {true, true, true, false, false};
  }
  return {};
}

namespace {

/// Epoch-shuffled mini-batch indices.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, Rng& rng) : order_(n), batch_(std::min(batch, n)), rng_(rng) {
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }

  std::vector<Eigen::Index> next() {
    std::vector<Eigen::Index> out;
    out.reserve(batch_);
    while (out.size() < batch_) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<Eigen::Index> order_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  Rng& rng_;
};

void add_prox_gradient(const ParamRefs& params, const ParameterVector& anchor, double mu) {
  std::size_t offset = 0;
  for (Param* p : params) {
    const Eigen::Map<const Vec> g(anchor.values.data() + offset, p->value.size());
    p->grad += mu * (p->value - g);
    offset += p->size();
  }
}

}  // namespace

ClientUpdate client_local_step(const ClientContext& ctx, const MethodSwitches& method, const LocalConfig& config) {
  if (!ctx.classifier || !ctx.task) throw Error(ErrorKind::Config, "client context is missing its model or data");
  const streams::TaskData& data = *ctx.task;
  if (data.train_y.empty()) throw Error(ErrorKind::EmptyBatch, "client has no training data");
  if (method.train_flow && !ctx.flow) throw Error(ErrorKind::Config, "method trains a flow but none was given");
  if (method.proximal && !ctx.global_classifier) throw Error(ErrorKind::Config, "proximal term needs an anchor");

  classifier::SplitClassifier h = *ctx.classifier;
  std::optional<flow::FlowModel> g;
  if (method.train_flow) g = *ctx.flow;

  const ParamRefs h_params = h.params();
  nn::Adam h_opt(h_params, {.lr = config.lr});
  std::optional<nn::Adam> g_opt;
  if (g) g_opt.emplace(g->params(), nn::AdamConfig{.lr = config.lr});

  const bool has_snapshot = ctx.frozen_extractor != nullptr && ctx.frozen_flow != nullptr;
  const bool replay_to_flow = method.train_flow && method.generative_replay && has_snapshot &&
                              !ctx.previous_classes.empty();
  const bool replay_to_classifier = g.has_value() && method.generative_replay && has_snapshot;
  const classifier::LossSwitches loss_on{.raw = true, .generated = replay_to_classifier, .distill = method.distill};
  const classifier::FeatureExtractor* frozen = method.distill ? ctx.frozen_extractor : nullptr;

  Rng rng(ctx.seed);
  BatchSampler sampler(data.train_y.size(), static_cast<std::size_t>(config.batch), rng);
  std::optional<LatentClassStats> stats;

  ClientUpdate update;
  LocalStepLog& log = update.log;
  double weight_sum = 0.0;
  log.weight_min = std::numeric_limits<double>::infinity();
  log.weight_max = -std::numeric_limits<double>::infinity();

  for (int it = 0; it < config.iterations; ++it) {
    const std::vector<Eigen::Index> idx = sampler.next();
    const Mat xb = data.train_x(idx, Eigen::all);
    std::vector<int> yb(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = data.train_y[static_cast<std::size_t>(idx[i])];

    if (g) {
      const Mat feats = h.features(xb);
      std::optional<flow::GeneratedBatch> gz;
      if (replay_to_flow)
        gz = ctx.frozen_flow->sample(static_cast<std::size_t>(config.replay_batch), ctx.previous_classes,
                                     derive_seed(ctx.seed, {static_cast<std::uint64_t>(it), 1}));
      const flow::NfLoss nf = flow::nf_loss_backward(*g, feats, yb, gz ? &*gz : nullptr);
      g_opt->step();
      log.nf_local += nf.local;
      log.nf_replay += nf.replay;
    }

    std::optional<flow::GeneratedBatch> gen;
    if (replay_to_classifier) {
      gen = g->sample(static_cast<std::size_t>(config.replay_batch), ctx.seen_classes,
                      derive_seed(ctx.seed, {static_cast<std::uint64_t>(it), 2}));
      if (method.accurate_forgetting) {
        if (!stats || it % std::max(config.stats_refit_every, 1) == 0)
          stats = fit_latent_stats(*g, h.extractor(), data.train_x, data.train_y);
        std::vector<double> logd(gen->size());
        for (std::size_t i = 0; i < logd.size(); ++i)
          logd[i] = correlation_density(*stats, gen->latents.row(static_cast<Eigen::Index>(i)), gen->labels[i]);
        gen->weights = weights_from_density(logd);
      }
      for (double w : gen->weights) {
        weight_sum += w;
        log.weight_min = std::min(log.weight_min, w);
        log.weight_max = std::max(log.weight_max, w);
      }
      log.weight_count += gen->size();
    }

    const classifier::LossTerms terms =
        classifier::total_loss_backward(h, xb, yb, gen ? &*gen : nullptr, frozen, loss_on);
    log.ce_raw += terms.ce_raw;
    log.ce_generated += terms.ce_generated;
    log.kd += terms.kd;
    if (method.proximal) {
      log.prox += federation::fedprox_penalty(flatten(h_params), *ctx.global_classifier, config.prox_mu);
      add_prox_gradient(h_params, *ctx.global_classifier, config.prox_mu);
    }
    h_opt.step();
  }

  const double n = std::max(config.iterations, 1);
  for (double* v : {&log.nf_local, &log.nf_replay, &log.ce_raw, &log.ce_generated, &log.kd, &log.prox}) *v /= n;
  if (log.weight_count > 0) {
    log.weight_mean = weight_sum / static_cast<double>(log.weight_count);
  } else {
    log.weight_min = log.weight_max = 0.0;
  }

  update.classifier = h.parameters();
  if (g) update.flow = g->parameters();
  update.sample_count = data.train_y.size();
  return update;
}

}  // namespace affcl::replay
