#include "affcl/flow.hpp"

#include "affcl/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace affcl::flow {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

void check_labels(std::span<const int> labels, int num_classes) {
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw Error(ErrorKind::LabelDomain, "label " + std::to_string(y) + " outside [0, " +
                                              std::to_string(num_classes) + ")");
}

}  // namespace

double standard_normal_log_density(const Eigen::Ref<const RowVec>& u) {
  return -0.5 * static_cast<double>(u.size()) * kLog2Pi - 0.5 * u.squaredNorm();
}

PermutationLayer::PermutationLayer(int dim, Rng& rng) : perm_(static_cast<std::size_t>(dim)) {
  std::iota(perm_.begin(), perm_.end(), 0);
  std::shuffle(perm_.begin(), perm_.end(), rng);
}

PermutationLayer::PermutationLayer(std::vector<int> perm) : perm_(std::move(perm)) {
  std::vector<int> sorted = perm_;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i)
    if (sorted[i] != static_cast<int>(i)) throw Error(ErrorKind::InputShape, "permutation is not a bijection");
}

Mat PermutationLayer::forward(const Mat& x, std::span<const int>, Vec&, LayerTape*) const {
  Mat y(x.rows(), x.cols());
  for (std::size_t j = 0; j < perm_.size(); ++j) y.col(static_cast<Eigen::Index>(j)) = x.col(perm_[j]);
  return y;
}

Mat PermutationLayer::inverse(const Mat& y, std::span<const int>) const {
  Mat x(y.rows(), y.cols());
  for (std::size_t j = 0; j < perm_.size(); ++j) x.col(perm_[j]) = y.col(static_cast<Eigen::Index>(j));
  return x;
}

Mat PermutationLayer::backward(const LayerTape&, std::span<const int> labels, const Mat& dy, const Vec&) {
  return inverse(dy, labels);
}

CouplingLayer::CouplingLayer(const std::string& name, const FlowConfig& config)
    : dim_(config.dim),
      pass_(config.dim - config.dim / 2),
      active_(config.dim / 2),
      embed_dim_(config.embed_dim),
      num_classes_(config.num_classes),
      clamp_(config.clamp),
      active_mask_(static_cast<std::size_t>(config.dim), false),
      embedding_(name + ".embedding",
                 {static_cast<std::size_t>(config.num_classes), static_cast<std::size_t>(config.embed_dim)}),
      scale_net_(name + ".scale", pass_ + embed_dim_, config.hidden, active_, config.res_blocks),
      shift_net_(name + ".shift", pass_ + embed_dim_, config.hidden, active_, config.res_blocks) {
  for (int j = pass_; j < dim_; ++j) active_mask_[static_cast<std::size_t>(j)] = true;
}

void CouplingLayer::init(Rng& rng, bool zero_output) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : embedding_.value) v = normal(rng);
  scale_net_.init(rng, zero_output);
  shift_net_.init(rng, zero_output);
}

Mat CouplingLayer::conditioner(const Mat& passthrough, std::span<const int> labels) const {
  Mat cond(passthrough.rows(), pass_ + embed_dim_);
  cond.leftCols(pass_) = passthrough;
  const Eigen::Map<const Mat> table(embedding_.value.data(), num_classes_, embed_dim_);
  for (Eigen::Index i = 0; i < cond.rows(); ++i) cond.row(i).tail(embed_dim_) = table.row(labels[i]);
  return cond;
}

Mat CouplingLayer::clamp_scale(const Mat& raw) const {
  return raw.unaryExpr([c = clamp_](double s) { return c * std::tanh(s / c); });
}

Mat CouplingLayer::forward(const Mat& x, std::span<const int> labels, Vec& logdet, LayerTape* tape) const {
  if (active_ == 0) {
    if (tape) tape->input = x;
    return x;
  }
  const Mat cond = conditioner(x.leftCols(pass_), labels);
  Mat raw = scale_net_.forward(cond, tape ? &tape->scale : nullptr);
  const Mat shift = shift_net_.forward(cond, tape ? &tape->shift : nullptr);
  const Mat s = clamp_scale(raw);

  Mat y(x.rows(), x.cols());
  y.leftCols(pass_) = x.leftCols(pass_);
  y.rightCols(active_) = x.rightCols(active_).cwiseProduct(s.array().exp().matrix()) + shift;
  logdet += s.rowwise().sum();
  if (tape) {
    tape->input = x;
    tape->raw_scale = std::move(raw);
  }
  return y;
}

Mat CouplingLayer::inverse(const Mat& y, std::span<const int> labels) const {
  if (active_ == 0) return y;
  const Mat cond = conditioner(y.leftCols(pass_), labels);
  const Mat s = clamp_scale(scale_net_.forward(cond));
  const Mat shift = shift_net_.forward(cond);
  Mat x(y.rows(), y.cols());
  x.leftCols(pass_) = y.leftCols(pass_);
  x.rightCols(active_) = (y.rightCols(active_) - shift).cwiseProduct((-s).array().exp().matrix());
  return x;
}

Mat CouplingLayer::backward(const LayerTape& tape, std::span<const int> labels, const Mat& dy, const Vec& dlogdet) {
  if (active_ == 0) return dy;
  const Mat& raw = tape.raw_scale;
  const Mat s = clamp_scale(raw);
  const Mat es = s.array().exp().matrix();
  const Mat dya = dy.rightCols(active_);

  Mat dx(dy.rows(), dy.cols());
  dx.rightCols(active_) = dya.cwiseProduct(es);

  Mat ds = dya.cwiseProduct(tape.input.rightCols(active_)).cwiseProduct(es);
  ds.colwise() += dlogdet;
  const Mat draw = ds.binaryExpr(raw, [c = clamp_](double g, double r) {
    const double th = std::tanh(r / c);
    return g * (1.0 - th * th);
  });

  Mat dcond = scale_net_.backward(tape.scale, draw);
  dcond += shift_net_.backward(tape.shift, dya);

  dx.leftCols(pass_) = dy.leftCols(pass_) + dcond.leftCols(pass_);
  Eigen::Map<Mat> table_grad(embedding_.grad.data(), num_classes_, embed_dim_);
  for (Eigen::Index i = 0; i < dcond.rows(); ++i) table_grad.row(labels[i]) += dcond.row(i).tail(embed_dim_);
  return dx;
}

void CouplingLayer::collect(ParamRefs& out) {
  out.push_back(&embedding_);
  scale_net_.collect(out);
  shift_net_.collect(out);
}

FlowModel::FlowModel(const FlowConfig& config, std::uint64_t seed) : config_(config) {
  if (config.dim < 1 || config.num_classes < 1 || config.layers < 0)
    throw Error(ErrorKind::InputShape, "invalid flow configuration");
  Rng rng(seed);
  for (int l = 0; l < config.layers; ++l) {
    layers_.push_back(std::make_unique<PermutationLayer>(config.dim, rng));
    auto coupling = std::make_unique<CouplingLayer>("coupling" + std::to_string(l), config);
    coupling->init(rng);
    layers_.push_back(std::move(coupling));
  }
}

FlowModel::FlowModel(const FlowConfig& config, std::vector<std::unique_ptr<FlowLayer>> layers)
    : config_(config), layers_(std::move(layers)) {}

FlowModel::FlowModel(const FlowModel& other) : config_(other.config_) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

FlowModel& FlowModel::operator=(const FlowModel& other) {
  if (this != &other) {
    FlowModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void FlowModel::check_inputs(const Mat& x, std::span<const int> labels) const {
  if (x.cols() != config_.dim)
    throw Error(ErrorKind::InputShape,
                "expected dimension " + std::to_string(config_.dim) + ", got " + std::to_string(x.cols()));
  if (static_cast<std::size_t>(x.rows()) != labels.size())
    throw Error(ErrorKind::InputShape, "row count does not match label count");
  if (!x.allFinite()) throw Error(ErrorKind::NumericInput, "non-finite flow input");
  check_labels(labels, config_.num_classes);
}

ForwardResult FlowModel::forward(const Mat& z, std::span<const int> labels) const {
  check_inputs(z, labels);
  ForwardResult r{z, Vec::Zero(z.rows())};
  for (const auto& layer : layers_) r.u = layer->forward(r.u, labels, r.logdet, nullptr);
  return r;
}

Mat FlowModel::inverse(const Mat& u, std::span<const int> labels) const {
  check_inputs(u, labels);
  Mat z = u;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) z = (*it)->inverse(z, labels);
  return z;
}

Vec FlowModel::log_prob(const Mat& z, std::span<const int> labels) const {
  const ForwardResult r = forward(z, labels);
  Vec lp(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) lp[i] = standard_normal_log_density(r.u.row(i)) + r.logdet[i];
  return lp;
}

GeneratedBatch FlowModel::sample(std::size_t n, std::span<const int> support, std::uint64_t seed) const {
  if (support.empty()) throw Error(ErrorKind::EmptySupport, "no classes available to sample");
  if (n == 0) throw Error(ErrorKind::EmptyBatch, "sample count must be positive");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, support.size() - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  GeneratedBatch batch;
  batch.labels.resize(n);
  for (auto& y : batch.labels) y = support[pick(rng)];
  batch.latents.resize(static_cast<Eigen::Index>(n), config_.dim);
  for (Eigen::Index i = 0; i < batch.latents.size(); ++i) batch.latents.data()[i] = normal(rng);
  batch.features = inverse(batch.latents, batch.labels);
  batch.weights.assign(n, 1.0);
  return batch;
}

Vec FlowModel::weighted_nll_backward(const Mat& z, std::span<const int> labels, const Vec& row_weights) {
  check_inputs(z, labels);
  std::vector<LayerTape> tapes(layers_.size());
  Mat x = z;
  Vec logdet = Vec::Zero(z.rows());
  for (std::size_t l = 0; l < layers_.size(); ++l) x = layers_[l]->forward(x, labels, logdet, &tapes[l]);

  Vec lp(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) lp[i] = standard_normal_log_density(x.row(i)) + logdet[i];

  // -log N(u) has gradient u; every layer's log-det enters with weight -w.
  Mat dx = row_weights.asDiagonal() * x;
  const Vec dlogdet = -row_weights;
  for (std::size_t l = layers_.size(); l-- > 0;) dx = layers_[l]->backward(tapes[l], labels, dx, dlogdet);
  return lp;
}

ParamRefs FlowModel::params() {
  ParamRefs refs;
  for (auto& l : layers_) l->collect(refs);
  return refs;
}

ParameterVector FlowModel::parameters() const {
  return flatten(const_cast<FlowModel*>(this)->params());
}

void FlowModel::set_parameters(const ParameterVector& pv) { assign(params(), pv); }

namespace {

struct StackedBatch {
  Mat features;
  std::vector<int> labels;
  Vec weights;
};

StackedBatch stack_for_loss(const Mat& local, std::span<const int> local_labels, const GeneratedBatch* replay) {
  if (local.rows() == 0 || local_labels.empty()) throw Error(ErrorKind::EmptyBatch, "nf_loss needs local samples");
  if (static_cast<std::size_t>(local.rows()) != local_labels.size())
    throw Error(ErrorKind::InputShape, "feature rows do not match labels");
  const Eigen::Index nl = local.rows();
  const Eigen::Index nr = replay ? static_cast<Eigen::Index>(replay->size()) : 0;
  if (replay && nr == 0) throw Error(ErrorKind::EmptyBatch, "replay batch is empty");
  StackedBatch s;
  s.features.resize(nl + nr, local.cols());
  s.features.topRows(nl) = local;
  s.labels.assign(local_labels.begin(), local_labels.end());
  s.weights = Vec::Constant(nl + nr, 1.0 / static_cast<double>(nl));
  if (replay) {
    if (replay->features.cols() != local.cols()) throw Error(ErrorKind::InputShape, "replay feature width differs");
    s.features.bottomRows(nr) = replay->features;
    s.labels.insert(s.labels.end(), replay->labels.begin(), replay->labels.end());
    s.weights.tail(nr).setConstant(1.0 / static_cast<double>(nr));
  }
  return s;
}

}  // namespace

NfLoss nf_loss(const FlowModel& flow, const Mat& local_features, std::span<const int> local_labels,
               const GeneratedBatch* replay) {
  const StackedBatch s = stack_for_loss(local_features, local_labels, replay);
  const Vec lp = flow.log_prob(s.features, s.labels);
  const Eigen::Index nl = local_features.rows();
  NfLoss out;
  out.local = -lp.head(nl).mean();
  if (replay) out.replay = -lp.tail(lp.size() - nl).mean();
  return out;
}

NfLoss nf_loss_backward(FlowModel& flow, const Mat& local_features, std::span<const int> local_labels,
                        const GeneratedBatch* replay) {
  const StackedBatch s = stack_for_loss(local_features, local_labels, replay);
  const Vec lp = flow.weighted_nll_backward(s.features, s.labels, s.weights);
  const Eigen::Index nl = local_features.rows();
  NfLoss out;
  out.local = -lp.head(nl).mean();
  if (replay) out.replay = -lp.tail(lp.size() - nl).mean();
  return out;
}

}  // namespace affcl::flow
