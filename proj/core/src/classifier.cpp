#include "affcl/classifier.hpp"

#include "affcl/error.hpp"

#include <cmath>

namespace affcl::classifier {

ConvExtractor::ConvExtractor(nn::ImageShape input, const std::vector<int>& channels, int feature_dim)
    : input_(input) {
  nn::ImageShape shape = input;
  for (std::size_t l = 0; l < channels.size(); ++l) {
    convs_.emplace_back("ha.conv" + std::to_string(l), shape, channels[l], 3, 2, 1);
    shape = convs_.back().out_shape();
  }
  fc_ = nn::Linear("ha.fc", shape.size(), feature_dim);
}

void ConvExtractor::init(Rng& rng) {
  for (auto& c : convs_) c.init(rng);
  fc_.init(rng);
}

Mat ConvExtractor::run(const Mat& x, bool keep) {
  if (x.cols() != input_.size())
    throw Error(ErrorKind::InputShape, "extractor expects " + std::to_string(input_.size()) + " values per sample, got " +
                                           std::to_string(x.cols()));
  if (keep) {
    inputs_.clear();
    pre_.clear();
  }
  Mat a = x;
  for (const auto& conv : convs_) {
    Mat pre = conv.forward(a);
    Mat post = leaky(pre);
    if (keep) {
      inputs_.push_back(std::move(a));
      pre_.push_back(std::move(pre));
    }
    a = std::move(post);
  }
  Mat pre = fc_.forward(a);
  Mat out = leaky(pre);
  if (keep) {
    inputs_.push_back(std::move(a));
    pre_.push_back(std::move(pre));
  }
  return out;
}

Mat ConvExtractor::forward(const Mat& x) const { return const_cast<ConvExtractor*>(this)->run(x, false); }

Mat ConvExtractor::forward_train(const Mat& x) { return run(x, true); }

void ConvExtractor::backward(const Mat& dfeatures) {
  Mat d = fc_.backward(inputs_.back(), leaky_backward(pre_.back(), dfeatures));
  for (std::size_t l = convs_.size(); l-- > 0;) d = convs_[l].backward(inputs_[l], leaky_backward(pre_[l], d));
}

void ConvExtractor::collect(ParamRefs& out) {
  for (auto& c : convs_) c.collect(out);
  fc_.collect(out);
}

MlpExtractor::MlpExtractor(int input_size, const std::vector<int>& widths) {
  if (widths.empty()) throw Error(ErrorKind::InputShape, "extractor needs at least one layer");
  int in = input_size;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    layers_.emplace_back("ha.fc" + std::to_string(l), in, widths[l]);
    in = widths[l];
  }
}

void MlpExtractor::init(Rng& rng) {
  for (auto& l : layers_) l.init(rng);
}

Mat MlpExtractor::run(const Mat& x, bool keep) {
  if (keep) {
    inputs_.clear();
    pre_.clear();
  }
  Mat a = x;
  for (const auto& layer : layers_) {
    Mat pre = layer.forward(a);
    Mat post = leaky(pre);
    if (keep) {
      inputs_.push_back(std::move(a));
      pre_.push_back(std::move(pre));
    }
    a = std::move(post);
  }
  return a;
}

Mat MlpExtractor::forward(const Mat& x) const { return const_cast<MlpExtractor*>(this)->run(x, false); }

Mat MlpExtractor::forward_train(const Mat& x) { return run(x, true); }

void MlpExtractor::backward(const Mat& dfeatures) {
  Mat d = dfeatures;
  for (std::size_t l = layers_.size(); l-- > 0;) d = layers_[l].backward(inputs_[l], leaky_backward(pre_[l], d));
}

void MlpExtractor::collect(ParamRefs& out) {
  for (auto& l : layers_) l.collect(out);
}

namespace {

std::unique_ptr<FeatureExtractor> make_conv(const ClassifierConfig& c, Rng& rng) {
  auto e = std::make_unique<ConvExtractor>(c.input, c.conv_channels, c.feature_dim);
  e->init(rng);
  return e;
}

}  // namespace

SplitClassifier::SplitClassifier(const ClassifierConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  extractor_ = make_conv(config, rng);
  int in = config.feature_dim;
  for (int l = 0; l < config.mid_layers; ++l) {
    mid_.emplace_back("hb.fc" + std::to_string(l), in, config.mid_dim);
    mid_.back().init(rng);
    in = config.mid_dim;
  }
  head_ = nn::Linear("hc", in, config.num_classes);
  head_.init(rng);
}

SplitClassifier::SplitClassifier(std::unique_ptr<FeatureExtractor> extractor, int mid_dim, int mid_layers,
                                 int num_classes, std::uint64_t seed)
    : extractor_(std::move(extractor)) {
  Rng rng(seed);
  int in = extractor_->feature_dim();
  for (int l = 0; l < mid_layers; ++l) {
    mid_.emplace_back("hb.fc" + std::to_string(l), in, mid_dim);
    mid_.back().init(rng);
    in = mid_dim;
  }
  head_ = nn::Linear("hc", in, num_classes);
  head_.init(rng);
}

SplitClassifier::SplitClassifier(const SplitClassifier& other)
    : extractor_(other.extractor_->clone()), mid_(other.mid_), head_(other.head_) {}

SplitClassifier& SplitClassifier::operator=(const SplitClassifier& other) {
  if (this != &other) {
    SplitClassifier copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Mat SplitClassifier::features(const Mat& x) const { return extractor_->forward(x); }

Mat SplitClassifier::head(const Mat& features) const {
  Mat a = features;
  for (const auto& l : mid_) a = leaky(l.forward(a));
  return head_.forward(a);
}

std::vector<int> SplitClassifier::predict(const Mat& x) const {
  const Mat logits = this->logits(x);
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) logits.row(i).maxCoeff(&out[static_cast<std::size_t>(i)]);
  return out;
}

Mat SplitClassifier::head_forward_train(const Mat& features, HeadTape& tape) {
  tape.inputs.clear();
  tape.pre.clear();
  Mat a = features;
  for (const auto& l : mid_) {
    Mat pre = l.forward(a);
    tape.inputs.push_back(std::move(a));
    a = leaky(pre);
    tape.pre.push_back(std::move(pre));
  }
  Mat out = head_.forward(a);
  tape.head_input = std::move(a);
  return out;
}

Mat SplitClassifier::head_backward(const HeadTape& tape, const Mat& dlogits) {
  Mat d = head_.backward(tape.head_input, dlogits);
  for (std::size_t l = mid_.size(); l-- > 0;) d = mid_[l].backward(tape.inputs[l], leaky_backward(tape.pre[l], d));
  return d;
}

ParamRefs SplitClassifier::params() {
  ParamRefs refs = extractor_params();
  for (auto& l : mid_) l.collect(refs);
  head_.collect(refs);
  return refs;
}

ParamRefs SplitClassifier::extractor_params() {
  ParamRefs refs;
  extractor_->collect(refs);
  return refs;
}

ParameterVector SplitClassifier::parameters() const { return flatten(const_cast<SplitClassifier*>(this)->params()); }

void SplitClassifier::set_parameters(const ParameterVector& pv) { assign(params(), pv); }

ParameterVector SplitClassifier::extractor_parameters() const {
  return flatten(const_cast<SplitClassifier*>(this)->extractor_params());
}

std::unique_ptr<FeatureExtractor> FrozenSnapshot::materialize_extractor(const SplitClassifier& architecture) const {
  auto e = architecture.extractor().clone();
  ParamRefs refs;
  e->collect(refs);
  assign(refs, extractor_);
  return e;
}

flow::FlowModel FrozenSnapshot::materialize_flow(const flow::FlowModel& architecture) const {
  flow::FlowModel g = architecture;
  g.set_parameters(flow_);
  return g;
}

namespace {

void check_labels(std::span<const int> labels, int num_classes) {
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw Error(ErrorKind::LabelDomain,
                  "label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
}

void check_weights(const std::vector<double>& w) {
  for (double v : w)
    if (!(v >= 0.0)) throw Error(ErrorKind::WeightDomain, "replay weights must be nonnegative");
}

Vec row_logsumexp(const Mat& logits) {
  Vec out(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    out[i] = m + std::log((logits.row(i).array() - m).exp().sum());
  }
  return out;
}

/// Softmax minus one-hot, scaled per row.
Mat ce_gradient(const Mat& logits, std::span<const int> labels, const Vec& row_scale) {
  const Vec lse = row_logsumexp(logits);
  Mat g(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    g.row(i) = (logits.row(i).array() - lse[i]).exp().matrix();
    g(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    g.row(i) *= row_scale[i];
  }
  return g;
}

}  // namespace

Vec cross_entropy(const Mat& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size())
    throw Error(ErrorKind::InputShape, "logit rows do not match labels");
  check_labels(labels, static_cast<int>(logits.cols()));
  const Vec lse = row_logsumexp(logits);
  Vec ce(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) ce[i] = lse[i] - logits(i, labels[static_cast<std::size_t>(i)]);
  return ce;
}

double ce_loss_raw(const SplitClassifier& h, const Mat& x, std::span<const int> labels) {
  if (labels.empty()) throw Error(ErrorKind::EmptyBatch, "raw batch is empty");
  check_labels(labels, h.num_classes());
  return cross_entropy(h.logits(x), labels).mean();
}

double ce_loss_generated(const SplitClassifier& h, const flow::GeneratedBatch& batch) {
  if (batch.size() == 0) throw Error(ErrorKind::EmptyBatch, "generated batch is empty");
  check_weights(batch.weights);
  const Vec ce = cross_entropy(h.head(batch.features), batch.labels);
  const Eigen::Map<const Vec> w(batch.weights.data(), static_cast<Eigen::Index>(batch.weights.size()));
  return w.dot(ce) / static_cast<double>(batch.size());
}

double kd_loss(const SplitClassifier& h, const FeatureExtractor* frozen, const Mat& x) {
  if (!frozen) return 0.0;
  if (x.rows() == 0) throw Error(ErrorKind::EmptyBatch, "distillation batch is empty");
  const Mat diff = h.features(x) - frozen->forward(x);
  return diff.squaredNorm() / static_cast<double>(x.rows());
}

LossTerms total_loss(const SplitClassifier& h, const Mat& x, std::span<const int> labels,
                     const flow::GeneratedBatch* generated, const FeatureExtractor* frozen, LossSwitches on) {
  LossTerms t;
  if (on.raw) t.ce_raw = ce_loss_raw(h, x, labels);
  if (on.generated && generated) t.ce_generated = ce_loss_generated(h, *generated);
  if (on.distill) t.kd = kd_loss(h, frozen, x);
  return t;
}

LossTerms total_loss_backward(SplitClassifier& h, const Mat& x, std::span<const int> labels,
                              const flow::GeneratedBatch* generated, const FeatureExtractor* frozen, LossSwitches on) {
  const bool use_gen = on.generated && generated != nullptr;
  const bool use_kd = on.distill && frozen != nullptr;
  const bool need_features = on.raw || use_kd;
  if (on.raw) {
    if (labels.empty()) throw Error(ErrorKind::EmptyBatch, "raw batch is empty");
    check_labels(labels, h.num_classes());
  }
  if (use_gen) {
    if (generated->size() == 0) throw Error(ErrorKind::EmptyBatch, "generated batch is empty");
    check_weights(generated->weights);
  }

  LossTerms t;
  const Eigen::Index n_raw = on.raw ? x.rows() : 0;
  const Eigen::Index n_gen = use_gen ? static_cast<Eigen::Index>(generated->size()) : 0;
  Mat feats;
  if (need_features) feats = h.extractor().forward_train(x);
  Mat dfeats = need_features ? Mat::Zero(feats.rows(), feats.cols()) : Mat();

  if (n_raw + n_gen > 0) {
    Mat head_in(n_raw + n_gen, h.feature_dim());
    std::vector<int> head_labels;
    Vec scale(n_raw + n_gen);
    if (n_raw > 0) {
      head_in.topRows(n_raw) = feats;
      head_labels.assign(labels.begin(), labels.end());
      scale.head(n_raw).setConstant(1.0 / static_cast<double>(n_raw));
    }
    if (n_gen > 0) {
      head_in.bottomRows(n_gen) = generated->features;
      head_labels.insert(head_labels.end(), generated->labels.begin(), generated->labels.end());
      for (Eigen::Index i = 0; i < n_gen; ++i)
        scale[n_raw + i] = generated->weights[static_cast<std::size_t>(i)] / static_cast<double>(n_gen);
    }
    HeadTape tape;
    const Mat logits = h.head_forward_train(head_in, tape);
    const Vec ce = cross_entropy(logits, head_labels);
    if (n_raw > 0) t.ce_raw = ce.head(n_raw).mean();
    if (n_gen > 0) t.ce_generated = scale.tail(n_gen).dot(ce.tail(n_gen));
    const Mat dhead = h.head_backward(tape, ce_gradient(logits, head_labels, scale));
    // Generated rows stop here: they never reach h_a.
    if (n_raw > 0) dfeats += dhead.topRows(n_raw);
  }

  if (use_kd) {
    const Mat diff = feats - frozen->forward(x);
    t.kd = diff.squaredNorm() / static_cast<double>(x.rows());
    dfeats += (2.0 / static_cast<double>(x.rows())) * diff;
  }
  if (need_features) h.extractor().backward(dfeats);
  return t;
}

}  // namespace affcl::classifier
