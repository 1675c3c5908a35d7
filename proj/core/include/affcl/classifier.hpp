#pragma once

#include "affcl/flow.hpp"
#include "affcl/linalg.hpp"
#include "affcl/nn.hpp"
#include "affcl/params.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace affcl::classifier {

/// The h_a stage. Concrete backbones are pluggable; the three-layer CNN ships.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual Mat forward(const Mat& x) const = 0;
  /// Forward pass that retains activations for one subsequent `backward`.
  virtual Mat forward_train(const Mat& x) = 0;
  virtual void backward(const Mat& dfeatures) = 0;

  virtual void collect(ParamRefs& out) = 0;
  virtual std::unique_ptr<FeatureExtractor> clone() const = 0;
  virtual int input_size() const = 0;
  virtual int feature_dim() const = 0;
};

/// Strided 3x3 convolutions (each followed by a leaky rectifier) and a fully
/// connected projection to the feature dimension, also rectified.
class ConvExtractor final : public FeatureExtractor {
 public:
  ConvExtractor(nn::ImageShape input, const std::vector<int>& channels, int feature_dim);
  void init(Rng& rng);

  Mat forward(const Mat& x) const override;
  Mat forward_train(const Mat& x) override;
  void backward(const Mat& dfeatures) override;
  void collect(ParamRefs& out) override;
  std::unique_ptr<FeatureExtractor> clone() const override { return std::make_unique<ConvExtractor>(*this); }
  int input_size() const override { return input_.size(); }
  int feature_dim() const override { return fc_.out_dim(); }

 private:
  Mat run(const Mat& x, bool keep);

  nn::ImageShape input_;
  std::vector<nn::Conv2d> convs_;
  nn::Linear fc_;
  std::vector<Mat> inputs_;
  std::vector<Mat> pre_;
};

/// Fully connected stack with leaky rectifiers after every layer.
class MlpExtractor final : public FeatureExtractor {
 public:
  MlpExtractor(int input_size, const std::vector<int>& widths);
  void init(Rng& rng);

  Mat forward(const Mat& x) const override;
  Mat forward_train(const Mat& x) override;
  void backward(const Mat& dfeatures) override;
  void collect(ParamRefs& out) override;
  std::unique_ptr<FeatureExtractor> clone() const override { return std::make_unique<MlpExtractor>(*this); }
  int input_size() const override { return layers_.front().in_dim(); }
  int feature_dim() const override { return layers_.back().out_dim(); }

 private:
  Mat run(const Mat& x, bool keep);

  std::vector<nn::Linear> layers_;
  std::vector<Mat> inputs_;
  std::vector<Mat> pre_;
};

struct ClassifierConfig {
  nn::ImageShape input{1, 28, 28};
  std::vector<int> conv_channels{64, 128, 256};
  int feature_dim = 512;
  int mid_dim = 512;
  int mid_layers = 1;
  int num_classes = 26;
};

/// Activations of h_b and h_c kept for backward.
struct HeadTape {
  std::vector<Mat> inputs;
  std::vector<Mat> pre;
  Mat head_input;
};

/// h = h_c o h_b o h_a with a single head over the global label space.
class SplitClassifier {
 public:
  SplitClassifier(const ClassifierConfig& config, std::uint64_t seed);
  SplitClassifier(std::unique_ptr<FeatureExtractor> extractor, int mid_dim, int mid_layers, int num_classes,
                  std::uint64_t seed);

  SplitClassifier(const SplitClassifier& other);
  SplitClassifier& operator=(const SplitClassifier& other);
  SplitClassifier(SplitClassifier&&) noexcept = default;
  SplitClassifier& operator=(SplitClassifier&&) noexcept = default;

  Mat features(const Mat& x) const;
  /// h_c(h_b(features)).
  Mat head(const Mat& features) const;
  Mat logits(const Mat& x) const { return head(features(x)); }
  std::vector<int> predict(const Mat& x) const;

  Mat head_forward_train(const Mat& features, HeadTape& tape);
  /// Returns dL/dfeatures.
  Mat head_backward(const HeadTape& tape, const Mat& dlogits);

  FeatureExtractor& extractor() { return *extractor_; }
  const FeatureExtractor& extractor() const { return *extractor_; }

  ParamRefs params();
  ParamRefs extractor_params();
  ParameterVector parameters() const;
  void set_parameters(const ParameterVector& pv);
  ParameterVector extractor_parameters() const;

  int num_classes() const { return head_.out_dim(); }
  int feature_dim() const { return extractor_->feature_dim(); }

 private:
  std::unique_ptr<FeatureExtractor> extractor_;
  std::vector<nn::Linear> mid_;
  nn::Linear head_;
};

/// h_a' and g' frozen at a task boundary.
class FrozenSnapshot {
 public:
  FrozenSnapshot(ParameterVector extractor, ParameterVector flow, int step_index)
      : extractor_(std::move(extractor)), flow_(std::move(flow)), step_index_(step_index) {}

  const ParameterVector& extractor_params() const { return extractor_; }
  const ParameterVector& flow_params() const { return flow_; }
  int step_index() const { return step_index_; }

  /// An extractor with `architecture`'s layout and the frozen parameters.
  std::unique_ptr<FeatureExtractor> materialize_extractor(const SplitClassifier& architecture) const;
  flow::FlowModel materialize_flow(const flow::FlowModel& architecture) const;

 private:
  ParameterVector extractor_;
  ParameterVector flow_;
  int step_index_;
};

/// Which terms of the classifier objective are active.
struct LossSwitches {
  bool raw = true;
  bool generated = true;
  bool distill = true;
};

struct LossTerms {
  double ce_raw = 0.0;
  double ce_generated = 0.0;
  double kd = 0.0;
  double total() const { return ce_raw + ce_generated + kd; }
};

/// Row-wise softmax cross-entropy, log-sum-exp stabilized.
Vec cross_entropy(const Mat& logits, std::span<const int> labels);

double ce_loss_raw(const SplitClassifier& h, const Mat& x, std::span<const int> labels);
/// (1/n) sum_i w_i CE(h_c(h_b(z_i)), y_i); generated features bypass h_a.
double ce_loss_generated(const SplitClassifier& h, const flow::GeneratedBatch& batch);
/// (1/n) sum_i ||h_a(x_i) - h_a'(x_i)||^2; zero without a frozen extractor.
double kd_loss(const SplitClassifier& h, const FeatureExtractor* frozen, const Mat& x);

/// Disabled terms, an absent generated batch, or an absent frozen extractor
/// all contribute exactly zero.
LossTerms total_loss(const SplitClassifier& h, const Mat& x, std::span<const int> labels,
                     const flow::GeneratedBatch* generated, const FeatureExtractor* frozen, LossSwitches on);
LossTerms total_loss_backward(SplitClassifier& h, const Mat& x, std::span<const int> labels,
                              const flow::GeneratedBatch* generated, const FeatureExtractor* frozen, LossSwitches on);

}  // namespace affcl::classifier
