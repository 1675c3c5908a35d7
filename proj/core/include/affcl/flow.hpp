#pragma once

#include "affcl/linalg.hpp"
#include "affcl/nn.hpp"
#include "affcl/params.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace affcl::flow {

struct FlowConfig {
  int dim = 512;
  int num_classes = 26;
  /// Number of (permutation, coupling) pairs.
  int layers = 4;
  int hidden = 256;
  int embed_dim = 32;
  int res_blocks = 2;
  /// Log-scales pass through clamp * tanh(s / clamp).
  double clamp = 3.0;
};

/// Activations a layer keeps between forward and backward.
struct LayerTape {
  Mat input;
  Mat raw_scale;
  nn::ResidualMlpTape scale;
  nn::ResidualMlpTape shift;
};

/// Interface for one bijective step. Couplings and permutations ship; other
/// families (autoregressive, spline) only need to implement this.
class FlowLayer {
 public:
  virtual ~FlowLayer() = default;

  /// Returns the image of `x` and adds each row's log|det J| to `logdet`.
  virtual Mat forward(const Mat& x, std::span<const int> labels, Vec& logdet, LayerTape* tape) const = 0;
  virtual Mat inverse(const Mat& y, std::span<const int> labels) const = 0;
  /// `dy` is dL/dy and `dlogdet` is dL/d(row log-det). Accumulates parameter
  /// gradients and returns dL/dx.
  virtual Mat backward(const LayerTape& tape, std::span<const int> labels, const Mat& dy, const Vec& dlogdet) = 0;

  virtual void collect(ParamRefs& out) = 0;
  virtual std::unique_ptr<FlowLayer> clone() const = 0;
};

class PermutationLayer final : public FlowLayer {
 public:
  PermutationLayer(int dim, Rng& rng);
  explicit PermutationLayer(std::vector<int> perm);

  Mat forward(const Mat& x, std::span<const int> labels, Vec& logdet, LayerTape* tape) const override;
  Mat inverse(const Mat& y, std::span<const int> labels) const override;
  Mat backward(const LayerTape& tape, std::span<const int> labels, const Mat& dy, const Vec& dlogdet) override;
  void collect(ParamRefs&) override {}
  std::unique_ptr<FlowLayer> clone() const override { return std::make_unique<PermutationLayer>(*this); }

  const std::vector<int>& perm() const { return perm_; }

 private:
  std::vector<int> perm_;  // y[j] = x[perm_[j]]
};

/// Conditional affine coupling: the first ceil(d/2) coordinates pass through and,
/// together with a learned label embedding, parameterize a scale and shift of
/// the remaining floor(d/2) coordinates.
class CouplingLayer final : public FlowLayer {
 public:
  CouplingLayer(const std::string& name, const FlowConfig& config);

  /// Random hidden weights; zero output layers unless `zero_output` is false,
  /// so a fresh coupling is the identity.
  void init(Rng& rng, bool zero_output = true);

  Mat forward(const Mat& x, std::span<const int> labels, Vec& logdet, LayerTape* tape) const override;
  Mat inverse(const Mat& y, std::span<const int> labels) const override;
  Mat backward(const LayerTape& tape, std::span<const int> labels, const Mat& dy, const Vec& dlogdet) override;
  void collect(ParamRefs& out) override;
  std::unique_ptr<FlowLayer> clone() const override { return std::make_unique<CouplingLayer>(*this); }

  const std::vector<bool>& active_mask() const { return active_mask_; }
  int label_embed_dim() const { return embed_dim_; }

 private:
  Mat conditioner(const Mat& passthrough, std::span<const int> labels) const;
  Mat clamp_scale(const Mat& raw) const;

  int dim_;
  int pass_;
  int active_;
  int embed_dim_;
  int num_classes_;
  double clamp_;
  std::vector<bool> active_mask_;
  Param embedding_;
  nn::ResidualMlp scale_net_;
  nn::ResidualMlp shift_net_;
};

/// Generated replay features; `weights` are filled in by the replay scorer.
struct GeneratedBatch {
  Mat latents;
  Mat features;
  std::vector<int> labels;
  std::vector<double> weights;

  std::size_t size() const { return labels.size(); }
};

struct ForwardResult {
  Mat u;
  Vec logdet;
};

class FlowModel {
 public:
  /// Alternating random permutations and identity-initialized couplings.
  FlowModel(const FlowConfig& config, std::uint64_t seed);
  /// Caller-assembled stack, e.g. couplings without permutations.
  FlowModel(const FlowConfig& config, std::vector<std::unique_ptr<FlowLayer>> layers);

  FlowModel(const FlowModel& other);
  FlowModel& operator=(const FlowModel& other);
  FlowModel(FlowModel&&) noexcept = default;
  FlowModel& operator=(FlowModel&&) noexcept = default;

  ForwardResult forward(const Mat& z, std::span<const int> labels) const;
  Mat inverse(const Mat& u, std::span<const int> labels) const;
  /// log p_z(z | y) = log N(g(z|y); 0, I) + sum of layer log-dets.
  Vec log_prob(const Mat& z, std::span<const int> labels) const;

  /// Draws n latents from the prior and labels uniformly from `support`.
  GeneratedBatch sample(std::size_t n, std::span<const int> support, std::uint64_t seed) const;

  /// Accumulates gradients of sum_i row_weights[i] * (-log p_z(z_i | y_i)); returns per-row log p_z.
  Vec weighted_nll_backward(const Mat& z, std::span<const int> labels, const Vec& row_weights);

  ParamRefs params();
  ParameterVector parameters() const;
  void set_parameters(const ParameterVector& pv);

  const FlowConfig& config() const { return config_; }
  std::size_t num_layers() const { return layers_.size(); }
  const FlowLayer& layer(std::size_t i) const { return *layers_[i]; }

 private:
  void check_inputs(const Mat& x, std::span<const int> labels) const;

  FlowConfig config_;
  std::vector<std::unique_ptr<FlowLayer>> layers_;
};

double standard_normal_log_density(const Eigen::Ref<const RowVec>& u);

/// Negative mean log-likelihood on local features plus, when `replay` is
/// given, negative mean log-likelihood on replayed features.
struct NfLoss {
  double local = 0.0;
  double replay = 0.0;
  double total() const { return local + replay; }
};

NfLoss nf_loss(const FlowModel& flow, const Mat& local_features, std::span<const int> local_labels,
               const GeneratedBatch* replay);
/// Same value as `nf_loss`, with parameter gradients accumulated into `flow`.
NfLoss nf_loss_backward(FlowModel& flow, const Mat& local_features, std::span<const int> local_labels,
                        const GeneratedBatch* replay);

}  // namespace affcl::flow
