#pragma once

#include "affcl/linalg.hpp"
#include "affcl/params.hpp"

#include <string>
#include <vector>

namespace affcl::nn {

/// Fully connected layer, y = x W^T + b, over a batch of row vectors.
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out);

  /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and bias.
  void init(Rng& rng);
  void init_zero();

  Mat forward(const Mat& x) const;
  /// Accumulates parameter gradients for the call that saw input `x`; returns dL/dx.
  Mat backward(const Mat& x, const Mat& dy);

  void collect(ParamRefs& out);
  int in_dim() const { return in_; }
  int out_dim() const { return out_; }

  Eigen::Map<const Mat> weight() const { return {weight_.value.data(), out_, in_}; }
  Eigen::Map<Mat> weight() { return {weight_.value.data(), out_, in_}; }
  Eigen::Map<Vec> bias() { return {bias_.value.data(), out_}; }

 private:
  int in_ = 0;
  int out_ = 0;
  Param weight_;
  Param bias_;
};

/// Activations retained by ResidualMlp::forward for the backward pass.
struct ResidualMlpTape {
  Mat input;
  std::vector<Mat> block_in;
  std::vector<Mat> block_mid;
  Mat last;
};

/// Input projection, `blocks` pre-activation residual blocks (two affine maps
/// with leaky rectifiers and a skip connection), then an output projection.
class ResidualMlp {
 public:
  ResidualMlp() = default;
  ResidualMlp(const std::string& name, int in, int hidden, int out, int blocks);

  void init(Rng& rng, bool zero_output);

  Mat forward(const Mat& x, ResidualMlpTape* tape = nullptr) const;
  Mat backward(const ResidualMlpTape& tape, const Mat& dy);

  void collect(ParamRefs& out);

 private:
  Linear input_;
  std::vector<Linear> first_;
  std::vector<Linear> second_;
  Linear output_;
};

struct ImageShape {
  int channels = 1;
  int height = 28;
  int width = 28;

  int size() const { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// k x k convolution with zero padding. Activations are channels-last: a
/// sample row holds (y, x, c) with c fastest.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, ImageShape in, int out_channels, int kernel, int stride, int padding);

  void init(Rng& rng);

  Mat forward(const Mat& x) const;
  Mat backward(const Mat& x, const Mat& dy);

  void collect(ParamRefs& out);
  ImageShape in_shape() const { return in_; }
  ImageShape out_shape() const { return out_; }

 private:
  Mat im2col(const Mat& x) const;
  Mat col2im(const Mat& cols, Eigen::Index batch) const;

  ImageShape in_;
  ImageShape out_;
  int kernel_ = 3;
  int stride_ = 1;
  int padding_ = 0;
  Param weight_;
  Param bias_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ParamRefs params, AdamConfig config);
  /// Applies one update from the accumulated gradients, then clears them.
  void step();

 private:
  ParamRefs params_;
  AdamConfig config_;
  std::vector<Vec> m_;
  std::vector<Vec> v_;
  long steps_ = 0;
};

}  // namespace affcl::nn
