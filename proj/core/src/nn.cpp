#include "affcl/nn.hpp"

#include "affcl/error.hpp"

#include <cmath>

namespace affcl::nn {

Linear::Linear(const std::string& name, int in, int out)
    : in_(in),
      out_(out),
      weight_(name + ".weight", {static_cast<std::size_t>(out), static_cast<std::size_t>(in)}),
      bias_(name + ".bias", {static_cast<std::size_t>(out)}) {}

void Linear::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(in_, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& w : weight_.value) w = dist(rng);
  for (auto& b : bias_.value) b = dist(rng);
}

void Linear::init_zero() {
  weight_.value.setZero();
  bias_.value.setZero();
}

Mat Linear::forward(const Mat& x) const {
  if (x.cols() != in_)
    throw Error(ErrorKind::InputShape, weight_.name + ": expected " + std::to_string(in_) + " inputs, got " +
                                           std::to_string(x.cols()));
  Mat y = x * weight().transpose();
  y.rowwise() += Eigen::Map<const RowVec>(bias_.value.data(), out_);
  return y;
}

Mat Linear::backward(const Mat& x, const Mat& dy) {
  Eigen::Map<Mat>(weight_.grad.data(), out_, in_).noalias() += dy.transpose() * x;
  Eigen::Map<RowVec>(bias_.grad.data(), out_) += dy.colwise().sum();
  return dy * weight();
}

void Linear::collect(ParamRefs& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

ResidualMlp::ResidualMlp(const std::string& name, int in, int hidden, int out, int blocks)
    : input_(name + ".in", in, hidden), output_(name + ".out", hidden, out) {
  for (int b = 0; b < blocks; ++b) {
    first_.emplace_back(name + ".block" + std::to_string(b) + ".fc1", hidden, hidden);
    second_.emplace_back(name + ".block" + std::to_string(b) + ".fc2", hidden, hidden);
  }
}

void ResidualMlp::init(Rng& rng, bool zero_output) {
  input_.init(rng);
  for (std::size_t b = 0; b < first_.size(); ++b) {
    first_[b].init(rng);
    second_[b].init(rng);
  }
  if (zero_output)
    output_.init_zero();
  else
    output_.init(rng);
}

Mat ResidualMlp::forward(const Mat& x, ResidualMlpTape* tape) const {
  Mat h = input_.forward(x);
  if (tape) {
    tape->input = x;
    tape->block_in.clear();
    tape->block_mid.clear();
  }
  for (std::size_t b = 0; b < first_.size(); ++b) {
    Mat mid = first_[b].forward(leaky(h));
    Mat r = second_[b].forward(leaky(mid));
    if (tape) {
      tape->block_in.push_back(h);
      tape->block_mid.push_back(mid);
    }
    h += r;
  }
  Mat y = output_.forward(leaky(h));
  if (tape) tape->last = std::move(h);
  return y;
}

Mat ResidualMlp::backward(const ResidualMlpTape& tape, const Mat& dy) {
  Mat dh = leaky_backward(tape.last, output_.backward(leaky(tape.last), dy));
  for (std::size_t i = first_.size(); i-- > 0;) {
    const Mat& hin = tape.block_in[i];
    const Mat& mid = tape.block_mid[i];
    Mat dmid = leaky_backward(mid, second_[i].backward(leaky(mid), dh));
    dh += leaky_backward(hin, first_[i].backward(leaky(hin), dmid));
  }
  return input_.backward(tape.input, dh);
}

void ResidualMlp::collect(ParamRefs& out) {
  input_.collect(out);
  for (std::size_t b = 0; b < first_.size(); ++b) {
    first_[b].collect(out);
    second_[b].collect(out);
  }
  output_.collect(out);
}

Conv2d::Conv2d(const std::string& name, ImageShape in, int out_channels, int kernel, int stride, int padding)
    : in_(in),
      kernel_(kernel),
      stride_(stride),
      padding_(padding),
      weight_(name + ".weight",
              {static_cast<std::size_t>(out_channels), static_cast<std::size_t>(kernel * kernel * in.channels)}),
      bias_(name + ".bias", {static_cast<std::size_t>(out_channels)}) {
  out_.channels = out_channels;
  out_.height = (in.height + 2 * padding - kernel) / stride + 1;
  out_.width = (in.width + 2 * padding - kernel) / stride + 1;
  if (out_.height <= 0 || out_.width <= 0) throw Error(ErrorKind::InputShape, name + ": input too small");
}

void Conv2d::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(kernel_ * kernel_ * in_.channels));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& w : weight_.value) w = dist(rng);
  for (auto& b : bias_.value) b = dist(rng);
}

Mat Conv2d::im2col(const Mat& x) const {
  const Eigen::Index n = x.rows();
  const int patch = kernel_ * kernel_ * in_.channels;
  const int positions = out_.height * out_.width;
  Mat cols = Mat::Zero(n * positions, patch);
  for (Eigen::Index s = 0; s < n; ++s) {
    const double* img = x.row(s).data();
    for (int oy = 0; oy < out_.height; ++oy) {
      for (int ox = 0; ox < out_.width; ++ox) {
        double* dst = cols.row(s * positions + oy * out_.width + ox).data();
        for (int ky = 0; ky < kernel_; ++ky) {
          const int iy = oy * stride_ - padding_ + ky;
          if (iy < 0 || iy >= in_.height) continue;
          for (int kx = 0; kx < kernel_; ++kx) {
            const int ix = ox * stride_ - padding_ + kx;
            if (ix < 0 || ix >= in_.width) continue;
            const double* src = img + (iy * in_.width + ix) * in_.channels;
            std::copy(src, src + in_.channels, dst + (ky * kernel_ + kx) * in_.channels);
          }
        }
      }
    }
  }
  return cols;
}

Mat Conv2d::col2im(const Mat& cols, Eigen::Index batch) const {
  const int positions = out_.height * out_.width;
  Mat dx = Mat::Zero(batch, in_.size());
  for (Eigen::Index s = 0; s < batch; ++s) {
    double* img = dx.row(s).data();
    for (int oy = 0; oy < out_.height; ++oy) {
      for (int ox = 0; ox < out_.width; ++ox) {
        const double* src = cols.row(s * positions + oy * out_.width + ox).data();
        for (int ky = 0; ky < kernel_; ++ky) {
          const int iy = oy * stride_ - padding_ + ky;
          if (iy < 0 || iy >= in_.height) continue;
          for (int kx = 0; kx < kernel_; ++kx) {
            const int ix = ox * stride_ - padding_ + kx;
            if (ix < 0 || ix >= in_.width) continue;
            double* dst = img + (iy * in_.width + ix) * in_.channels;
            const double* from = src + (ky * kernel_ + kx) * in_.channels;
            for (int c = 0; c < in_.channels; ++c) dst[c] += from[c];
          }
        }
      }
    }
  }
  return dx;
}

Mat Conv2d::forward(const Mat& x) const {
  if (x.cols() != in_.size())
    throw Error(ErrorKind::InputShape, weight_.name + ": expected " + std::to_string(in_.size()) +
                                           " values per sample, got " + std::to_string(x.cols()));
  const Eigen::Map<const Mat> w(weight_.value.data(), out_.channels, kernel_ * kernel_ * in_.channels);
  Mat stacked = im2col(x) * w.transpose();
  stacked.rowwise() += Eigen::Map<const RowVec>(bias_.value.data(), out_.channels);
  // (n * positions) x C row-major is bit-for-bit n x (positions * C) row-major.
  return Eigen::Map<Mat>(stacked.data(), x.rows(), out_.size());
}

Mat Conv2d::backward(const Mat& x, const Mat& dy) {
  const int patch = kernel_ * kernel_ * in_.channels;
  const Eigen::Index positions = out_.height * out_.width;
  const Eigen::Map<const Mat> dstack(dy.data(), dy.rows() * positions, out_.channels);
  const Mat cols = im2col(x);
  Eigen::Map<Mat>(weight_.grad.data(), out_.channels, patch).noalias() += dstack.transpose() * cols;
  Eigen::Map<RowVec>(bias_.grad.data(), out_.channels) += dstack.colwise().sum();
  const Eigen::Map<const Mat> w(weight_.value.data(), out_.channels, patch);
  return col2im(dstack * w, x.rows());
}

void Conv2d::collect(ParamRefs& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

Adam::Adam(ParamRefs params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const Param* p : params_) {
    m_.push_back(Vec::Zero(p->value.size()));
    v_.push_back(Vec::Zero(p->value.size()));
  }
}

void Adam::step() {
  ++steps_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * p.grad;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= config_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
    p.zero_grad();
  }
}

}  // namespace affcl::nn
