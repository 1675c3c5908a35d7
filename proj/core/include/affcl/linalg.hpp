#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace affcl {

/// Batches are stored one sample per row.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

using Rng = std::mt19937_64;

/// Mixes a base seed with an ordered list of integers (task, round, client, ...)
/// into an independent stream seed.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path);

inline constexpr double kLeakySlope = 0.01;

inline double leaky(double v) { return v > 0.0 ? v : kLeakySlope * v; }
inline double leaky_grad(double pre) { return pre > 0.0 ? 1.0 : kLeakySlope; }

inline Mat leaky(const Mat& pre) { return pre.unaryExpr([](double v) { return leaky(v); }); }

/// dL/dpre given dL/dpost and the pre-activation values.
inline Mat leaky_backward(const Mat& pre, const Mat& dpost) {
  return dpost.binaryExpr(pre, [](double g, double p) { return g * leaky_grad(p); });
}

bool all_finite(const Mat& m);

}  // namespace affcl
