#pragma once

#include "affcl/linalg.hpp"

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace affcl {

/// A named, shaped block of trainable values with its gradient accumulator.
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  Vec value;
  Vec grad;

  Param() = default;
  Param(std::string n, std::vector<std::size_t> s);

  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
  void zero_grad() { grad.setZero(); }
};

struct ManifestEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

using Manifest = std::vector<ManifestEntry>;

/// Flat, ordered encoding of a model's parameters. Aggregation only needs the
/// values and a manifest equality check; it never interprets layer semantics.
struct ParameterVector {
  Manifest manifest;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
};

/// Parameter views are collected as raw pointers into the owning model; they
/// stay valid as long as the model is neither moved nor destroyed.
using ParamRefs = std::vector<Param*>;

ParameterVector flatten(std::span<Param* const> params);
void assign(std::span<Param* const> params, const ParameterVector& pv);
void zero_grads(std::span<Param* const> params);
/// Gradients in manifest order.
std::vector<double> flatten_grads(std::span<Param* const> params);

void require_same_manifest(const ParameterVector& a, const ParameterVector& b);

double squared_norm(const ParameterVector& pv);

/// Checkpoint file: "AFCK" magic, u32 version, u32 manifest-json length,
/// manifest json, u64 value count, then little-endian float32 values.
void write_checkpoint(const std::filesystem::path& path, const ParameterVector& pv);
ParameterVector read_checkpoint(const std::filesystem::path& path);

/// Full-precision binary state used for exact resumption (float64 values).
void write_exact(std::ostream& out, const ParameterVector& pv);
ParameterVector read_exact(std::istream& in);

}  // namespace affcl
