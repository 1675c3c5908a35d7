#pragma once

#include "affcl/replay.hpp"
#include "affcl/streams.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace affcl::runner {

inline constexpr const char* kCodeVersion = "affcl-1.0";

struct DataConfig {
  /// "synthetic" or "idx".
  std::string source = "synthetic";
  /// IDX paths; relative paths resolve against $AFCL_DATA_ROOT when set.
  std::string images;
  std::string labels;
  streams::SyntheticSpec synthetic;
};

struct ModelConfig {
  std::vector<int> conv_channels{64, 128, 256};
  int feature_dim = 512;
  int mid_dim = 512;
  int mid_layers = 1;
  int flow_layers = 4;
  int flow_hidden = 256;
  int embed_dim = 32;
  int res_blocks = 2;
  double clamp = 3.0;
};

struct OptimizerConfig {
  double lr = 1e-4;
  int batch = 64;
  int replay_batch = 64;
  int local_iters = 50;
  int rounds_per_task = 10;
  double prox_mu = 0.01;
  int stats_refit_every = 10;
  double participation = 1.0;
};

struct RunConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out_dir = "runs";
  bool checkpoint_rounds = true;
  bool clamp_forgetting = false;
};

struct SweepConfig {
  std::vector<int> noisy_values{0, 1, 2};
  std::vector<replay::Method> methods{replay::Method::AfFcl, replay::Method::AfWoAf, replay::Method::FedAvg};
};

/// Defaults: the desk-scale federation (N=4, T=4, C=2 over a synthetic pool)
/// with the appendix optimizer settings (Adam, lr 1e-4, mini-batch 64) and
/// appendix model widths.
struct ExperimentConfig {
  streams::FederationSpec federation;
  DataConfig data;
  replay::Method method = replay::Method::AfFcl;
  ModelConfig model;
  OptimizerConfig optimizer;
  RunConfig run;
  SweepConfig sweep;
};

/// INI text with sections [federation] [data] [method] [optimizer] [model]
/// [run] [sweep]. Unknown sections or keys and ill-typed values are config errors.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Sorted key=value lines covering every field that affects results (the
/// output directory is excluded), prefixed by the code version tag.
std::string canonical_config(const ExperimentConfig& config);
/// First 16 hex digits of SHA-256 over the canonical config.
std::string config_hash(const ExperimentConfig& config);

/// Range and consistency checks run before any compute.
void validate(const ExperimentConfig& config);

}  // namespace affcl::runner
