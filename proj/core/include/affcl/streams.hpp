#pragma once

#include "affcl/linalg.hpp"
#include "affcl/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace affcl::streams {

/// A pool of labelled images, one flattened channels-last image per row with
/// values in [0, 1].
struct Dataset {
  Mat images;
  std::vector<int> labels;
  nn::ImageShape shape;

  std::size_t size() const { return labels.size(); }
  /// One past the largest label present.
  int label_space() const;
  std::vector<int> classes() const;
};

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

struct SyntheticSpec {
  int classes = 16;
  int per_class = 500;
  int image_size = 12;
  double noise_sigma = 0.15;
  std::uint64_t seed = 0;
};

/// Each class is a fixed oriented bar plus an off-centre blob; samples add
/// independent Gaussian pixel noise and are clipped to [0, 1].
Dataset make_synthetic(const SyntheticSpec& spec);

enum class StreamKind { Ltp, Shuffle, Noisy, Synthetic };

StreamKind parse_stream_kind(std::string_view name);
std::string_view to_string(StreamKind kind);

struct FederationSpec {
  int clients = 4;
  int tasks = 4;
  int classes_per_task = 2;
  StreamKind kind = StreamKind::Ltp;
  /// Noisy streams only: how many clients get random labels, on which leading
  /// steps, and which clean construction they are layered on.
  int noisy_clients = 0;
  int noisy_steps = 3;
  StreamKind noisy_base = StreamKind::Shuffle;
  int per_class_cap = 500;
  double train_fraction = 0.85;
  std::uint64_t seed = 0;
};

struct TaskSpec {
  int client = 0;
  int step = 0;
  std::vector<int> class_list;
  /// Pool indices per entry of class_list.
  std::vector<std::vector<int>> sample_ids;
  std::vector<int> train_ids;
  std::vector<int> test_ids;
  /// Labels used for training; differ from the pool labels on noisy tasks.
  std::vector<int> train_labels;
  bool noisy = false;
};

struct TaskData {
  Mat train_x;
  std::vector<int> train_y;
  Mat test_x;
  std::vector<int> test_y;
};

struct ClientStream {
  int client = 0;
  std::vector<TaskSpec> tasks;
  std::vector<TaskData> data;
};

struct Federation {
  FederationSpec spec;
  nn::ImageShape shape;
  int label_space = 0;
  std::vector<ClientStream> clients;

  /// Classes in any client's tasks 0..step (inclusive).
  std::vector<int> classes_through(int step) const;
};

/// Deterministic in (spec, pool). Test labels are always clean.
Federation make_federation(const FederationSpec& spec, const Dataset& pool);

/// client -> step -> class_list -> sample ids, as JSON text.
std::string federation_manifest(const Federation& federation);

}  // namespace affcl::streams
