#include "affcl/streams.hpp"

#include "affcl/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

namespace affcl::streams {

int Dataset::label_space() const {
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

std::vector<int> Dataset::classes() const {
  std::set<int> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& path) {
  if (off + 4 > b.size()) throw Error(ErrorKind::Integrity, path.string() + ": truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto ib = read_all(images);
  const auto lb = read_all(labels);
  if (be32(ib, 0, images) != 0x00000803u) throw Error(ErrorKind::Format, images.string() + ": bad image magic");
  if (be32(lb, 0, labels) != 0x00000801u) throw Error(ErrorKind::Format, labels.string() + ": bad label magic");

  const std::size_t n = be32(ib, 4, images);
  const std::size_t rows = be32(ib, 8, images);
  const std::size_t cols = be32(ib, 12, images);
  const std::size_t nl = be32(lb, 4, labels);
  if (n != nl)
    throw Error(ErrorKind::Integrity,
                "image count " + std::to_string(n) + " does not match label count " + std::to_string(nl));
  const std::size_t pixels = rows * cols;
  if (ib.size() < 16 + n * pixels) throw Error(ErrorKind::Integrity, images.string() + ": truncated pixel data");
  if (lb.size() < 8 + n) throw Error(ErrorKind::Integrity, labels.string() + ": truncated label data");

  Dataset d;
  d.shape = {1, static_cast<int>(rows), static_cast<int>(cols)};
  d.images.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(pixels));
  for (std::size_t i = 0; i < n * pixels; ++i) d.images.data()[i] = ib[16 + i] / 255.0;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = lb[8 + i];
  return d;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  const int s = spec.image_size;
  const double centre = (s - 1) / 2.0;
  const double corners[4][2] = {{0.25, 0.25}, {0.75, 0.25}, {0.25, 0.75}, {0.75, 0.75}};

  Dataset d;
  d.shape = {1, s, s};
  d.images.resize(static_cast<Eigen::Index>(spec.classes) * spec.per_class, s * s);
  d.labels.reserve(static_cast<std::size_t>(spec.classes * spec.per_class));

  Rng rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Eigen::Index row = 0;
  for (int c = 0; c < spec.classes; ++c) {
    const double angle = std::numbers::pi * (c % 8) / 8.0;
    const auto& corner = corners[(c / 8) % 4];
    const double width = 0.8 + 0.5 * (c / 32);
    const double bx = corner[0] * (s - 1);
    const double by = corner[1] * (s - 1);
    const double blob_sigma = std::max(1.0, s / 10.0);
    RowVec templ(s * s);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double dx = x - centre;
        const double dy = y - centre;
        const double across = -std::sin(angle) * dx + std::cos(angle) * dy;
        const double along = std::cos(angle) * dx + std::sin(angle) * dy;
        const double bar = std::abs(along) <= 0.4 * s ? std::exp(-across * across / (2 * width * width)) : 0.0;
        const double r2 = (x - bx) * (x - bx) + (y - by) * (y - by);
        const double blob = std::exp(-r2 / (2 * blob_sigma * blob_sigma));
        templ[y * s + x] = std::max(bar, blob);
      }
    }
    for (int i = 0; i < spec.per_class; ++i, ++row) {
      for (int p = 0; p < s * s; ++p)
        d.images(row, p) = std::clamp(templ[p] + spec.noise_sigma * noise(rng), 0.0, 1.0);
      d.labels.push_back(c);
    }
  }
  return d;
}

StreamKind parse_stream_kind(std::string_view name) {
  if (name == "ltp") return StreamKind::Ltp;
  if (name == "shuffle") return StreamKind::Shuffle;
  if (name == "noisy") return StreamKind::Noisy;
  if (name == "synthetic") return StreamKind::Synthetic;
  throw Error(ErrorKind::Config, "unknown stream kind '" + std::string(name) + "'");
}

std::string_view to_string(StreamKind kind) {
  switch (kind) {
    case StreamKind::Ltp: return "ltp";
    case StreamKind::Shuffle: return "shuffle";
    case StreamKind::Noisy: return "noisy";
    case StreamKind::Synthetic: return "synthetic";
  }
  return "?";
}

std::vector<int> Federation::classes_through(int step) const {
  std::set<int> seen;
  for (const auto& c : clients)
    for (int t = 0; t <= step && t < static_cast<int>(c.tasks.size()); ++t)
      seen.insert(c.tasks[static_cast<std::size_t>(t)].class_list.begin(),
                  c.tasks[static_cast<std::size_t>(t)].class_list.end());
  return {seen.begin(), seen.end()};
}

namespace {

using ClassLists = std::vector<std::vector<int>>;

/// Splits the first C*T entries of `classes` into T consecutive tasks.
ClassLists chunk(const std::vector<int>& classes, int tasks, int per_task) {
  ClassLists out(static_cast<std::size_t>(tasks));
  for (int t = 0; t < tasks; ++t)
    out[static_cast<std::size_t>(t)].assign(classes.begin() + t * per_task, classes.begin() + (t + 1) * per_task);
  return out;
}

void split_task(TaskSpec& task, double train_fraction) {
  for (const auto& ids : task.sample_ids) {
    const auto n = static_cast<int>(ids.size());
    int n_test = static_cast<int>(std::lround(n * (1.0 - train_fraction)));
    if (n >= 2) n_test = std::clamp(n_test, 1, n - 1);
    else n_test = 0;
    task.test_ids.insert(task.test_ids.end(), ids.begin(), ids.begin() + n_test);
    task.train_ids.insert(task.train_ids.end(), ids.begin() + n_test, ids.end());
  }
}

}  // namespace

Federation make_federation(const FederationSpec& spec, const Dataset& pool) {
  if (spec.clients < 1 || spec.tasks < 1 || spec.classes_per_task < 1)
    throw Error(ErrorKind::Config, "clients, tasks and classes_per_task must be positive");
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
    throw Error(ErrorKind::Config, "train_fraction must lie in (0, 1)");
  const StreamKind layout = spec.kind == StreamKind::Noisy ? spec.noisy_base : spec.kind;
  if (layout == StreamKind::Noisy) throw Error(ErrorKind::Config, "noisy streams need a clean base kind");
  if (spec.kind == StreamKind::Noisy && (spec.noisy_clients < 0 || spec.noisy_clients > spec.clients))
    throw Error(ErrorKind::Capacity, "noisy client count exceeds the number of clients");

  const std::vector<int> classes = pool.classes();
  const int needed = spec.tasks * spec.classes_per_task;
  if (static_cast<int>(classes.size()) < needed)
    throw Error(ErrorKind::Capacity, "pool has " + std::to_string(classes.size()) + " classes but " +
                                         std::to_string(needed) + " are needed per client");

  std::map<int, std::vector<int>> by_class;
  for (std::size_t i = 0; i < pool.labels.size(); ++i) by_class[pool.labels[i]].push_back(static_cast<int>(i));

  Rng rng(spec.seed);
  Federation fed;
  fed.spec = spec;
  fed.shape = pool.shape;
  fed.label_space = pool.label_space();

  // Class lists per client and step.
  std::vector<ClassLists> lists(static_cast<std::size_t>(spec.clients));
  if (layout == StreamKind::Ltp) {
    for (auto& l : lists) {
      std::vector<int> order = classes;
      std::shuffle(order.begin(), order.end(), rng);
      l = chunk(order, spec.tasks, spec.classes_per_task);
    }
  } else {
    std::vector<int> order = classes;
    std::shuffle(order.begin(), order.end(), rng);
    const ClassLists shared = chunk(order, spec.tasks, spec.classes_per_task);
    for (auto& l : lists) {
      l = shared;
      if (layout == StreamKind::Shuffle) std::shuffle(l.begin(), l.end(), rng);
    }
  }

  // Instances: IID streams partition each class across clients; the others
  // draw each client's instances independently from the pool.
  std::map<int, std::vector<int>> iid_order;
  if (layout == StreamKind::Synthetic) {
    for (const auto& [c, ids] : by_class) {
      iid_order[c] = ids;
      std::shuffle(iid_order[c].begin(), iid_order[c].end(), rng);
    }
  }

  for (int k = 0; k < spec.clients; ++k) {
    ClientStream cs;
    cs.client = k;
    for (int t = 0; t < spec.tasks; ++t) {
      TaskSpec task;
      task.client = k;
      task.step = t;
      task.class_list = lists[static_cast<std::size_t>(k)][static_cast<std::size_t>(t)];
      for (int c : task.class_list) {
        std::vector<int> ids;
        if (layout == StreamKind::Synthetic) {
          const auto& all = iid_order[c];
          const int share = std::min<int>(spec.per_class_cap, static_cast<int>(all.size()) / spec.clients);
          ids.assign(all.begin() + k * share, all.begin() + (k + 1) * share);
        } else {
          ids = by_class[c];
          std::shuffle(ids.begin(), ids.end(), rng);
          ids.resize(std::min<std::size_t>(ids.size(), static_cast<std::size_t>(spec.per_class_cap)));
        }
        task.sample_ids.push_back(std::move(ids));
      }
      split_task(task, spec.train_fraction);
      for (int id : task.train_ids) task.train_labels.push_back(pool.labels[static_cast<std::size_t>(id)]);
      cs.tasks.push_back(std::move(task));
    }
    fed.clients.push_back(std::move(cs));
  }

  if (spec.kind == StreamKind::Noisy) {
    std::vector<int> order(static_cast<std::size_t>(spec.clients));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::sort(order.begin(), order.begin() + spec.noisy_clients);
    for (int i = 0; i < spec.noisy_clients; ++i) {
      auto& cs = fed.clients[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      for (int t = 0; t < std::min(spec.noisy_steps, spec.tasks); ++t) {
        TaskSpec& task = cs.tasks[static_cast<std::size_t>(t)];
        task.noisy = true;
        std::uniform_int_distribution<std::size_t> pick(0, task.class_list.size() - 1);
        for (auto& y : task.train_labels) y = task.class_list[pick(rng)];
      }
    }
  }

  for (auto& cs : fed.clients) {
    for (const auto& task : cs.tasks) {
      TaskData data;
      data.train_x.resize(static_cast<Eigen::Index>(task.train_ids.size()), pool.images.cols());
      for (std::size_t i = 0; i < task.train_ids.size(); ++i)
        data.train_x.row(static_cast<Eigen::Index>(i)) = pool.images.row(task.train_ids[i]);
      data.train_y = task.train_labels;
      data.test_x.resize(static_cast<Eigen::Index>(task.test_ids.size()), pool.images.cols());
      for (std::size_t i = 0; i < task.test_ids.size(); ++i) {
        data.test_x.row(static_cast<Eigen::Index>(i)) = pool.images.row(task.test_ids[i]);
        data.test_y.push_back(pool.labels[static_cast<std::size_t>(task.test_ids[i])]);
      }
      cs.data.push_back(std::move(data));
    }
  }
  return fed;
}

std::string federation_manifest(const Federation& federation) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& cs : federation.clients) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& t : cs.tasks) {
      nlohmann::json classes = nlohmann::json::array();
      for (std::size_t i = 0; i < t.class_list.size(); ++i)
        classes.push_back({{"class", t.class_list[i]}, {"sample_ids", t.sample_ids[i]}});
      steps.push_back({{"step", t.step},
                       {"noisy", t.noisy},
                       {"classes", classes},
                       {"train_ids", t.train_ids},
                       {"test_ids", t.test_ids}});
    }
    clients.push_back({{"client", cs.client}, {"steps", steps}});
  }
  const auto& s = federation.spec;
  nlohmann::json root = {{"kind", to_string(s.kind)},
                         {"clients", s.clients},
                         {"tasks", s.tasks},
                         {"classes_per_task", s.classes_per_task},
                         {"noisy_clients", s.noisy_clients},
                         {"seed", s.seed},
                         {"federation", clients}};
  return root.dump(1);
}

}  // namespace affcl::streams
