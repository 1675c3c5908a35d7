#include "affcl/runner.hpp"

#include "affcl/error.hpp"
#include "affcl/federation.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace affcl::runner {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

fs::path resolve_data_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* root = std::getenv("AFCL_DATA_ROOT"); root && *root) return fs::path(root) / path;
  }
  return path;
}

json matrix_to_json(const metrics::AccuracyMatrix& m) {
  json acc = json::array();
  json counts = json::array();
  for (std::size_t k = 0; k < m.clients(); ++k) {
    json rows = json::array();
    for (std::size_t t = 0; t < m.steps(); ++t) {
      json row = json::array();
      for (std::size_t i = 0; i < m.steps(); ++i) row.push_back(opt(m.at(k, t, i)));
      rows.push_back(row);
    }
    acc.push_back(rows);
    json c = json::array();
    for (std::size_t i = 0; i < m.steps(); ++i) c.push_back(m.count(k, i));
    counts.push_back(c);
  }
  return {{"clients", m.clients()}, {"steps", m.steps()}, {"accuracy", acc}, {"counts", counts}};
}

metrics::AccuracyMatrix matrix_from_json(const json& j) {
  metrics::AccuracyMatrix m(j.at("clients").get<std::size_t>(), j.at("steps").get<std::size_t>());
  for (std::size_t k = 0; k < m.clients(); ++k) {
    for (std::size_t i = 0; i < m.steps(); ++i) m.set_count(k, i, j.at("counts")[k][i].get<std::size_t>());
    for (std::size_t t = 0; t < m.steps(); ++t)
      for (std::size_t i = 0; i <= t; ++i) {
        const json& v = j.at("accuracy")[k][t][i];
        if (!v.is_null()) m.set(k, t, i, v.get<double>());
      }
  }
  return m;
}

std::string family_hash(ExperimentConfig config) {
  config.method = replay::Method::AfFcl;
  config.federation.noisy_clients = 0;
  return config_hash(config);
}

json log_to_json(const federation::ClientReport& c) {
  const auto& l = c.log;
  return {{"client", c.client},
          {"samples", c.samples},
          {"nf_local", l.nf_local},
          {"nf_replay", l.nf_replay},
          {"ce_raw", l.ce_raw},
          {"ce_generated", l.ce_generated},
          {"kd", l.kd},
          {"prox", l.prox},
          {"weight_count", l.weight_count},
          {"weight_mean", l.weight_mean},
          {"weight_min", l.weight_min},
          {"weight_max", l.weight_max}};
}

/// Keeps only event lines whose task is <= `last_task` (all lines dropped when negative).
void truncate_events(const fs::path& path, int last_task) {
  std::string kept;
  if (last_task >= 0 && fs::exists(path)) {
    std::istringstream in(read_text(path));
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      if (json::parse(line).at("task").get<int>() <= last_task) kept += line + "\n";
    }
  }
  write_text(path, kept);
}

struct ResumePoint {
  int task = -1;
  federation::GlobalState state;
  metrics::AccuracyMatrix matrix;
};

std::optional<ResumePoint> find_resume_point(const fs::path& seed_dir, const std::string& hash, int tasks) {
  for (int t = tasks - 1; t >= 0; --t) {
    const fs::path dir = seed_dir / ("task_" + std::to_string(t));
    if (!fs::exists(dir / "resume.json") || !fs::exists(dir / "state.bin")) continue;
    const json j = json::parse(read_text(dir / "resume.json"));
    if (j.at("config_hash").get<std::string>() != hash) continue;
    ResumePoint rp;
    rp.task = t;
    std::ifstream in(dir / "state.bin", std::ios::binary);
    rp.state.classifier = read_exact(in);
    rp.state.flow = read_exact(in);
    rp.state.seen_classes = j.at("seen_classes").get<std::vector<int>>();
    rp.state.previous_classes = j.at("previous_classes").get<std::vector<int>>();
    rp.matrix = matrix_from_json(j.at("matrix"));
    return rp;
  }
  return std::nullopt;
}

void save_task_state(const fs::path& dir, const std::string& hash, int task, const federation::GlobalState& state,
                     const metrics::AccuracyMatrix& matrix) {
  fs::create_directories(dir);
  write_checkpoint(dir / "classifier.ckpt", state.classifier);
  write_checkpoint(dir / "flow.ckpt", state.flow);
  {
    std::ofstream out(dir / "state.bin", std::ios::binary | std::ios::trunc);
    write_exact(out, state.classifier);
    write_exact(out, state.flow);
    if (!out) throw Error(ErrorKind::Io, "cannot write resume state in " + dir.string());
  }
  // Written last: its presence marks the step as complete.
  const json j = {{"config_hash", hash},
                  {"task", task},
                  {"seen_classes", state.seen_classes},
                  {"previous_classes", state.previous_classes},
                  {"matrix", matrix_to_json(matrix)}};
  write_text(dir / "resume.json", j.dump(1) + "\n");
}

std::vector<std::size_t> clean_tasks(const ExperimentConfig& config, std::size_t steps) {
  std::vector<std::size_t> idx;
  for (std::size_t i = static_cast<std::size_t>(std::max(config.federation.noisy_steps, 0)); i < steps; ++i)
    idx.push_back(i);
  return idx;
}

SeedResult score(const ExperimentConfig& config, std::uint64_t seed, const metrics::AccuracyMatrix& m) {
  SeedResult r;
  r.seed = seed;
  r.matrix = m;
  r.accuracy = metrics::average_accuracy(m);
  if (m.steps() >= 2) r.forgetting = metrics::average_forgetting(m, config.run.clamp_forgetting);
  if (config.federation.kind == streams::StreamKind::Noisy) {
    const auto idx = clean_tasks(config, m.steps());
    if (!idx.empty()) r.clean_accuracy = metrics::evaluate_clean_subset(m, idx);
  }
  for (std::size_t t = 1; t <= m.steps(); ++t) r.task_curve.push_back(metrics::average_accuracy(m.truncated(t)));
  return r;
}

}  // namespace

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd out;
  if (values.empty()) return out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

streams::Dataset build_pool(const DataConfig& data) {
  if (data.source == "synthetic") return streams::make_synthetic(data.synthetic);
  if (data.source == "idx") return streams::load_idx(resolve_data_path(data.images), resolve_data_path(data.labels));
  throw Error(ErrorKind::Config, "unknown data source '" + data.source + "'");
}

Models build_models(const ExperimentConfig& config, const streams::Federation& federation, std::uint64_t seed) {
  classifier::ClassifierConfig cc;
  cc.input = federation.shape;
  cc.conv_channels = config.model.conv_channels;
  cc.feature_dim = config.model.feature_dim;
  cc.mid_dim = config.model.mid_dim;
  cc.mid_layers = config.model.mid_layers;
  cc.num_classes = federation.label_space;
  flow::FlowConfig fc;
  fc.dim = config.model.feature_dim;
  fc.num_classes = federation.label_space;
  fc.layers = config.model.flow_layers;
  fc.hidden = config.model.flow_hidden;
  fc.embed_dim = config.model.embed_dim;
  fc.res_blocks = config.model.res_blocks;
  fc.clamp = config.model.clamp;
  return {classifier::SplitClassifier(cc, derive_seed(seed, {101})), flow::FlowModel(fc, derive_seed(seed, {102}))};
}

Summary run(const ExperimentConfig& config, const RunOptions& options) {
  validate(config);
  const std::string hash = config_hash(config);
  const std::string method = std::string(replay::to_string(config.method));
  const fs::path method_dir = fs::path(config.run.out_dir) / method;
  auto say = [&](const std::string& msg) {
    if (options.progress) options.progress(msg);
  };

  Summary summary;
  summary.method = config.method;
  summary.config_hash = hash;
  summary.family_hash = family_hash(config);
  summary.noisy_clients = config.federation.kind == streams::StreamKind::Noisy ? config.federation.noisy_clients : 0;

  const streams::Dataset pool = build_pool(config.data);
  const int tasks = config.federation.tasks;
  const int last = options.stop_after_task >= 0 ? std::min(options.stop_after_task, tasks - 1) : tasks - 1;

  for (const std::uint64_t seed : config.run.seeds) {
    const fs::path seed_dir = method_dir / ("seed_" + std::to_string(seed));
    fs::create_directories(seed_dir);

    streams::FederationSpec fspec = config.federation;
    fspec.seed = seed;
    const streams::Federation fed = streams::make_federation(fspec, pool);
    json manifest = {{"config_hash", hash}, {"federation", json::parse(streams::federation_manifest(fed))}};
    write_text(seed_dir / "manifest.json", manifest.dump(1) + "\n");

    Models models = build_models(config, fed, seed);
    federation::FederationConfig fc;
    fc.method = config.method;
    fc.local = {.iterations = config.optimizer.local_iters,
                .batch = config.optimizer.batch,
                .replay_batch = config.optimizer.replay_batch,
                .stats_refit_every = config.optimizer.stats_refit_every,
                .lr = config.optimizer.lr,
                .prox_mu = config.optimizer.prox_mu};
    fc.rounds_per_task = config.optimizer.rounds_per_task;
    fc.participation = config.optimizer.participation;
    fc.seed = derive_seed(seed, {103});
    const federation::Simulator sim(fed, std::move(models.classifier), std::move(models.flow), fc);

    federation::GlobalState state = sim.initial_state();
    metrics::AccuracyMatrix matrix(fed.clients.size(), static_cast<std::size_t>(tasks));
    for (std::size_t k = 0; k < fed.clients.size(); ++k)
      for (std::size_t i = 0; i < static_cast<std::size_t>(tasks); ++i)
        matrix.set_count(k, i, fed.clients[k].data[i].test_y.size());

    int first = 0;
    std::optional<ResumePoint> rp;
    if (options.resume) rp = find_resume_point(seed_dir, hash, tasks);
    if (rp) {
      state = std::move(rp->state);
      matrix = std::move(rp->matrix);
      first = rp->task + 1;
      say("seed " + std::to_string(seed) + ": resuming after task " + std::to_string(rp->task));
    }
    truncate_events(seed_dir / "events.jsonl", first - 1);
    std::ofstream events(seed_dir / "events.jsonl", std::ios::app);

    for (int t = first; t <= last; ++t) {
      const fs::path task_dir = seed_dir / ("task_" + std::to_string(t));
      const auto observer = [&](const federation::RoundRecord& rec) {
        json clients = json::array();
        for (const auto& c : rec.clients) clients.push_back(log_to_json(c));
        const json ev = {{"event", "round"},
                         {"config_hash", hash},
                         {"task", rec.task},
                         {"round", rec.round},
                         {"classifier_norm", rec.classifier_norm},
                         {"flow_norm", rec.flow_norm},
                         {"wall_seconds", rec.wall_seconds},
                         {"clients", clients}};
        events << ev.dump() << "\n" << std::flush;
        if (config.run.checkpoint_rounds) {
          // The round observer fires after aggregation, so state holds the new globals.
          const fs::path rd = task_dir / ("round_" + std::to_string(rec.round));
          fs::create_directories(rd);
          write_checkpoint(rd / "classifier.ckpt", state.classifier);
          write_checkpoint(rd / "flow.ckpt", state.flow);
        }
        say("seed " + std::to_string(seed) + " task " + std::to_string(rec.task) + " round " +
            std::to_string(rec.round) + " (" + num(rec.wall_seconds) + " s)");
      };
      const auto acc = sim.run_task_step(t, state, observer);
      json rows = json::array();
      for (std::size_t k = 0; k < acc.size(); ++k) {
        for (std::size_t i = 0; i < acc[k].size(); ++i) matrix.set(k, static_cast<std::size_t>(t), i, acc[k][i]);
        rows.push_back(acc[k]);
      }
      const double avg = metrics::average_accuracy(matrix.truncated(static_cast<std::size_t>(t) + 1));
      events << json{{"event", "task_end"}, {"config_hash", hash}, {"task", t}, {"accuracy", rows},
                     {"average_accuracy", avg}}
                    .dump()
             << "\n"
             << std::flush;
      save_task_state(task_dir, hash, t, state, matrix);
      say("seed " + std::to_string(seed) + " task " + std::to_string(t) + " average accuracy " + num(avg));
    }

    if (last < tasks - 1) {
      summary.complete = false;
      continue;
    }
    write_text(seed_dir / "accuracy.json",
               json{{"config_hash", hash}, {"seed", seed}, {"matrix", matrix_to_json(matrix)}}.dump(1) + "\n");
    summary.seeds.push_back(score(config, seed, matrix));
  }

  if (summary.complete) {
    write_text(method_dir / "summary.json", summary_json(summary));
    write_text(method_dir / "summary.csv", summary_csv(summary));
  }
  return summary;
}

std::string summary_csv(const Summary& s) {
  const std::string method(replay::to_string(s.method));
  std::string out = "method,seed,accuracy,forgetting,clean_accuracy,config_hash\n";
  std::vector<double> acc, fgt, clean;
  for (const auto& r : s.seeds) {
    out += method + "," + std::to_string(r.seed) + "," + num(r.accuracy) + "," + num(r.forgetting) + "," +
           num(r.clean_accuracy) + "," + s.config_hash + "\n";
    acc.push_back(r.accuracy);
    if (r.forgetting) fgt.push_back(*r.forgetting);
    if (r.clean_accuracy) clean.push_back(*r.clean_accuracy);
  }
  const bool has_f = !fgt.empty() && fgt.size() == s.seeds.size();
  const bool has_c = !clean.empty() && clean.size() == s.seeds.size();
  const MeanStd a = mean_std(acc), f = mean_std(fgt), c = mean_std(clean);
  out += method + ",mean," + num(a.mean) + "," + (has_f ? num(f.mean) : "") + "," + (has_c ? num(c.mean) : "") +
         "," + s.config_hash + "\n";
  out += method + ",std," + num(a.std) + "," + (has_f ? num(f.std) : "") + "," + (has_c ? num(c.std) : "") + "," +
         s.config_hash + "\n";
  return out;
}

std::string summary_json(const Summary& s) {
  json seeds = json::array();
  std::vector<double> acc, fgt, clean;
  for (const auto& r : s.seeds) {
    seeds.push_back({{"seed", r.seed},
                     {"accuracy", r.accuracy},
                     {"forgetting", opt(r.forgetting)},
                     {"clean_accuracy", opt(r.clean_accuracy)},
                     {"task_curve", r.task_curve}});
    acc.push_back(r.accuracy);
    if (r.forgetting) fgt.push_back(*r.forgetting);
    if (r.clean_accuracy) clean.push_back(*r.clean_accuracy);
  }
  auto stat = [&](const std::vector<double>& v) -> json {
    if (v.empty() || v.size() != s.seeds.size()) return nullptr;
    const MeanStd m = mean_std(v);
    return {{"mean", m.mean}, {"std", m.std}};
  };
  const json j = {{"method", std::string(replay::to_string(s.method))},
                  {"config_hash", s.config_hash},
                  {"family_hash", s.family_hash},
                  {"noisy_clients", s.noisy_clients},
                  {"seeds", seeds},
                  {"accuracy", stat(acc)},
                  {"forgetting", stat(fgt)},
                  {"clean_accuracy", stat(clean)}};
  return j.dump(1) + "\n";
}

std::vector<SweepCell> sweep_noisy(const ExperimentConfig& config, const std::vector<int>& noisy_values,
                                   const RunOptions& options) {
  validate(config);
  if (config.federation.kind != streams::StreamKind::Noisy)
    throw Error(ErrorKind::Config, "sweep-noisy needs federation.kind = noisy");
  if (noisy_values.empty()) throw Error(ErrorKind::Config, "sweep needs at least one noisy-client count");
  for (int m : noisy_values)
    if (m < 0 || m > config.federation.clients)
      throw Error(ErrorKind::Config, "noisy-client count " + std::to_string(m) + " is out of range");

  std::vector<SweepCell> cells;
  for (const replay::Method method : config.sweep.methods) {
    for (const int m : noisy_values) {
      ExperimentConfig c = config;
      c.method = method;
      c.federation.noisy_clients = m;
      c.run.out_dir = (fs::path(config.run.out_dir) / ("M_" + std::to_string(m))).string();
      const Summary s = run(c, options);
      if (!s.complete) return cells;
      SweepCell cell;
      cell.method = method;
      cell.noisy_clients = m;
      for (const auto& r : s.seeds) cell.per_seed.push_back(r.clean_accuracy.value_or(r.accuracy));
      cell.clean_accuracy = mean_std(cell.per_seed);
      cells.push_back(std::move(cell));
    }
  }

  std::string table = "method,noisy_clients,clean_accuracy_mean,clean_accuracy_std,seeds\n";
  std::string series = "method,x,y,y_err\n";
  for (const auto& c : cells) {
    const std::string name(replay::to_string(c.method));
    table += name + "," + std::to_string(c.noisy_clients) + "," + num(c.clean_accuracy.mean) + "," +
             num(c.clean_accuracy.std) + "," + std::to_string(c.per_seed.size()) + "\n";
    series += name + "," + std::to_string(c.noisy_clients) + "," + num(c.clean_accuracy.mean) + "," +
              num(c.clean_accuracy.std) + "\n";
  }
  write_text(fs::path(config.run.out_dir) / "sweep_table.csv", table);
  write_text(fs::path(config.run.out_dir) / "sweep_series.csv", series);
  return cells;
}

std::vector<fs::path> emit_plot_data(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::Inventory, "no run directory at " + dir.string());
  std::vector<fs::path> found;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "summary.json") found.push_back(e.path());
  if (found.empty()) throw Error(ErrorKind::Inventory, "no completed runs under " + dir.string());
  std::sort(found.begin(), found.end());

  struct Group {
    std::string method;
    int noisy = 0;
    std::vector<double> y;
    std::vector<std::vector<double>> curves;
  };
  std::map<std::pair<std::string, int>, Group> groups;
  std::string family;
  for (const fs::path& p : found) {
    const json s = json::parse(read_text(p));
    const std::string hash = s.at("config_hash").get<std::string>();
    const std::string fam = s.at("family_hash").get<std::string>();
    if (family.empty()) family = fam;
    if (fam != family) throw Error(ErrorKind::Inventory, p.string() + " comes from an incompatible config");
    Group g;
    g.method = s.at("method").get<std::string>();
    g.noisy = s.at("noisy_clients").get<int>();
    for (const json& r : s.at("seeds")) {
      const fs::path raw = p.parent_path() / ("seed_" + std::to_string(r.at("seed").get<std::uint64_t>())) /
                           "accuracy.json";
      if (!fs::exists(raw)) throw Error(ErrorKind::Inventory, "missing run record " + raw.string());
      if (json::parse(read_text(raw)).at("config_hash").get<std::string>() != hash)
        throw Error(ErrorKind::Inventory, raw.string() + " does not match its summary's config hash");
      const json& clean = r.at("clean_accuracy");
      g.y.push_back(clean.is_null() ? r.at("accuracy").get<double>() : clean.get<double>());
      g.curves.push_back(r.at("task_curve").get<std::vector<double>>());
    }
    const auto key = std::make_pair(g.method, g.noisy);
    if (groups.count(key)) throw Error(ErrorKind::Inventory, "duplicate runs for " + g.method);
    groups.emplace(key, std::move(g));
  }

  std::vector<fs::path> written;
  std::map<std::string, int> per_method;
  for (const auto& [key, g] : groups) ++per_method[key.first];

  std::string acc = "method,x,y,y_err\n";
  for (const auto& [key, g] : groups) {
    const MeanStd m = mean_std(g.y);
    acc += g.method + "," + std::to_string(g.noisy) + "," + num(m.mean) + "," + num(m.std) + "\n";

    std::string curve = "method,x,y,y_err\n";
    const std::size_t steps = g.curves.front().size();
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<double> ys;
      for (const auto& c : g.curves) ys.push_back(c.at(t));
      const MeanStd cm = mean_std(ys);
      curve += g.method + "," + std::to_string(t + 1) + "," + num(cm.mean) + "," + num(cm.std) + "\n";
    }
    std::string name = "task_curve_" + g.method;
    if (per_method[g.method] > 1) name += "_M" + std::to_string(g.noisy);
    written.push_back(dir / (name + ".csv"));
    write_text(written.back(), curve);
  }
  written.insert(written.begin(), dir / "acc_vs_noisy.csv");
  write_text(written.front(), acc);
  return written;
}

}  // namespace affcl::runner
