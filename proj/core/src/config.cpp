#include "affcl/config.hpp"

#include "affcl/error.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <openssl/evp.h>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace affcl::runner {

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw Error(ErrorKind::Config, key + " = '" + value + "' is not " + expected);
}

int to_int(const std::string& key, const std::string& text) {
  const std::string v = boost::trim_copy(text);
  int out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, text, "an integer");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& text) {
  const std::string v = boost::trim_copy(text);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, text, "an unsigned integer");
  return out;
}

double to_double(const std::string& key, const std::string& text) {
  const std::string v = boost::trim_copy(text);
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) bad_value(key, text, "a number");
  return out;
}

bool to_bool(const std::string& key, const std::string& text) {
  const std::string v = boost::to_lower_copy(boost::trim_copy(text));
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, text, "a boolean");
}

std::vector<std::string> to_list(const std::string& text) {
  std::vector<std::string> parts;
  const std::string v = boost::trim_copy(text);
  if (v.empty()) return parts;
  boost::split(parts, v, boost::is_any_of(","));
  for (auto& p : parts) boost::trim(p);
  return parts;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + f(items[i]);
  return out;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
  bool affects_results = true;
};

#define AFCL_INT(KEY, MEMBER)                                                                   \
  {KEY, Field{[](ExperimentConfig& c, const std::string& v) { c.MEMBER = to_int(KEY, v); }, \
              [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); }}}
#define AFCL_DOUBLE(KEY, MEMBER)                                                                   \
  {KEY, Field{[](ExperimentConfig& c, const std::string& v) { c.MEMBER = to_double(KEY, v); }, \
              [](const ExperimentConfig& c) { return fmt_double(c.MEMBER); }}}
#define AFCL_BOOL(KEY, MEMBER)                                                                   \
  {KEY, Field{[](ExperimentConfig& c, const std::string& v) { c.MEMBER = to_bool(KEY, v); }, \
              [](const ExperimentConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }}}
#define AFCL_STRING(KEY, MEMBER)                                                                       \
  {KEY, Field{[](ExperimentConfig& c, const std::string& v) { c.MEMBER = boost::trim_copy(v); }, \
              [](const ExperimentConfig& c) { return c.MEMBER; }}}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t{
        AFCL_INT("federation.clients", federation.clients),
        AFCL_INT("federation.tasks", federation.tasks),
        AFCL_INT("federation.classes_per_task", federation.classes_per_task),
        AFCL_INT("federation.noisy_clients", federation.noisy_clients),
        AFCL_INT("federation.noisy_steps", federation.noisy_steps),
        AFCL_INT("federation.per_class_cap", federation.per_class_cap),
        AFCL_DOUBLE("federation.train_fraction", federation.train_fraction),
        AFCL_STRING("data.source", data.source),
        AFCL_STRING("data.images", data.images),
        AFCL_STRING("data.labels", data.labels),
        AFCL_INT("data.synthetic_classes", data.synthetic.classes),
        AFCL_INT("data.synthetic_per_class", data.synthetic.per_class),
        AFCL_INT("data.image_size", data.synthetic.image_size),
        AFCL_DOUBLE("data.noise_sigma", data.synthetic.noise_sigma),
        AFCL_INT("model.feature_dim", model.feature_dim),
        AFCL_INT("model.mid_dim", model.mid_dim),
        AFCL_INT("model.mid_layers", model.mid_layers),
        AFCL_INT("model.flow_layers", model.flow_layers),
        AFCL_INT("model.flow_hidden", model.flow_hidden),
        AFCL_INT("model.embed_dim", model.embed_dim),
        AFCL_INT("model.res_blocks", model.res_blocks),
        AFCL_DOUBLE("model.clamp", model.clamp),
        AFCL_DOUBLE("optimizer.lr", optimizer.lr),
        AFCL_INT("optimizer.batch", optimizer.batch),
        AFCL_INT("optimizer.replay_batch", optimizer.replay_batch),
        AFCL_INT("optimizer.local_iters", optimizer.local_iters),
        AFCL_INT("optimizer.rounds_per_task", optimizer.rounds_per_task),
        AFCL_DOUBLE("optimizer.prox_mu", optimizer.prox_mu),
        AFCL_INT("optimizer.stats_refit_every", optimizer.stats_refit_every),
        AFCL_DOUBLE("optimizer.participation", optimizer.participation),
        AFCL_BOOL("run.checkpoint_rounds", run.checkpoint_rounds),
        AFCL_BOOL("run.clamp_forgetting", run.clamp_forgetting),
    };
    t["federation.kind"] = {
        [](ExperimentConfig& c, const std::string& v) { c.federation.kind = streams::parse_stream_kind(boost::trim_copy(v)); },
        [](const ExperimentConfig& c) { return std::string(streams::to_string(c.federation.kind)); }};
    t["federation.noisy_base"] = {
        [](ExperimentConfig& c, const std::string& v) {
          c.federation.noisy_base = streams::parse_stream_kind(boost::trim_copy(v));
        },
        [](const ExperimentConfig& c) { return std::string(streams::to_string(c.federation.noisy_base)); }};
    t["data.synthetic_seed"] = {
        [](ExperimentConfig& c, const std::string& v) { c.data.synthetic.seed = to_u64("data.synthetic_seed", v); },
        [](const ExperimentConfig& c) { return std::to_string(c.data.synthetic.seed); }};
    t["method.name"] = {
        [](ExperimentConfig& c, const std::string& v) { c.method = replay::parse_method(boost::trim_copy(v)); },
        [](const ExperimentConfig& c) { return std::string(replay::to_string(c.method)); }};
    t["model.conv_channels"] = {
        [](ExperimentConfig& c, const std::string& v) {
          c.model.conv_channels.clear();
          for (const auto& p : to_list(v)) c.model.conv_channels.push_back(to_int("model.conv_channels", p));
        },
        [](const ExperimentConfig& c) { return join(c.model.conv_channels, [](int v) { return std::to_string(v); }); }};
    t["run.seeds"] = {
        [](ExperimentConfig& c, const std::string& v) {
          c.run.seeds.clear();
          for (const auto& p : to_list(v)) c.run.seeds.push_back(to_u64("run.seeds", p));
        },
        [](const ExperimentConfig& c) { return join(c.run.seeds, [](std::uint64_t v) { return std::to_string(v); }); }};
    t["run.out_dir"] = {[](ExperimentConfig& c, const std::string& v) { c.run.out_dir = boost::trim_copy(v); },
                        [](const ExperimentConfig& c) { return c.run.out_dir; }, false};
    t["sweep.noisy_values"] = {
        [](ExperimentConfig& c, const std::string& v) {
          c.sweep.noisy_values.clear();
          for (const auto& p : to_list(v)) c.sweep.noisy_values.push_back(to_int("sweep.noisy_values", p));
        },
        [](const ExperimentConfig& c) { return join(c.sweep.noisy_values, [](int v) { return std::to_string(v); }); }};
    t["sweep.methods"] = {
        [](ExperimentConfig& c, const std::string& v) {
          c.sweep.methods.clear();
          for (const auto& p : to_list(v)) c.sweep.methods.push_back(replay::parse_method(p));
        },
        [](const ExperimentConfig& c) {
          return join(c.sweep.methods, [](replay::Method m) { return std::string(replay::to_string(m)); });
        }};
    return t;
  }();
  return table;
}

#undef AFCL_INT
#undef AFCL_DOUBLE
#undef AFCL_BOOL
#undef AFCL_STRING

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error(ErrorKind::Config, std::string("malformed config: ") + e.what());
  }
  ExperimentConfig config;
  const auto& table = fields();
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw Error(ErrorKind::Config, "key '" + section + "' appears outside any section");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const auto it = table.find(full);
      if (it == table.end()) throw Error(ErrorKind::Config, "unknown config key '" + full + "'");
      it->second.set(config, value.data());
    }
  }
  validate(config);
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Config, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string canonical_config(const ExperimentConfig& config) {
  std::string out = std::string("version=") + kCodeVersion + "\n";
  for (const auto& [key, field] : fields())
    if (field.affects_results) out += key + "=" + field.get(config) + "\n";
  return out;
}

std::string config_hash(const ExperimentConfig& config) {
  const std::string text = canonical_config(config);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorKind::Io, "SHA-256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < 8; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

void validate(const ExperimentConfig& c) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorKind::Config, what);
  };
  const auto& f = c.federation;
  require(f.clients >= 1, "federation.clients must be >= 1");
  require(f.tasks >= 1, "federation.tasks must be >= 1");
  require(f.classes_per_task >= 1, "federation.classes_per_task must be >= 1");
  require(f.noisy_clients >= 0 && f.noisy_clients <= f.clients, "federation.noisy_clients must lie in [0, clients]");
  require(f.noisy_steps >= 0, "federation.noisy_steps must be >= 0");
  require(f.noisy_base != streams::StreamKind::Noisy, "federation.noisy_base must be a clean kind");
  require(f.per_class_cap >= 2, "federation.per_class_cap must be >= 2");
  require(f.train_fraction > 0.0 && f.train_fraction < 1.0, "federation.train_fraction must lie in (0, 1)");
  require(c.data.source == "synthetic" || c.data.source == "idx", "data.source must be 'synthetic' or 'idx'");
  if (c.data.source == "idx") require(!c.data.images.empty() && !c.data.labels.empty(), "idx source needs images and labels");
  require(c.data.synthetic.classes >= 1 && c.data.synthetic.per_class >= 1, "synthetic pool must be nonempty");
  require(c.data.synthetic.image_size >= 4, "data.image_size must be >= 4");
  require(c.data.synthetic.noise_sigma >= 0.0, "data.noise_sigma must be >= 0");
  const auto& m = c.model;
  require(!m.conv_channels.empty(), "model.conv_channels must list at least one layer");
  for (int ch : m.conv_channels) require(ch >= 1, "model.conv_channels entries must be positive");
  require(m.feature_dim >= 1 && m.mid_dim >= 1 && m.mid_layers >= 0, "model dimensions must be positive");
  require(m.flow_layers >= 0 && m.flow_hidden >= 1 && m.embed_dim >= 1 && m.res_blocks >= 0,
          "flow dimensions must be positive");
  require(m.clamp > 0.0, "model.clamp must be > 0");
  const auto& o = c.optimizer;
  require(o.lr > 0.0, "optimizer.lr must be > 0");
  require(o.batch >= 1 && o.replay_batch >= 1, "batch sizes must be >= 1");
  require(o.local_iters >= 1 && o.rounds_per_task >= 1, "local_iters and rounds_per_task must be >= 1");
  require(o.prox_mu >= 0.0, "optimizer.prox_mu must be >= 0");
  require(o.stats_refit_every >= 1, "optimizer.stats_refit_every must be >= 1");
  require(o.participation > 0.0 && o.participation <= 1.0, "optimizer.participation must lie in (0, 1]");
  require(!c.run.seeds.empty(), "run.seeds must list at least one seed");
  require(!c.run.out_dir.empty(), "run.out_dir must be set");
  require(!c.sweep.methods.empty(), "sweep.methods must be nonempty");
}

}  // namespace affcl::runner
