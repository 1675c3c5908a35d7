#include "affcl/config.hpp"
#include "affcl/error.hpp"
#include "affcl/runner.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

namespace {

constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string method;
  bool quiet = false;
};

affcl::runner::ExperimentConfig load(const Overrides& o) {
  auto c = o.config.empty() ? affcl::runner::ExperimentConfig{} : affcl::runner::load_config(o.config);
  if (o.seed) c.run.seeds = {*o.seed};
  if (!o.out.empty()) c.run.out_dir = o.out;
  if (!o.method.empty()) c.method = affcl::replay::parse_method(o.method);
  affcl::runner::validate(c);
  return c;
}

affcl::runner::RunOptions options(const Overrides& o) {
  affcl::runner::RunOptions opts;
  if (!o.quiet) opts.progress = [](const std::string& msg) { std::fprintf(stderr, "%s\n", msg.c_str()); };
  return opts;
}

void print_summary(const affcl::runner::Summary& s) { std::cout << affcl::runner::summary_csv(s); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated continual learning with accurate forgetting"};
  app.require_subcommand(1);
  Overrides o;
  auto add_common = [&](CLI::App* sub, bool with_method) {
    sub->add_option("--config", o.config, "INI config file");
    sub->add_option("--seed", o.seed, "Run a single seed instead of the configured list");
    sub->add_option("--out", o.out, "Output directory");
    if (with_method) sub->add_option("--method", o.method, "af_fcl, fedavg, fedprox, af_wo_gr, af_wo_kd or af_wo_af");
    sub->add_flag("-q,--quiet", o.quiet, "Suppress progress output");
  };

  auto* run = app.add_subcommand("run", "Train and evaluate every configured seed");
  add_common(run, true);
  auto* sweep = app.add_subcommand("sweep-noisy", "Run the sweep methods over the noisy-client counts");
  add_common(sweep, false);
  std::vector<int> noisy;
  sweep->add_option("--noisy", noisy, "Noisy-client counts (default: sweep.noisy_values)")->delimiter(',');
  auto* plots = app.add_subcommand("emit-plots", "Write plot-ready series from completed runs");
  std::string plot_dir;
  plots->add_option("dir", plot_dir, "Directory holding run outputs")->required();
  auto* check = app.add_subcommand("validate-config", "Parse and validate a config, print its hash");
  add_common(check, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kConfigError;
  }

  try {
    if (*run) {
      print_summary(affcl::runner::run(load(o), options(o)));
    } else if (*sweep) {
      const auto c = load(o);
      const auto cells = affcl::runner::sweep_noisy(c, noisy.empty() ? c.sweep.noisy_values : noisy, options(o));
      std::cout << "method,noisy_clients,clean_accuracy_mean,clean_accuracy_std\n";
      for (const auto& cell : cells)
        std::cout << affcl::replay::to_string(cell.method) << "," << cell.noisy_clients << ","
                  << cell.clean_accuracy.mean << "," << cell.clean_accuracy.std << "\n";
    } else if (*plots) {
      for (const auto& p : affcl::runner::emit_plot_data(plot_dir)) std::cout << p.string() << "\n";
    } else if (*check) {
      const auto c = load(o);
      std::cout << "config_hash " << affcl::runner::config_hash(c) << "\n" << affcl::runner::canonical_config(c);
    }
  } catch (const affcl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == affcl::ErrorKind::Config ? kConfigError : kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
