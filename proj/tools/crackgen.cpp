// Command-line entry point: one subcommand per pipeline stage plus run-all.
//
//   crackgen <subcommand> --config <path> [--seed N] [--out DIR]
//
// Exit codes: 0 ok, 2 configuration, 3 missing prerequisite, 4 numeric
// failure, 1 anything else.

#include "crackgen/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <sstream>

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kPrereq = 3, kNumeric = 4 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

crackgen::RunConfig resolve(const Options& o) {
  auto cfg = crackgen::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty())
    cfg.out_dir = o.out;
  else if (const char* env = std::getenv("CRACKGEN_OUT"); env && *env)
    cfg.out_dir = env;
  cfg.check();
  return cfg;
}

int guarded(const std::function<void()>& body) {
  try {
    body();
    return kOk;
  } catch (const crackgen::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const crackgen::PrereqError& e) {
    std::cerr << "prerequisite error: " << e.what() << "\n";
    return kPrereq;
  } catch (const crackgen::NumericError& e) {
    std::cerr << "numeric error";
    if (e.step() >= 0) std::cerr << " at step " << e.step();
    std::cerr << ": " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-annotated crack image synthesis pipeline"};
  app.require_subcommand(1);
  Options opt;
  int status = kOk;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "key = value configuration file")->required();
    sub->add_option("--seed", opt.seed, "override the configured seed");
    sub->add_option("--out", opt.out, "override the output directory");
  };

  for (const auto& info : crackgen::stage_table()) {
    auto* sub = app.add_subcommand(info.command, info.help);
    add_common(sub);
    const auto stage = info.stage;
    sub->callback([&, stage] {
      status = guarded([&] { crackgen::run_stage(resolve(opt), stage, std::cout); });
    });
  }

  auto* all = app.add_subcommand("run-all", "run every stage in order");
  add_common(all);
  all->callback([&] {
    status = guarded([&] {
      const auto cfg = resolve(opt);
      crackgen::run_all(cfg, std::cout);
      std::cout << "fingerprint " << crackgen::run_fingerprint(cfg) << "\n";
    });
  });

  auto* keys = app.add_subcommand("config-keys", "list every configuration key with its default");
  keys->callback([] {
    std::istringstream lines(crackgen::RunConfig{}.to_text());
    std::string line;
    for (const auto& k : crackgen::config_keys()) {
      std::getline(lines, line);
      std::cout << line << "    # " << k.doc << "\n";
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  return status;
}
