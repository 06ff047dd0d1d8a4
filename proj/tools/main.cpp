// promptlab: configuration-driven experiment runner.
//
//   promptlab train      --config run.json --out results/run1
//   promptlab sweep      --config grid.json --out results/grid --seed 3
//   promptlab account    --out results/account
//   promptlab forgetting --config forgetting.json --out results/forgetting

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <optional>

#include "promptlab/experiment.hpp"

namespace {

int fail(const std::string& kind, const std::string& field, const std::string& message) {
  std::string one_line = message;
  for (char& c : one_line) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::cerr << "error kind=" << kind;
  if (!field.empty()) std::cerr << " field=" << field;
  std::cerr << " message=\"" << one_line << "\"\n";
  return kind == "config" ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"promptlab: soft prompt tuning experiments on a toy Whisper-shaped model"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool quiet = false;

  for (const char* name : {"train", "sweep", "account", "forgetting"}) {
    auto* sub = app.add_subcommand(name, std::string("run mode ") + name);
    auto* cfg = sub->add_option("--config", config_path, "experiment config (JSON)");
    if (std::string(name) != "account") cfg->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory (overrides config 'outputs')");
    sub->add_option("--seed", seed, "seed override for model, adapter and optimizer");
    sub->add_flag("--quiet", quiet, "suppress progress output");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", "", e.what());
  }

  const std::string mode_name = app.get_subcommands().front()->get_name();
  try {
    promptlab::ExperimentConfig config;
    if (!config_path.empty()) {
      config = promptlab::load_config(config_path);
      if (promptlab::to_string(config.mode) != mode_name) {
        throw promptlab::ConfigError("mode", "config declares mode '" + std::string(promptlab::to_string(config.mode)) +
                                                 "' but the '" + mode_name + "' subcommand was used");
      }
    } else {
      config.mode = promptlab::parse_mode(mode_name);
    }
    if (seed) promptlab::apply_seed(config, *seed);
    if (!out_dir.empty()) config.outputs = out_dir;
    if (config.outputs.empty()) throw promptlab::ConfigError("outputs", "no output directory (use --out)");

    promptlab::Progress progress;
    if (!quiet) progress = [](const std::string& msg) { std::cerr << "[promptlab] " << msg << "\n"; };
    const auto table = promptlab::run(config, config.outputs, progress);
    if (!quiet) std::cout << table.markdown();
    return 0;
  } catch (const promptlab::ConfigError& e) {
    return fail("config", e.field(), e.what());
  } catch (const std::exception& e) {
    return fail("runtime", "", e.what());
  }
}
