#include <exception>
#include <map>
#include <ostream>

#include <CLI11.hpp>

#include "hm/cli/commands.hpp"

namespace hm::cli {

namespace {

struct Command {
  const char* name;
  const char* help;
  void (*fn)(const RunConfig&, std::ostream&);
};

constexpr Command kCommands[] = {
    {"synth", "write a synthetic phonocardiogram cohort (manifest.csv + wav/) to --out", cmd_synth},
    {"featurize", "compute log-Mel feature caches for every recording of --manifest into --out", cmd_featurize},
    {"train", "train on the train split, select on validation loss; checkpoints and train_log.jsonl in --out",
     cmd_train},
    {"predict", "MC-dropout predictions for --split: pass_logits.csv and predictions.csv in --out", cmd_predict},
    {"calibrate", "fit the temperature on validation --predictions; writes calibration.json", cmd_calibrate},
    {"evaluate", "metrics.json and decision files for --predictions before/after --calibration", cmd_evaluate},
    {"report", "reliability and confidence-histogram CSVs for both levels", cmd_report},
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const GetEnv& getenv_fn) {
  CLI::App app{"hm: heart murmur detection with MC-dropout uncertainty and temperature calibration"};
  app.name("hm");
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.footer("Every setting is a key: defaults < --config file < HM_<KEY> environment (dots become underscores, "
             "e.g. HM_TRAIN_LR0) < command-line flags.");

  std::string config_file;
  app.add_option("--config", config_file, "flat key=value config file");

  std::map<std::string, std::string> flags;
  const RunConfig defaults;
  for (const auto& k : keys()) {
    std::string names = "--" + k.name;
    if (!k.alias.empty()) names += ",--" + k.alias;
    app.add_option_function<std::string>(
           names, [&flags, name = k.name](const std::string& v) { flags[name] = v; },
           k.help + " [" + k.get(defaults) + "]")
        ->type_name("VALUE");
  }

  const Command* chosen = nullptr;
  for (const auto& c : kCommands) {
    app.add_subcommand(c.name, c.help)->callback([&chosen, &c] { chosen = &c; });
  }

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    RunConfig cfg;
    if (!config_file.empty()) {
      for (const auto& [k, v] : read_config_file(config_file)) apply(cfg, k, v);
    }
    apply_env(cfg, getenv_fn);
    for (const auto& [k, v] : flags) apply(cfg, k, v);
    cfg.finalize();
    chosen->fn(cfg, err);
  } catch (const std::exception& e) {
    err << "hm: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace hm::cli
