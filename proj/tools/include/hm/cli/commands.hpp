#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "hm/cli/run_config.hpp"

namespace hm::cli {

// Each command reads its inputs from cfg, writes into cfg.out and validates
// what it wrote. Failures throw hm::Error with a one-line cause.
void cmd_synth(const RunConfig& cfg, std::ostream& log);
void cmd_featurize(const RunConfig& cfg, std::ostream& log);
void cmd_train(const RunConfig& cfg, std::ostream& log);
void cmd_predict(const RunConfig& cfg, std::ostream& log);
void cmd_calibrate(const RunConfig& cfg, std::ostream& log);
void cmd_evaluate(const RunConfig& cfg, std::ostream& log);
void cmd_report(const RunConfig& cfg, std::ostream& log);

using GetEnv = std::function<const char*(const char*)>;

/// Entry point of the `hm` tool. Returns the process exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const GetEnv& getenv_fn);

}  // namespace hm::cli
