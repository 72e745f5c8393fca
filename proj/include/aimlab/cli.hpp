#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "aimlab/corpus.hpp"
#include "aimlab/trainer.hpp"

namespace aimlab {

// Bookkeeping for one command invocation. Every subcommand that produces
// files creates a single run directory and writes exactly one manifest.json
// there; artifact paths inside are relative to that directory. Wall-clock
// timing lives only in the manifest, so every other file a run emits is
// byte-identical across repeated invocations with equal argv and inputs.
struct RunManifest {
  std::string command;
  uint64_t seed = 0;
  std::string config_json;  // snapshot as produced by save_config, may be empty
  std::vector<std::string> artifacts;
  std::vector<std::string> warnings;
  double elapsed_seconds = 0.0;

  std::string to_json() const;
};

// Training configuration as a JSON document: scalar fields at the top level
// (mode as its lowercase name), model sizes under "dims". Unknown keys and
// type mismatches are rejected with their key path; missing keys keep their
// defaults; the result is validated. An empty or whitespace-only file means
// "all defaults".
TrainConfig load_config(const std::string& path);
TrainConfig parse_config(const std::string& text);

// Inverse of load_config: parse_config(save_config(c)) reproduces c exactly.
std::string save_config(const TrainConfig& config);

// Synthetic-task tables as JSON {sources, responses, joint, bland}.
std::string task_to_json(const SyntheticTask& task);
SyntheticTask task_from_json(const std::string& text);
SyntheticTask load_task(const std::string& path);

// Renders the logs present in a run directory into static SVG files:
// curves.csv becomes curves.svg (one polyline per column, the first column as
// x axis) and generations.txt becomes lengths.svg (a response-length
// histogram). Returns the files written, relative to the directory, and
// throws when neither log exists. Rendering is pure text generation, so
// re-emission over unchanged logs is byte-identical.
std::vector<std::string> emit_plots(const std::string& run_dir);

// Dispatches one subcommand. args is argv without the program name. Exit
// codes: 0 success, 1 user error (bad flags, unreadable or invalid inputs),
// 2 internal error (a failed self-check or an unexpected exception).
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aimlab
