#pragma once

// Batch pipeline behind the `mcf` tool. Each stage reads the data and the
// artifacts of earlier stages from the run directory, computes in memory and
// then commits its artifacts atomically, followed by a manifest entry.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace mcf::pipeline {

using json = nlohmann::ordered_json;

// Stages in pipeline order; `simulate` and `verify` are separate commands.
const std::vector<std::string>& stage_names();
const std::vector<std::string>& subcommands();

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::vector<std::string> sets;  // "dotted.key=value"; value parsed as JSON, else taken as a string
};

// Built-in defaults. Every accepted key appears here; a config file may only
// override existing keys.
json default_config();

// Merges the file (if any) and the overrides onto the defaults and checks
// key names and value types. Errors name the offending field path.
// Relative `data`/`schema` paths are resolved against the config file.
json load_config(const std::filesystem::path& path, const Overrides& overrides);

void apply_set(json& config, const std::string& assignment);

// Runs one subcommand; failures are thrown as mcf::Error subclasses.
// Returns false only when `verify` finds a failing check.
bool run_subcommand(const std::string& name, const json& config, std::ostream& log);

// Runs a subcommand and maps failures to exit codes: 0 ok, 1 failed
// verification or internal error, 2 configuration, 3 data, 4 estimation.
int run(const std::string& name, const std::filesystem::path& config, const Overrides& overrides, std::ostream& log,
        std::ostream& err);

}  // namespace mcf::pipeline
