#pragma once

#include <json.hpp>

#include <string>
#include <vector>

namespace xfake::cli {

// Full configuration tree with every key present at its default value; the
// schema that config files and --set overrides are validated against.
nlohmann::json default_config_json();

// Parses argv (without the program name), resolves the config, runs one
// command, appends a ledger entry. Returns the process exit code: 0 success,
// 1 validation error, 2 runtime failure.
int run_command(const std::vector<std::string>& args);

}  // namespace xfake::cli
