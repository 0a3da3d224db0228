#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace convneur::cli {

// One configurable value. Every flag of every command is described by a row of
// this table; the config file uses the same section and key.
struct Setting {
    std::string section;
    std::string key;
    std::string flag;  // without the leading dashes
    std::string default_value;
    std::string help;
};

enum class Source { default_value, file, flag, environment };

struct Resolved {
    std::string value;
    Source source = Source::default_value;
};

// Parsed command, merged config values (defaults < config file < flags) and seed.
struct RunConfig {
    std::string command;
    std::map<std::string, Resolved> values;  // keyed by "section.key"
    unsigned long long seed = 0;

    const std::string& get(const std::string& section_key) const;
    bool explicitly_set(const std::string& section_key) const;
};

std::vector<std::string> commands();
std::vector<Setting> command_settings(const std::string& command);

// Full --help text of a command.
std::string command_help(const std::string& command);

// Runs the tool in-process; returns the exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace convneur::cli
