#pragma once

// Run configuration plumbing for the command-line tool: flat key=value config
// files, typed value parsing, and the resolved-config snapshot every run
// writes beside its outputs. Precedence is CLI flag > config file > default;
// a snapshot replayed via --config reproduces the run exactly.

#include <cstdint>
#include <istream>
#include <string>
#include <utility>
#include <vector>

namespace astrosnn {

// One parsed key=value file, insertion-ordered. Lines are `key = value`;
// blank lines and lines whose first non-space character is '#' are skipped.
// Duplicate keys are rejected (they are always an editing mistake).
struct KeyValueFile {
    std::string origin;  // path or label, for error messages
    std::vector<std::pair<std::string, std::string>> entries;

    static KeyValueFile parse(std::istream& in, const std::string& origin);
    static KeyValueFile load(const std::string& path);
    const std::string* find(const std::string& key) const;
};

// Consuming view over a KeyValueFile. A command `take`s every key it knows;
// whatever is left unconsumed is unknown and rejected.
class ConfigOverrides {
public:
    ConfigOverrides() = default;
    explicit ConfigOverrides(KeyValueFile file) : file_(std::move(file)) {
        used_.assign(file_.entries.size(), false);
    }

    // Value for `key`, or nullptr when absent. Marks the key consumed either way.
    const std::string* take(const std::string& key);

    // Throws ConfigError naming every unconsumed key.
    void reject_unknown() const;

private:
    KeyValueFile file_;
    std::vector<bool> used_;
};

// Typed parsing with the key name in every error message.
int64_t config_int(const std::string& key, const std::string& raw);
uint64_t config_uint(const std::string& key, const std::string& raw);
double config_double(const std::string& key, const std::string& raw);
bool config_bool(const std::string& key, const std::string& raw);
std::vector<int64_t> config_int_list(const std::string& key, const std::string& raw);

// Lossless renderings for snapshots (doubles round-trip bit-exactly).
std::string config_render(int64_t v);
std::string config_render(uint64_t v);
std::string config_render(double v);
std::string config_render(bool v);
std::string config_render(const std::string& v);
std::string config_render(const std::vector<int64_t>& v);

void ensure_dir(const std::string& dir);

// Writes `<dir>/<command>.config` with one key = value line per entry.
// The file is itself a valid --config input for the same command.
std::string write_config_snapshot(const std::string& dir, const std::string& command,
                                  const std::vector<std::pair<std::string, std::string>>& resolved);

}  // namespace astrosnn
