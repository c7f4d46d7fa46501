#include "astrosnn/runconfig.hpp"

#include <cctype>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "astrosnn/errors.hpp"

namespace astrosnn {

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-' && c != '.')
            return false;
    return true;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& raw,
                            const std::string& want) {
    throw ConfigError("config key '" + key + "': cannot parse '" + raw + "' as " + want);
}

}  // namespace

KeyValueFile KeyValueFile::parse(std::istream& in, const std::string& origin) {
    KeyValueFile f;
    f.origin = origin;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) +
                              ": expected 'key = value', got '" + t + "'");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (!valid_key(key))
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": bad key '" + key +
                              "' (letters, digits, '_', '-', '.')");
        if (f.find(key))
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                              "'");
        f.entries.emplace_back(key, value);
    }
    return f;
}

KeyValueFile KeyValueFile::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    return parse(in, path);
}

const std::string* KeyValueFile::find(const std::string& key) const {
    for (auto& [k, v] : entries)
        if (k == key) return &v;
    return nullptr;
}

const std::string* ConfigOverrides::take(const std::string& key) {
    for (size_t i = 0; i < file_.entries.size(); ++i) {
        if (file_.entries[i].first == key) {
            used_[i] = true;
            return &file_.entries[i].second;
        }
    }
    return nullptr;
}

void ConfigOverrides::reject_unknown() const {
    std::string unknown;
    for (size_t i = 0; i < file_.entries.size(); ++i) {
        if (!used_[i]) {
            if (!unknown.empty()) unknown += ", ";
            unknown += "'" + file_.entries[i].first + "'";
        }
    }
    if (!unknown.empty())
        throw ConfigError(file_.origin + ": unknown config key(s) for this command: " + unknown);
}

int64_t config_int(const std::string& key, const std::string& raw) {
    errno = 0;
    char* end = nullptr;
    long long v = std::strtoll(raw.c_str(), &end, 10);
    if (raw.empty() || errno != 0 || end != raw.c_str() + raw.size())
        bad_value(key, raw, "an integer");
    return static_cast<int64_t>(v);
}

uint64_t config_uint(const std::string& key, const std::string& raw) {
    errno = 0;
    char* end = nullptr;
    unsigned long long v = std::strtoull(raw.c_str(), &end, 10);
    if (raw.empty() || raw[0] == '-' || errno != 0 || end != raw.c_str() + raw.size())
        bad_value(key, raw, "a non-negative integer");
    return static_cast<uint64_t>(v);
}

double config_double(const std::string& key, const std::string& raw) {
    errno = 0;
    char* end = nullptr;
    double v = std::strtod(raw.c_str(), &end);
    if (raw.empty() || errno != 0 || end != raw.c_str() + raw.size())
        bad_value(key, raw, "a number");
    return v;
}

bool config_bool(const std::string& key, const std::string& raw) {
    if (raw == "true" || raw == "1") return true;
    if (raw == "false" || raw == "0") return false;
    bad_value(key, raw, "a boolean (true/false/1/0)");
}

std::vector<int64_t> config_int_list(const std::string& key, const std::string& raw) {
    std::vector<int64_t> out;
    std::string item;
    std::istringstream ss(raw);
    while (std::getline(ss, item, ',')) out.push_back(config_int(key, trim(item)));
    if (out.empty()) bad_value(key, raw, "a comma-separated integer list");
    return out;
}

std::string config_render(int64_t v) { return std::to_string(v); }
std::string config_render(uint64_t v) { return std::to_string(v); }

std::string config_render(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string config_render(bool v) { return v ? "true" : "false"; }
std::string config_render(const std::string& v) { return v; }

std::string config_render(const std::vector<int64_t>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

std::string write_config_snapshot(
    const std::string& dir, const std::string& command,
    const std::vector<std::pair<std::string, std::string>>& resolved) {
    ensure_dir(dir);
    std::string path = (std::filesystem::path(dir) / (command + ".config")).string();
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write config snapshot: " + path);
    f << "# astrosnn " << command << " resolved configuration; replay with --config\n";
    for (auto& [k, v] : resolved) f << k << " = " << v << '\n';
    if (!f) throw IoError("short write to config snapshot: " + path);
    return path;
}

}  // namespace astrosnn
