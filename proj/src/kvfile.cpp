#include "cap/kvfile.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace cap {

namespace {

std::string trim(const std::string& s) {
    const char* ws = " \t\r\n";
    auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

} // namespace

void write_kv_file(const std::string& path, const KvPairs& pairs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    std::set<std::string> seen;
    for (const auto& [k, v] : pairs) {
        if (k.empty() || k.find('=') != std::string::npos || k.find('\n') != std::string::npos)
            throw std::invalid_argument("bad key '" + k + "'");
        if (v.find('\n') != std::string::npos)
            throw std::invalid_argument("value for '" + k + "' contains a newline");
        if (!seen.insert(k).second) throw std::invalid_argument("duplicate key '" + k + "'");
        out << k << " = " << v << "\n";
    }
    if (!out) throw std::runtime_error("write failed for " + path);
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": expected 'key = value', got '" + line + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty key");
        if (!kv.emplace(key, value).second)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": duplicate key '" +
                                     key + "'");
    }
    return kv;
}

std::string kv_get(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::out_of_range("missing key '" + key + "'");
    return it->second;
}

} // namespace cap
