#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace cap {

// Flat `key = value` text files: one format for run manifests, dataset
// manifests and CLI config files. '#' starts a comment; blank lines are
// skipped; duplicate keys and lines without '=' are rejected.
using KvPairs = std::vector<std::pair<std::string, std::string>>;

void write_kv_file(const std::string& path, const KvPairs& pairs);
std::map<std::string, std::string> read_kv_file(const std::string& path);

std::string kv_get(const std::map<std::string, std::string>& kv, const std::string& key);

} // namespace cap
