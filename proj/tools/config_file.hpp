#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "volflow/errors.hpp"

namespace volflow {

/// key=value config file: one pair per line, '#' starts a comment,
/// whitespace around keys and values is trimmed. Unknown keys are
/// rejected when the caller calls finish().
class ConfigMap {
  public:
    static ConfigMap from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot open: " + path);
        ConfigMap cm;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                if (b == std::string::npos) return std::string();
                const auto e = s.find_last_not_of(" \t\r");
                return s.substr(b, e - b + 1);
            };
            if (trim(line).empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw FormatError(path + ":" + std::to_string(lineno) +
                                  ": expected key=value");
            const std::string key = trim(line.substr(0, eq));
            const std::string val = trim(line.substr(eq + 1));
            if (key.empty())
                throw FormatError(path + ":" + std::to_string(lineno) +
                                  ": empty key");
            if (!cm.kv_.emplace(key, val).second)
                throw FormatError(path + ": duplicate key " + key);
        }
        cm.path_ = path;
        return cm;
    }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    double get_f64(const std::string& key, double dflt) {
        if (!has(key)) return dflt;
        used_.insert(key);
        try {
            return std::stod(kv_.at(key));
        } catch (const std::exception&) {
            throw FormatError(path_ + ": bad number for " + key);
        }
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t dflt) {
        if (!has(key)) return dflt;
        used_.insert(key);
        try {
            return std::stoull(kv_.at(key));
        } catch (const std::exception&) {
            throw FormatError(path_ + ": bad integer for " + key);
        }
    }

    std::uint32_t get_u32(const std::string& key, std::uint32_t dflt) {
        const auto v = get_u64(key, dflt);
        if (v > 0xffffffffull)
            throw FormatError(path_ + ": value too large for " + key);
        return std::uint32_t(v);
    }

    /// Throws on any key that was never read (catches typos).
    void finish() const {
        for (const auto& [k, v] : kv_)
            if (!used_.count(k))
                throw ArgumentError(path_ + ": unknown config key " + k);
    }

  private:
    std::string path_;
    std::map<std::string, std::string> kv_;
    std::set<std::string> used_;
};

}  // namespace volflow
