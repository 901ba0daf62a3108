#pragma once

// Line-based `key = value` configuration files: `#` starts a comment, blank
// lines are skipped, whitespace around keys and values is trimmed. Typed
// getters convert on access and throw parse_error on malformed input.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "lmbf/errors.hpp"

namespace lmbf {

class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse(std::istream& is, const std::string& origin = "<stream>") {
        KeyValueConfig cfg;
        cfg.origin_ = origin;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const size_t eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw parse_error(origin + ":" + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + trimmed + "'");
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty())
                throw parse_error(origin + ":" + std::to_string(lineno) + ": empty key");
            cfg.values_[key] = value;
        }
        return cfg;
    }

    static KeyValueConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw parse_error(path + ": cannot open");
        return parse(is, path);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    size_t size() const { return values_.size(); }

    std::string get_string(const std::string& key) const { return raw(key); }
    std::string get_string(const std::string& key, const std::string& fallback) const {
        return has(key) ? raw(key) : fallback;
    }

    int64_t get_int(const std::string& key) const { return to_int(key, raw(key)); }
    int64_t get_int(const std::string& key, int64_t fallback) const {
        return has(key) ? to_int(key, raw(key)) : fallback;
    }

    uint64_t get_uint(const std::string& key) const { return to_uint(key, raw(key)); }
    uint64_t get_uint(const std::string& key, uint64_t fallback) const {
        return has(key) ? to_uint(key, raw(key)) : fallback;
    }

    double get_real(const std::string& key) const { return to_real(key, raw(key)); }
    double get_real(const std::string& key, double fallback) const {
        return has(key) ? to_real(key, raw(key)) : fallback;
    }

private:
    static std::string trim(const std::string& s) {
        const char* ws = " \t\r\n";
        const size_t a = s.find_first_not_of(ws);
        if (a == std::string::npos) return "";
        const size_t b = s.find_last_not_of(ws);
        return s.substr(a, b - a + 1);
    }

    const std::string& raw(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw parse_error(origin_ + ": missing key '" + key + "'");
        return it->second;
    }

    int64_t to_int(const std::string& key, const std::string& v) const {
        try {
            size_t used = 0;
            const long long n = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return static_cast<int64_t>(n);
        } catch (const std::exception&) {
            throw parse_error(origin_ + ": key '" + key + "': '" + v + "' is not an integer");
        }
    }

    uint64_t to_uint(const std::string& key, const std::string& v) const {
        try {
            if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
            size_t used = 0;
            const unsigned long long n = std::stoull(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return static_cast<uint64_t>(n);
        } catch (const std::exception&) {
            throw parse_error(origin_ + ": key '" + key + "': '" + v + "' is not a non-negative integer");
        }
    }

    double to_real(const std::string& key, const std::string& v) const {
        try {
            size_t used = 0;
            const double d = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw parse_error(origin_ + ": key '" + key + "': '" + v + "' is not a number");
        }
    }

    std::map<std::string, std::string> values_;
    std::string origin_ = "<empty>";
};

} // namespace lmbf
