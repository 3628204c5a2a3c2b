#pragma once

// Minimal TOML subset used by the experiment configs: [section] and
// [dotted.section] headers, key = value pairs with strings, integers, floats,
// booleans, and flat arrays, plus # comments. Unsupported constructs fail
// loudly with the line number.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "recup/errors.hpp"

namespace recup {

class TomlValue {
public:
    using Array = std::vector<TomlValue>;
    std::variant<std::string, std::int64_t, double, bool, Array> v;

    bool is_string() const { return std::holds_alternative<std::string>(v); }
    bool is_int() const { return std::holds_alternative<std::int64_t>(v); }
    bool is_float() const { return std::holds_alternative<double>(v) || is_int(); }
    bool is_bool() const { return std::holds_alternative<bool>(v); }
    bool is_array() const { return std::holds_alternative<Array>(v); }

    const std::string& as_string() const {
        if (!is_string()) throw config_error("config value is not a string");
        return std::get<std::string>(v);
    }
    std::int64_t as_int() const {
        if (!is_int()) throw config_error("config value is not an integer");
        return std::get<std::int64_t>(v);
    }
    double as_float() const {
        if (std::holds_alternative<double>(v)) return std::get<double>(v);
        if (is_int()) return static_cast<double>(std::get<std::int64_t>(v));
        throw config_error("config value is not a number");
    }
    bool as_bool() const {
        if (!is_bool()) throw config_error("config value is not a boolean");
        return std::get<bool>(v);
    }
    const Array& as_array() const {
        if (!is_array()) throw config_error("config value is not an array");
        return std::get<Array>(v);
    }
};

class TomlTable {
public:
    // section -> key -> value; top-level keys live under section "".
    std::map<std::string, std::map<std::string, TomlValue>> sections;

    bool has(const std::string& section, const std::string& key) const {
        auto s = sections.find(section);
        return s != sections.end() && s->second.count(key) > 0;
    }
    const TomlValue& get(const std::string& section, const std::string& key) const {
        auto s = sections.find(section);
        if (s == sections.end() || !s->second.count(key))
            throw config_error("config: missing key '" + key + "' in section [" + section + "]");
        return s->second.at(key);
    }
    std::string get_string(const std::string& s, const std::string& k, const std::string& dflt) const {
        return has(s, k) ? get(s, k).as_string() : dflt;
    }
    std::int64_t get_int(const std::string& s, const std::string& k, std::int64_t dflt) const {
        return has(s, k) ? get(s, k).as_int() : dflt;
    }
    double get_float(const std::string& s, const std::string& k, double dflt) const {
        return has(s, k) ? get(s, k).as_float() : dflt;
    }
    bool get_bool(const std::string& s, const std::string& k, bool dflt) const {
        return has(s, k) ? get(s, k).as_bool() : dflt;
    }
};

namespace detail {

inline std::string toml_trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Strips a trailing comment that is not inside a string literal.
inline std::string toml_strip_comment(const std::string& s) {
    bool in_string = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') in_string = !in_string;
        if (s[i] == '#' && !in_string) return s.substr(0, i);
    }
    return s;
}

inline TomlValue parse_toml_scalar(const std::string& raw, int line_no) {
    std::string s = toml_trim(raw);
    if (s.empty()) throw config_error("config line " + std::to_string(line_no) + ": empty value");
    TomlValue out;
    if (s.front() == '"') {
        if (s.size() < 2 || s.back() != '"')
            throw config_error("config line " + std::to_string(line_no) + ": unterminated string");
        out.v = s.substr(1, s.size() - 2);
        return out;
    }
    if (s == "true") {
        out.v = true;
        return out;
    }
    if (s == "false") {
        out.v = false;
        return out;
    }
    bool looks_float = s.find_first_of(".eE") != std::string::npos && s.find_first_not_of("+-0123456789.eE") == std::string::npos;
    try {
        std::size_t pos = 0;
        if (!looks_float) {
            std::int64_t i = std::stoll(s, &pos);
            if (pos == s.size()) {
                out.v = i;
                return out;
            }
        }
        double d = std::stod(s, &pos);
        if (pos == s.size()) {
            out.v = d;
            return out;
        }
    } catch (const std::exception&) {
    }
    throw config_error("config line " + std::to_string(line_no) + ": cannot parse value '" + s + "'");
}

inline TomlValue parse_toml_value(const std::string& raw, int line_no) {
    std::string s = toml_trim(raw);
    if (!s.empty() && s.front() == '[') {
        if (s.back() != ']') throw config_error("config line " + std::to_string(line_no) + ": unterminated array");
        TomlValue::Array arr;
        std::string inner = s.substr(1, s.size() - 2);
        std::string cur;
        bool in_string = false;
        for (char c : inner) {
            if (c == '"') in_string = !in_string;
            if (c == ',' && !in_string) {
                if (!toml_trim(cur).empty()) arr.push_back(parse_toml_scalar(cur, line_no));
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!toml_trim(cur).empty()) arr.push_back(parse_toml_scalar(cur, line_no));
        TomlValue out;
        out.v = std::move(arr);
        return out;
    }
    return parse_toml_scalar(s, line_no);
}

}  // namespace detail

inline TomlTable parse_toml(std::istream& in) {
    TomlTable table;
    std::string section;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string s = detail::toml_trim(detail::toml_strip_comment(line));
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']' || s.size() < 3)
                throw config_error("config line " + std::to_string(line_no) + ": malformed section header");
            section = detail::toml_trim(s.substr(1, s.size() - 2));
            table.sections[section];
            continue;
        }
        std::size_t eq = std::string::npos;
        bool in_string = false;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"') in_string = !in_string;
            if (s[i] == '=' && !in_string) {
                eq = i;
                break;
            }
        }
        if (eq == std::string::npos)
            throw config_error("config line " + std::to_string(line_no) + ": expected key = value");
        std::string key = detail::toml_trim(s.substr(0, eq));
        if (key.empty()) throw config_error("config line " + std::to_string(line_no) + ": empty key");

        // Arrays may span lines; keep reading until the bracket closes.
        std::string value = s.substr(eq + 1);
        auto bracket_balance = [](const std::string& text) {
            int depth = 0;
            bool quoted = false;
            for (char c : text) {
                if (c == '"') quoted = !quoted;
                if (!quoted && c == '[') ++depth;
                if (!quoted && c == ']') --depth;
            }
            return depth;
        };
        int first_line = line_no;
        while (bracket_balance(value) > 0) {
            std::string more;
            if (!std::getline(in, more))
                throw config_error("config line " + std::to_string(first_line) + ": unterminated array");
            ++line_no;
            value += " " + detail::toml_trim(detail::toml_strip_comment(more));
        }
        table.sections[section][key] = detail::parse_toml_value(value, first_line);
    }
    return table;
}

inline TomlTable parse_toml_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file '" + path + "'");
    return parse_toml(in);
}

inline TomlTable parse_toml_string(const std::string& text) {
    std::istringstream in(text);
    return parse_toml(in);
}

}  // namespace recup
