#pragma once

#include <cctype>
#include <cstddef>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmarl {

/// One parsed configuration value. `line` is kept for error messages.
struct ConfigValue {
    enum class Kind { Integer, Float, Boolean, String, IntArray };
    Kind kind = Kind::Integer;
    long long integer = 0;
    double real = 0.0;
    bool boolean = false;
    std::string text;
    std::vector<long long> int_array;
    int line = 0;

    const char* kind_name() const {
        switch (kind) {
        case Kind::Integer:
            return "integer";
        case Kind::Float:
            return "float";
        case Kind::Boolean:
            return "boolean";
        case Kind::String:
            return "string";
        case Kind::IntArray:
            return "integer array";
        }
        return "unknown";
    }
};

/// Flat view of a config file: keys are "section.key" (or a bare key for
/// entries above the first section header). Typed getters coerce integers
/// to floats and nothing else; every successful read marks the key as
/// consumed so that leftover (misspelled) keys can be rejected wholesale.
class ConfigTable {
  public:
    std::map<std::string, ConfigValue> values;

    bool has(const std::string& key) const { return values.count(key) > 0; }

    long long get_int(const std::string& key, long long fallback) const {
        const ConfigValue* v = find(key);
        if (!v)
            return fallback;
        if (v->kind != ConfigValue::Kind::Integer)
            throw type_error(key, *v, "integer");
        return v->integer;
    }

    double get_double(const std::string& key, double fallback) const {
        const ConfigValue* v = find(key);
        if (!v)
            return fallback;
        if (v->kind == ConfigValue::Kind::Integer)
            return static_cast<double>(v->integer);
        if (v->kind != ConfigValue::Kind::Float)
            throw type_error(key, *v, "float");
        return v->real;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        const ConfigValue* v = find(key);
        if (!v)
            return fallback;
        if (v->kind != ConfigValue::Kind::Boolean)
            throw type_error(key, *v, "boolean");
        return v->boolean;
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        const ConfigValue* v = find(key);
        if (!v)
            return fallback;
        if (v->kind != ConfigValue::Kind::String)
            throw type_error(key, *v, "string");
        return v->text;
    }

    std::vector<long long> get_int_list(const std::string& key,
                                        std::vector<long long> fallback) const {
        const ConfigValue* v = find(key);
        if (!v)
            return fallback;
        if (v->kind == ConfigValue::Kind::Integer)
            return {v->integer};
        if (v->kind != ConfigValue::Kind::IntArray)
            throw type_error(key, *v, "integer array");
        return v->int_array;
    }

    /// Keys present in the file that no getter ever asked for.
    std::vector<std::string> unconsumed() const {
        std::vector<std::string> leftover;
        for (const auto& [key, value] : values)
            if (consumed_.count(key) == 0)
                leftover.push_back(key);
        return leftover;
    }

    /// Throws if the file contained keys nothing consumed; catches typos.
    void require_all_consumed() const {
        const std::vector<std::string> leftover = unconsumed();
        if (leftover.empty())
            return;
        std::string message = "config: unknown key";
        message += leftover.size() > 1 ? "s: " : ": ";
        for (std::size_t i = 0; i < leftover.size(); ++i) {
            if (i)
                message += ", ";
            message += leftover[i] + " (line " +
                       std::to_string(values.at(leftover[i]).line) + ")";
        }
        throw std::runtime_error(message);
    }

  private:
    const ConfigValue* find(const std::string& key) const {
        const auto it = values.find(key);
        if (it == values.end())
            return nullptr;
        consumed_.insert(key);
        return &it->second;
    }

    static std::runtime_error type_error(const std::string& key, const ConfigValue& v,
                                         const char* wanted) {
        return std::runtime_error("config: key '" + key + "' (line " + std::to_string(v.line) +
                                  ") holds a " + std::string(v.kind_name()) + ", expected " +
                                  wanted);
    }

    mutable std::set<std::string> consumed_;
};

namespace detail {

inline std::string strip(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b])))
        ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1])))
        --e;
    return s.substr(b, e - b);
}

inline bool valid_name(const std::string& s) {
    if (s.empty())
        return false;
    for (char c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-')
            return false;
    return true;
}

inline long long parse_integer(const std::string& text, int line) {
    std::size_t used = 0;
    long long value = 0;
    try {
        value = std::stoll(text, &used);
    } catch (const std::exception&) {
        throw std::runtime_error("config: line " + std::to_string(line) +
                                 ": malformed integer '" + text + "'");
    }
    if (used != text.size())
        throw std::runtime_error("config: line " + std::to_string(line) +
                                 ": trailing characters in integer '" + text + "'");
    return value;
}

inline ConfigValue parse_value(const std::string& raw, int line) {
    ConfigValue v;
    v.line = line;
    if (raw.empty())
        throw std::runtime_error("config: line " + std::to_string(line) + ": missing value");

    if (raw.front() == '"') {
        if (raw.size() < 2 || raw.back() != '"')
            throw std::runtime_error("config: line " + std::to_string(line) +
                                     ": unterminated string");
        v.kind = ConfigValue::Kind::String;
        v.text = raw.substr(1, raw.size() - 2);
        if (v.text.find('"') != std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(line) +
                                     ": embedded quote in string");
        return v;
    }
    if (raw == "true" || raw == "false") {
        v.kind = ConfigValue::Kind::Boolean;
        v.boolean = raw == "true";
        return v;
    }
    if (raw.front() == '[') {
        if (raw.back() != ']')
            throw std::runtime_error("config: line " + std::to_string(line) +
                                     ": unterminated array");
        v.kind = ConfigValue::Kind::IntArray;
        const std::string inner = strip(raw.substr(1, raw.size() - 2));
        if (!inner.empty()) {
            std::size_t start = 0;
            while (start <= inner.size()) {
                const std::size_t comma = inner.find(',', start);
                const std::string item =
                    strip(comma == std::string::npos ? inner.substr(start)
                                                     : inner.substr(start, comma - start));
                v.int_array.push_back(parse_integer(item, line));
                if (comma == std::string::npos)
                    break;
                start = comma + 1;
            }
        }
        return v;
    }
    if (raw.find_first_of(".eE") != std::string::npos &&
        raw.find_first_not_of("+-0123456789.eE") == std::string::npos) {
        std::size_t used = 0;
        try {
            v.real = std::stod(raw, &used);
        } catch (const std::exception&) {
            throw std::runtime_error("config: line " + std::to_string(line) +
                                     ": malformed number '" + raw + "'");
        }
        if (used != raw.size())
            throw std::runtime_error("config: line " + std::to_string(line) +
                                     ": trailing characters in number '" + raw + "'");
        v.kind = ConfigValue::Kind::Float;
        return v;
    }
    v.kind = ConfigValue::Kind::Integer;
    v.integer = parse_integer(raw, line);
    return v;
}

} // namespace detail

/// Parses the supported configuration syntax: `[section]` headers,
/// `key = value` pairs, `#` comments, blank lines. Values are integers,
/// floats, booleans, double-quoted strings (no escapes), and flat integer
/// arrays. Duplicate keys and malformed lines are errors with the line
/// number named.
inline ConfigTable parse_config(const std::string& text) {
    ConfigTable table;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        // comments start at an unquoted '#'
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"')
                quoted = !quoted;
            else if (line[i] == '#' && !quoted) {
                line = line.substr(0, i);
                break;
            }
        }
        line = detail::strip(line);
        if (line.empty())
            continue;

        if (line.front() == '[') {
            if (line.back() != ']')
                throw std::runtime_error("config: line " + std::to_string(number) +
                                         ": unterminated section header");
            section = detail::strip(line.substr(1, line.size() - 2));
            if (!detail::valid_name(section))
                throw std::runtime_error("config: line " + std::to_string(number) +
                                         ": bad section name '" + section + "'");
            continue;
        }

        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(number) +
                                     ": expected key = value");
        const std::string key = detail::strip(line.substr(0, eq));
        if (!detail::valid_name(key))
            throw std::runtime_error("config: line " + std::to_string(number) +
                                     ": bad key name '" + key + "'");
        const std::string full = section.empty() ? key : section + "." + key;
        if (table.values.count(full))
            throw std::runtime_error("config: line " + std::to_string(number) +
                                     ": duplicate key '" + full + "'");
        table.values[full] = detail::parse_value(detail::strip(line.substr(eq + 1)), number);
    }
    return table;
}

inline ConfigTable load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("config: cannot open " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str());
}

} // namespace dmarl
