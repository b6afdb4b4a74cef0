#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace lmlab::config {

// TOML subset: [section], [[array-of-tables]], dotted section names,
// scalars (string, integer, float, bool) and flat arrays. Enough for run
// configs and prompt-pair files; no dates, no inline tables.
struct Value {
    enum class Kind { String, Integer, Float, Boolean, Array };
    Kind kind = Kind::String;
    std::string text;
    std::int64_t integer = 0;
    double real = 0.0;
    bool boolean = false;
    std::vector<Value> items;

    const std::string& as_string() const;
    std::int64_t as_integer() const;
    double as_double() const;  // accepts integers
    bool as_boolean() const;
    const std::vector<Value>& as_array() const;
};

struct Table {
    std::map<std::string, Value> values;
    std::map<std::string, Table> tables;
    std::map<std::string, std::vector<Table>> table_arrays;

    bool has(const std::string& key) const { return values.count(key) != 0; }
    const Value& require(const std::string& key) const;

    std::string get_string(const std::string& key, std::string fallback) const;
    std::int64_t get_integer(const std::string& key, std::int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_boolean(const std::string& key, bool fallback) const;
    std::vector<double> get_doubles(const std::string& key) const;
    std::vector<std::string> get_strings(const std::string& key) const;

    const Table& section(const std::string& name) const;  // empty table if absent
};

Table parse(std::string_view text);
Table parse_file(const std::filesystem::path& path);

}  // namespace lmlab::config
