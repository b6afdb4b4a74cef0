#include "lmlab/config.hpp"

#include <cctype>
#include <charconv>
#include <stdexcept>

#include "lmlab/util.hpp"

namespace lmlab::config {

namespace {

[[noreturn]] void fail(int line, const std::string& message) {
    throw std::runtime_error("config: line " + std::to_string(line) + ": " + message);
}

struct Parser {
    std::string_view text;
    size_t pos = 0;
    int line = 1;

    bool eof() const { return pos >= text.size(); }
    char peek() const { return text[pos]; }
    char take() {
        char c = text[pos++];
        if (c == '\n') ++line;
        return c;
    }

    void skip_inline_ws() {
        while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos;
    }

    void skip_ws_and_comments() {
        while (!eof()) {
            char c = peek();
            if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                take();
            } else if (c == '#') {
                while (!eof() && peek() != '\n') ++pos;
            } else {
                break;
            }
        }
    }

    void expect_line_end() {
        skip_inline_ws();
        if (eof()) return;
        char c = peek();
        if (c == '#') {
            while (!eof() && peek() != '\n') ++pos;
            return;
        }
        if (c != '\n' && c != '\r') fail(line, "unexpected trailing content");
    }

    std::string bare_key() {
        std::string key;
        while (!eof()) {
            char c = peek();
            if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') {
                key += take();
            } else {
                break;
            }
        }
        if (key.empty()) fail(line, "expected key");
        return key;
    }

    std::string quoted_string() {
        char quote = take();  // " or '
        std::string out;
        while (true) {
            if (eof()) fail(line, "unterminated string");
            char c = take();
            if (c == quote) break;
            if (c == '\n') fail(line - 1, "newline in string");
            if (quote == '"' && c == '\\') {
                if (eof()) fail(line, "unterminated escape");
                char e = take();
                switch (e) {
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    case 'r': out += '\r'; break;
                    default: fail(line, std::string("unsupported escape \\") + e);
                }
            } else {
                out += c;
            }
        }
        return out;
    }

    Value number_or_bool() {
        size_t start = pos;
        while (!eof()) {
            char c = peek();
            if (std::isalnum(static_cast<unsigned char>(c)) || c == '+' || c == '-' ||
                c == '.' || c == '_') {
                ++pos;
            } else {
                break;
            }
        }
        std::string raw(text.substr(start, pos - start));
        if (raw.empty()) fail(line, "expected value");

        Value v;
        if (raw == "true" || raw == "false") {
            v.kind = Value::Kind::Boolean;
            v.boolean = raw == "true";
            return v;
        }
        std::string digits;
        for (char c : raw)
            if (c != '_') digits += c;
        bool looks_float = digits.find_first_of(".eE") != std::string::npos;
        if (!looks_float) {
            std::int64_t n = 0;
            auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), n);
            if (ec == std::errc() && ptr == digits.data() + digits.size()) {
                v.kind = Value::Kind::Integer;
                v.integer = n;
                v.real = static_cast<double>(n);
                return v;
            }
        }
        double d = 0.0;
        auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), d);
        if (ec != std::errc() || ptr != digits.data() + digits.size())
            fail(line, "bad value: " + raw);
        v.kind = Value::Kind::Float;
        v.real = d;
        return v;
    }

    Value value() {
        if (eof()) fail(line, "expected value");
        char c = peek();
        if (c == '"' || c == '\'') {
            Value v;
            v.kind = Value::Kind::String;
            v.text = quoted_string();
            return v;
        }
        if (c == '[') {
            take();
            Value v;
            v.kind = Value::Kind::Array;
            skip_ws_and_comments();
            while (!eof() && peek() != ']') {
                v.items.push_back(value());
                skip_ws_and_comments();
                if (!eof() && peek() == ',') {
                    take();
                    skip_ws_and_comments();
                }
            }
            if (eof()) fail(line, "unterminated array");
            take();  // ]
            return v;
        }
        return number_or_bool();
    }

    std::vector<std::string> dotted_name() {
        std::vector<std::string> parts;
        parts.push_back(bare_key());
        while (!eof() && peek() == '.') {
            take();
            parts.push_back(bare_key());
        }
        return parts;
    }
};

Table* descend(Table* table, const std::vector<std::string>& parts, size_t count, int line) {
    for (size_t i = 0; i < count; ++i) {
        const std::string& name = parts[i];
        if (table->values.count(name)) fail(line, "'" + name + "' is not a table");
        if (table->table_arrays.count(name)) {
            auto& arr = table->table_arrays[name];
            if (arr.empty()) fail(line, "empty table array '" + name + "'");
            table = &arr.back();
        } else {
            table = &table->tables[name];
        }
    }
    return table;
}

}  // namespace

Table parse(std::string_view text) {
    Parser p{text};
    Table root;
    Table* current = &root;

    p.skip_ws_and_comments();
    while (!p.eof()) {
        if (p.peek() == '[') {
            p.take();
            bool array_of_tables = !p.eof() && p.peek() == '[';
            if (array_of_tables) p.take();
            p.skip_inline_ws();
            auto parts = p.dotted_name();
            p.skip_inline_ws();
            if (p.eof() || p.take() != ']') fail(p.line, "expected ]");
            if (array_of_tables && (p.eof() || p.take() != ']')) fail(p.line, "expected ]]");
            p.expect_line_end();

            if (array_of_tables) {
                Table* parent = descend(&root, parts, parts.size() - 1, p.line);
                if (parent->tables.count(parts.back()) || parent->values.count(parts.back()))
                    fail(p.line, "'" + parts.back() + "' already defined");
                auto& arr = parent->table_arrays[parts.back()];
                arr.emplace_back();
                current = &arr.back();
            } else {
                current = descend(&root, parts, parts.size(), p.line);
            }
        } else {
            int key_line = p.line;
            auto key_parts = p.dotted_name();
            p.skip_inline_ws();
            if (p.eof() || p.take() != '=') fail(key_line, "expected = after key");
            p.skip_inline_ws();
            Value v = p.value();
            p.expect_line_end();

            Table* target = descend(current, key_parts, key_parts.size() - 1, key_line);
            const std::string& key = key_parts.back();
            if (target->values.count(key) || target->tables.count(key) ||
                target->table_arrays.count(key))
                fail(key_line, "duplicate key '" + key + "'");
            target->values.emplace(key, std::move(v));
        }
        p.skip_ws_and_comments();
    }
    return root;
}

Table parse_file(const std::filesystem::path& path) {
    return parse(util::read_text_file(path));
}

namespace {
[[noreturn]] void type_error(const char* want, Value::Kind got) {
    static const char* names[] = {"string", "integer", "float", "boolean", "array"};
    throw std::runtime_error(std::string("config: expected ") + want + ", found " +
                             names[static_cast<int>(got)]);
}
}  // namespace

const std::string& Value::as_string() const {
    if (kind != Kind::String) type_error("string", kind);
    return text;
}

std::int64_t Value::as_integer() const {
    if (kind != Kind::Integer) type_error("integer", kind);
    return integer;
}

double Value::as_double() const {
    if (kind != Kind::Integer && kind != Kind::Float) type_error("float", kind);
    return real;
}

bool Value::as_boolean() const {
    if (kind != Kind::Boolean) type_error("boolean", kind);
    return boolean;
}

const std::vector<Value>& Value::as_array() const {
    if (kind != Kind::Array) type_error("array", kind);
    return items;
}

const Value& Table::require(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw std::runtime_error("config: missing key '" + key + "'");
    return it->second;
}

std::string Table::get_string(const std::string& key, std::string fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second.as_string();
}

std::int64_t Table::get_integer(const std::string& key, std::int64_t fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second.as_integer();
}

double Table::get_double(const std::string& key, double fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second.as_double();
}

bool Table::get_boolean(const std::string& key, bool fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second.as_boolean();
}

std::vector<double> Table::get_doubles(const std::string& key) const {
    std::vector<double> out;
    if (!has(key)) return out;
    for (const auto& v : require(key).as_array()) out.push_back(v.as_double());
    return out;
}

std::vector<std::string> Table::get_strings(const std::string& key) const {
    std::vector<std::string> out;
    if (!has(key)) return out;
    for (const auto& v : require(key).as_array()) out.push_back(v.as_string());
    return out;
}

const Table& Table::section(const std::string& name) const {
    static const Table empty;
    auto it = tables.find(name);
    return it == tables.end() ? empty : it->second;
}

}  // namespace lmlab::config
