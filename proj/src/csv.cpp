#include "lmlab/csv.hpp"

#include <sstream>
#include <stdexcept>

#include "lmlab/util.hpp"

namespace lmlab::csv {

std::string escape_field(const std::string& field) {
    bool needs_quotes = field.find_first_of(",\"\r\n") != std::string::npos;
    if (!needs_quotes) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

std::string join_row(const std::vector<std::string>& fields) {
    std::string out;
    for (size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += escape_field(fields[i]);
    }
    return out;
}

std::vector<std::vector<std::string>> parse(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool in_quotes = false;
    bool field_started = false;

    auto end_field = [&] {
        row.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_row = [&] {
        end_field();
        rows.push_back(std::move(row));
        row.clear();
    };

    for (size_t i = 0; i < text.size(); ++i) {
        char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        switch (c) {
            case '"':
                if (!field_started && field.empty()) in_quotes = true;
                else field += c;  // stray quote inside unquoted field
                field_started = true;
                break;
            case ',': end_field(); break;
            case '\r':
                if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
                end_row();
                break;
            case '\n': end_row(); break;
            default:
                field += c;
                field_started = true;
                break;
        }
    }
    if (in_quotes) throw std::runtime_error("csv: unterminated quoted field");
    if (field_started || !field.empty() || !row.empty()) end_row();
    return rows;
}

Table read_file(const std::filesystem::path& path, bool has_header) {
    auto rows = parse(util::read_text_file(path));
    Table t;
    if (rows.empty()) return t;
    size_t start = 0;
    if (has_header) {
        t.header = rows[0];
        start = 1;
    }
    for (size_t i = start; i < rows.size(); ++i) t.rows.push_back(std::move(rows[i]));
    return t;
}

void write_file(const std::filesystem::path& path, const Table& table) {
    std::ostringstream out;
    if (!table.header.empty()) out << join_row(table.header) << '\n';
    for (const auto& row : table.rows) out << join_row(row) << '\n';
    util::atomic_write_file(path, out.str());
}

}  // namespace lmlab::csv
