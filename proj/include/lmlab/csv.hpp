#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace lmlab::csv {

// RFC-4180 style: fields with commas, quotes, or newlines are quoted and
// embedded quotes are doubled.
std::string escape_field(const std::string& field);
std::string join_row(const std::vector<std::string>& fields);

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

Table read_file(const std::filesystem::path& path, bool has_header = true);
std::vector<std::vector<std::string>> parse(const std::string& text);

void write_file(const std::filesystem::path& path, const Table& table);

}  // namespace lmlab::csv
