#include "lmlab/util.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace lmlab {
namespace util {

std::uint64_t hash_file(const std::filesystem::path& path) {
    return fnv1a(read_text_file(path));
}

std::string format_double(double value) {
    char buf[40];
    for (int precision = 1; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof(buf), "%.*g", precision, value);
        if (std::strtod(buf, nullptr) == value) break;
    }
    return buf;
}

bool utf8_valid(std::string_view bytes) {
    size_t i = 0, n = bytes.size();
    while (i < n) {
        unsigned char c = bytes[i];
        size_t len;
        std::uint32_t code, min;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            len = 2, code = c & 0x1F, min = 0x80;
        } else if ((c & 0xF0) == 0xE0) {
            len = 3, code = c & 0x0F, min = 0x800;
        } else if ((c & 0xF8) == 0xF0) {
            len = 4, code = c & 0x07, min = 0x10000;
        } else {
            return false;
        }
        if (i + len > n) return false;
        for (size_t k = 1; k < len; ++k) {
            unsigned char cont = bytes[i + k];
            if ((cont & 0xC0) != 0x80) return false;
            code = (code << 6) | (cont & 0x3F);
        }
        if (code < min || code > 0x10FFFF || (code >= 0xD800 && code <= 0xDFFF))
            return false;
        i += len;
    }
    return true;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void atomic_write_file(const std::filesystem::path& path, std::string_view content) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write file: " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw std::runtime_error("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace util

namespace mem {

namespace {
thread_local std::int64_t t_bytes = 0;
thread_local std::vector<MeterWindow*> t_windows;
}  // namespace

void add_bytes(std::int64_t delta) {
    t_bytes += delta;
    if (delta > 0)
        for (MeterWindow* w : t_windows)
            if (t_bytes > w->high_water_) w->high_water_ = t_bytes;
}

std::int64_t current_bytes() { return t_bytes; }

MeterWindow::MeterWindow() : start_(t_bytes), high_water_(t_bytes) {
    t_windows.push_back(this);
}

MeterWindow::~MeterWindow() { std::erase(t_windows, this); }

std::int64_t MeterWindow::high_water() const { return high_water_; }

std::int64_t MeterWindow::peak_bytes() const { return high_water_ - start_; }

}  // namespace mem
}  // namespace lmlab
