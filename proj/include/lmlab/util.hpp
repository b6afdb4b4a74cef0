#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace lmlab {
namespace util {

// FNV-1a 64-bit. Used for corpus hashes in run manifests and for deriving
// per-purpose RNG substreams from one run seed.
constexpr std::uint64_t fnv1a(std::string_view data,
                              std::uint64_t seed = 0xcbf29ce484222325ULL) {
    std::uint64_t h = seed;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t hash_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);

// Shortest decimal string that parses back to the same double, so report
// files carry full precision without trailing digit noise.
std::string format_double(double value);

// strict UTF-8: rejects overlong forms, surrogates, and values past U+10FFFF
bool utf8_valid(std::string_view bytes);

// write-temp-rename so readers never observe a torn file
void atomic_write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace util

namespace mem {

// Bookkeeping for tensor allocations, kept per thread so concurrent grid
// cells meter only their own model, optimizer state and activations.
// ResourceReport's RAM column is a window's peak_bytes.
void add_bytes(std::int64_t delta);
std::int64_t current_bytes();  // calling thread's live tracked bytes

// Tracks the calling thread's allocations between construction and query.
class MeterWindow {
  public:
    MeterWindow();
    ~MeterWindow();
    MeterWindow(const MeterWindow&) = delete;
    MeterWindow& operator=(const MeterWindow&) = delete;

    std::int64_t high_water() const;  // absolute peak seen in the window
    std::int64_t peak_bytes() const;  // peak growth over the window start

  private:
    std::int64_t start_;
    std::int64_t high_water_;
    friend void add_bytes(std::int64_t);
};

}  // namespace mem

template <typename T>
struct TrackedAllocator {
    using value_type = T;
    TrackedAllocator() = default;
    template <typename U>
    TrackedAllocator(const TrackedAllocator<U>&) {}

    T* allocate(std::size_t n) {
        mem::add_bytes(static_cast<std::int64_t>(n * sizeof(T)));
        return std::allocator<T>().allocate(n);
    }
    void deallocate(T* p, std::size_t n) {
        std::allocator<T>().deallocate(p, n);
        mem::add_bytes(-static_cast<std::int64_t>(n * sizeof(T)));
    }
    bool operator==(const TrackedAllocator&) const { return true; }
};

}  // namespace lmlab
