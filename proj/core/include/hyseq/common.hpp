// Error types, checked formatting and allocation accounting shared by all modules.
#pragma once

#include <atomic>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace hyseq {

struct DimensionError : std::runtime_error { using std::runtime_error::runtime_error; };
struct IndexError     : std::runtime_error { using std::runtime_error::runtime_error; };
struct StateError     : std::runtime_error { using std::runtime_error::runtime_error; };
struct SizeError      : std::runtime_error { using std::runtime_error::runtime_error; };
struct ConfigError    : std::runtime_error { using std::runtime_error::runtime_error; };
struct DataError      : std::runtime_error { using std::runtime_error::runtime_error; };
struct FormatError    : std::runtime_error { using std::runtime_error::runtime_error; };
struct DomainError    : std::runtime_error { using std::runtime_error::runtime_error; };
struct CapacityError  : std::runtime_error { using std::runtime_error::runtime_error; };

inline std::string strfmt(const char* fmt, ...) {
    va_list args;
    va_start(args, fmt);
    va_list copy;
    va_copy(copy, args);
    const int n = std::vsnprintf(nullptr, 0, fmt, copy);
    va_end(copy);
    std::string out(n > 0 ? static_cast<size_t>(n) : 0, '\0');
    if (n > 0) std::vsnprintf(out.data(), out.size() + 1, fmt, args);
    va_end(args);
    return out;
}

#define HYSEQ_CHECK(cond, ExcType, ...)                        \
    do {                                                       \
        if (!(cond)) throw ExcType(::hyseq::strfmt(__VA_ARGS__)); \
    } while (0)

// Tensor buffer accounting; peak is what the benchmark reports as its
// memory estimate.
class MemStats {
  public:
    static void add(int64_t bytes) {
        const int64_t now = live_.fetch_add(bytes) + bytes;
        int64_t prev = peak_.load();
        while (now > prev && !peak_.compare_exchange_weak(prev, now)) {}
    }
    static void sub(int64_t bytes) { live_.fetch_sub(bytes); }
    static int64_t live() { return live_.load(); }
    static int64_t peak() { return peak_.load(); }
    static void reset_peak() { peak_.store(live_.load()); }

  private:
    static inline std::atomic<int64_t> live_{0};
    static inline std::atomic<int64_t> peak_{0};
};

// Process-wide kernel thread count (BLAS). Call once near startup.
void runtime_init(int threads = 1);

}  // namespace hyseq
