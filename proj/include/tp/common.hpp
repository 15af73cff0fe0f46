#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tprog {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

// Malformed input documents (program files, checkpoints, datasets, configs).
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

// Violated operation preconditions (empty input, bad temperature, ...).
struct InvalidArgument : std::invalid_argument {
    explicit InvalidArgument(const std::string& what) : std::invalid_argument(what) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// Counter-based generator built on SplitMix64. Streams are derived by key so
// results do not depend on call order across threads; the same (seed, key,
// counter) triple yields the same value on every platform.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_keys(uint64_t a, uint64_t b) {
    return splitmix64(a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2)));
}

class Rng {
public:
    Rng() = default;
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x5deece66dULL)) {}

    // Derive an independent stream.
    Rng fork(uint64_t key) const { return Rng(mix_keys(state_, key)); }

    uint64_t next_u64() {
        state_ = splitmix64(state_);
        return state_;
    }

    // Uniform in [0, n). Rejection sampling keeps the distribution exact.
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw InvalidArgument("Rng::next_below: n must be positive");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    int next_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    // Uniform in (0, 1); never returns 0 so log() is safe.
    double next_unit() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double next_gumbel() { return -std::log(-std::log(next_unit())); }

    // Marsaglia polar method would need state; Box-Muller on two draws is fine here.
    double next_normal() {
        double u1 = next_unit(), u2 = next_unit();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    bool next_bool() { return (next_u64() & 1ULL) != 0; }

private:
    uint64_t state_ = 0x853c49e6748fea9bULL;
};

// ---------------------------------------------------------------------------
// Worker pool helpers
// ---------------------------------------------------------------------------

// Thread cap: TP_THREADS env var, else hardware concurrency, at least 1.
int max_threads();

// Run fn(i) for i in [0, n) on up to max_threads() workers. Blocks until done.
// Exceptions from workers are rethrown (first one wins).
void parallel_for(int n, const std::function<void(int)>& fn, int threads = 0);

// ---------------------------------------------------------------------------
// Small utilities
// ---------------------------------------------------------------------------

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

std::vector<std::string> split_ws(const std::string& line);
std::string join(const std::vector<std::string>& parts, const std::string& sep);

inline int checked_cast_int(size_t v) { return static_cast<int>(v); }

}  // namespace tprog
