#pragma once

#include <cstdint>
#include <string_view>

namespace echoprompt {

/// 64-bit FNV-1a over the bytes of a string; stable across platforms.
constexpr std::uint64_t fnv1a64(std::string_view text) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Counter-based generator. The i-th draw is mix64(key + i * golden), so a
/// stream is fully described by (key, counter) and child streams are derived
/// by hashing a name or index into the key. There is no global state.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed) noexcept : key_(mix64(seed)) {}

    CounterRng split(std::string_view name) const noexcept
    {
        return CounterRng(key_ ^ fnv1a64(name), Raw{});
    }

    CounterRng split(std::uint64_t index) const noexcept
    {
        return CounterRng(mix64(key_ ^ mix64(index + 0x632be59bd9b4e019ULL)), Raw{});
    }

    std::uint64_t key() const noexcept { return key_; }

    std::uint64_t next_u64() noexcept
    {
        return mix64(key_ + 0x9e3779b97f4a7c15ULL * counter_++);
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller (both outputs used).
    double normal() noexcept;

    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next_u64() % n; }

private:
    struct Raw {};
    CounterRng(std::uint64_t key, Raw) noexcept : key_(key) {}

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace echoprompt
