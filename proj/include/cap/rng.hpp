#pragma once

#include <cstdint>

namespace cap {

// Counter-based random stream. A draw is a pure function of
// (seed, stream_id, counter), so streams can be split and consumed in any
// order without affecting each other. All integer arithmetic, identical
// sequences on every platform.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed, std::uint64_t stream_id = 0) noexcept
        : seed_(seed), stream_(stream_id) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream_id() const noexcept { return stream_; }

    // Derives an independent child stream; drawing from the child does not
    // advance this stream.
    RngStream split(std::uint64_t child) const noexcept {
        return RngStream(seed_, mix(stream_ + 0x9e3779b97f4a7c15ull * (child + 1)));
    }

    std::uint64_t next_u64() noexcept {
        counter_ += 1;
        std::uint64_t key = mix(seed_ ^ 0x2545f4914f6cdd1dull) ^ mix(stream_);
        return mix(key + counter_ * 0x9e3779b97f4a7c15ull);
    }

    // Uniform in [0, 1), 53-bit mantissa.
    double next_double() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Standard normal via the polar method. Consumes a variable number of
    // uniform draws but is fully determined by the stream state.
    double next_normal() noexcept;

    // Normal(0, stddev^2) resampled until |z| <= 2 stddev.
    double next_trunc_normal(double stddev) noexcept;

private:
    static std::uint64_t mix(std::uint64_t z) noexcept {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
};

} // namespace cap
