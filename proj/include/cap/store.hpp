#pragma once

#include "cap/encoder.hpp"
#include "cap/image.hpp"

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace cap {

// Distinct failure classes so callers and tests can tell a corrupt file from
// a misused one.
enum class StoreErrc {
    io,
    bad_magic,
    bad_version,
    partial_file,
    truncated,
    shape_mismatch,
    mode_mismatch,
    hash_mismatch,
};

const char* store_errc_name(StoreErrc c);

class StoreError : public std::runtime_error {
public:
    StoreError(StoreErrc code, const std::string& msg)
        : std::runtime_error(std::string(store_errc_name(code)) + ": " + msg), code_(code) {}
    StoreErrc code() const noexcept { return code_; }

private:
    StoreErrc code_;
};

// ---------------------------------------------------------------------------
// MCIF — precomputed feature records, fixed stride, float32 payload.
// Layout (little-endian): magic "MCIF", version u32, mode u8, C u32, N u32,
// D u32, sample_count u32, label_width u8, encoder-config hash u64; then per
// sample: cls block (D or C*D f32 by mode), patch block (C*N*D f32),
// label u16. sample_count == 0xFFFFFFFF marks an unfinalized (partial) file.
// ---------------------------------------------------------------------------

struct FeatureFileHeader {
    Encoding mode = Encoding::JFE;
    std::uint32_t channels = 0;      // C
    std::uint32_t tokens = 0;        // N
    std::uint32_t dim = 0;           // D
    std::uint32_t sample_count = 0;
    std::uint8_t label_width = 2;
    std::uint64_t encoder_hash = 0;

    std::size_t cls_floats() const {
        return mode == Encoding::JFE ? dim : static_cast<std::size_t>(channels) * dim;
    }
    std::size_t patch_floats() const {
        return static_cast<std::size_t>(channels) * tokens * dim;
    }
    std::size_t record_bytes() const { return (cls_floats() + patch_floats()) * 4 + 2; }

    static constexpr std::size_t kHeaderBytes = 34;
    static constexpr std::uint32_t kPartialMarker = 0xFFFFFFFFu;
};

// Streams records and patches the count on finalize. A writer destroyed
// before finalize() leaves the partial marker in place, which readers
// reject — that is the abort path for shape drift mid-stream.
class FeatureWriter {
public:
    FeatureWriter(const std::string& path, Encoding mode, std::size_t channels,
                  std::size_t tokens, std::size_t dim, std::uint64_t encoder_hash);

    void append(const FeatureMap& features, std::uint16_t label);
    std::size_t finalize();
    std::size_t written() const noexcept { return count_; }

private:
    std::ofstream out_;
    std::string path_;
    FeatureFileHeader hdr_;
    std::size_t count_ = 0;
    bool finalized_ = false;
};

// Random access by index in O(1) via the fixed record stride.
class FeatureReader {
public:
    explicit FeatureReader(const std::string& path);

    const FeatureFileHeader& header() const noexcept { return hdr_; }
    std::size_t size() const noexcept { return hdr_.sample_count; }

    std::pair<FeatureMap, std::uint16_t> read(std::size_t index) const;

    // Contract guards for consumers.
    void require_mode(Encoding mode) const;
    void require_encoder(std::uint64_t config_hash) const;

private:
    mutable std::ifstream in_;
    std::string path_;
    FeatureFileHeader hdr_;
};

// ---------------------------------------------------------------------------
// MCIS — raw synthetic samples, same container family. Layout: magic "MCIS",
// version u32, C u32, image_size u32, classes u32, sample_count u32; then
// per sample: pixels C*H*W f32, label u16, per-channel latents C f32.
// ---------------------------------------------------------------------------

struct SampleFileHeader {
    std::uint32_t channels = 0;
    std::uint32_t image_size = 0;
    std::uint32_t classes = 0;
    std::uint32_t sample_count = 0;

    std::size_t pixel_floats() const {
        return static_cast<std::size_t>(channels) * image_size * image_size;
    }
    std::size_t record_bytes() const { return pixel_floats() * 4 + 2 + channels * 4; }

    static constexpr std::size_t kHeaderBytes = 24;
};

class SampleWriter {
public:
    SampleWriter(const std::string& path, std::size_t channels, std::size_t image_size,
                 std::size_t classes);
    void append(const MultiChannelImage& image);
    std::size_t finalize();

private:
    std::ofstream out_;
    std::string path_;
    SampleFileHeader hdr_;
    std::size_t count_ = 0;
    bool finalized_ = false;
};

class SampleReader {
public:
    explicit SampleReader(const std::string& path);
    const SampleFileHeader& header() const noexcept { return hdr_; }
    std::size_t size() const noexcept { return hdr_.sample_count; }
    MultiChannelImage read(std::size_t index) const;

private:
    mutable std::ifstream in_;
    std::string path_;
    SampleFileHeader hdr_;
};

} // namespace cap
