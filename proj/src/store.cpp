#include "cap/store.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <vector>

namespace cap {

namespace {

constexpr char kFeatureMagic[4] = {'M', 'C', 'I', 'F'};
constexpr char kSampleMagic[4] = {'M', 'C', 'I', 'S'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u16(std::vector<char>& buf, std::uint16_t v) {
    buf.push_back(static_cast<char>(v & 0xFF));
    buf.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::vector<char>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::vector<char>& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

// Payload precision is float32; doubles are narrowed on write by design.
void put_f32(std::vector<char>& buf, double v) {
    put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

class ByteCursor {
public:
    ByteCursor(const char* data, std::size_t size) : data_(data), size_(size) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(data_[advance(1)]); }

    std::uint16_t u16() {
        std::size_t o = advance(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i)
            v = static_cast<std::uint16_t>(v | (static_cast<std::uint16_t>(
                                                    static_cast<unsigned char>(data_[o + i]))
                                                << (8 * i)));
        return v;
    }

    std::uint32_t u32() {
        std::size_t o = advance(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[o + i])) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        std::size_t o = advance(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[o + i])) << (8 * i);
        return v;
    }

    double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }

private:
    std::size_t advance(std::size_t n) {
        if (pos_ + n > size_) throw StoreError(StoreErrc::truncated, "read past end of buffer");
        std::size_t o = pos_;
        pos_ += n;
        return o;
    }

    const char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

std::size_t file_size_of(const std::string& path) {
    std::error_code ec;
    auto sz = std::filesystem::file_size(path, ec);
    if (ec) throw StoreError(StoreErrc::io, "cannot stat " + path);
    return static_cast<std::size_t>(sz);
}

std::vector<char> read_exact(std::ifstream& in, const std::string& path, std::size_t offset,
                             std::size_t n, const std::string& what) {
    std::vector<char> buf(n);
    in.clear();
    in.seekg(static_cast<std::streamoff>(offset));
    in.read(buf.data(), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n))
        throw StoreError(StoreErrc::truncated, what + " in " + path);
    return buf;
}

void check_u32_range(std::size_t v, const char* what) {
    if (v == 0 || v > 0x7FFFFFFFu)
        throw StoreError(StoreErrc::shape_mismatch,
                         std::string(what) + " out of range: " + std::to_string(v));
}

} // namespace

const char* store_errc_name(StoreErrc c) {
    switch (c) {
    case StoreErrc::io: return "store-io";
    case StoreErrc::bad_magic: return "store-bad-magic";
    case StoreErrc::bad_version: return "store-bad-version";
    case StoreErrc::partial_file: return "store-partial-file";
    case StoreErrc::truncated: return "store-truncated";
    case StoreErrc::shape_mismatch: return "store-shape-mismatch";
    case StoreErrc::mode_mismatch: return "store-mode-mismatch";
    case StoreErrc::hash_mismatch: return "store-hash-mismatch";
    }
    return "store-unknown";
}

// --------------------------------------------------------------------------
// FeatureWriter
// --------------------------------------------------------------------------

FeatureWriter::FeatureWriter(const std::string& path, Encoding mode, std::size_t channels,
                             std::size_t tokens, std::size_t dim, std::uint64_t encoder_hash)
    : path_(path) {
    check_u32_range(channels, "channels");
    check_u32_range(tokens, "tokens");
    check_u32_range(dim, "dim");
    hdr_.mode = mode;
    hdr_.channels = static_cast<std::uint32_t>(channels);
    hdr_.tokens = static_cast<std::uint32_t>(tokens);
    hdr_.dim = static_cast<std::uint32_t>(dim);
    hdr_.sample_count = FeatureFileHeader::kPartialMarker;
    hdr_.label_width = 2;
    hdr_.encoder_hash = encoder_hash;

    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw StoreError(StoreErrc::io, "cannot open " + path + " for writing");

    // Header goes out with the partial marker; finalize() patches the count.
    std::vector<char> buf;
    buf.insert(buf.end(), kFeatureMagic, kFeatureMagic + 4);
    put_u32(buf, kFormatVersion);
    buf.push_back(static_cast<char>(mode == Encoding::JFE ? 0 : 1));
    put_u32(buf, hdr_.channels);
    put_u32(buf, hdr_.tokens);
    put_u32(buf, hdr_.dim);
    put_u32(buf, hdr_.sample_count);
    buf.push_back(static_cast<char>(hdr_.label_width));
    put_u64(buf, hdr_.encoder_hash);
    if (buf.size() != FeatureFileHeader::kHeaderBytes)
        throw std::logic_error("feature header size drifted");
    out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out_) throw StoreError(StoreErrc::io, "header write failed for " + path);
}

void FeatureWriter::append(const FeatureMap& features, std::uint16_t label) {
    if (finalized_) throw StoreError(StoreErrc::io, "append after finalize on " + path_);
    if (features.mode != hdr_.mode)
        throw StoreError(StoreErrc::mode_mismatch,
                         std::string("writer expects ") + encoding_name(hdr_.mode) +
                             " features, got " + encoding_name(features.mode));
    const std::size_t c = hdr_.channels, n = hdr_.tokens, d = hdr_.dim;
    if (features.patch.shape != std::vector<std::size_t>{c, n, d})
        throw StoreError(StoreErrc::shape_mismatch,
                         "patch block " + shape_str(features.patch) + ", file wants {" +
                             std::to_string(c) + ", " + std::to_string(n) + ", " +
                             std::to_string(d) + "}");
    const std::vector<std::size_t> want_cls =
        hdr_.mode == Encoding::JFE ? std::vector<std::size_t>{1, d} : std::vector<std::size_t>{c, d};
    if (features.cls.shape != want_cls)
        throw StoreError(StoreErrc::shape_mismatch, "cls block " + shape_str(features.cls));

    std::vector<char> buf;
    buf.reserve(hdr_.record_bytes());
    for (double v : features.cls.data) put_f32(buf, v);
    for (double v : features.patch.data) put_f32(buf, v);
    put_u16(buf, label);
    out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out_) throw StoreError(StoreErrc::io, "record write failed for " + path_);
    ++count_;
}

std::size_t FeatureWriter::finalize() {
    if (finalized_) return count_;
    // Patch sample_count at its fixed offset: magic(4)+version(4)+mode(1)+C,N,D(12).
    std::vector<char> buf;
    put_u32(buf, static_cast<std::uint32_t>(count_));
    out_.seekp(21);
    out_.write(buf.data(), 4);
    out_.flush();
    if (!out_) throw StoreError(StoreErrc::io, "finalize failed for " + path_);
    out_.close();
    finalized_ = true;
    hdr_.sample_count = static_cast<std::uint32_t>(count_);
    return count_;
}

// --------------------------------------------------------------------------
// FeatureReader
// --------------------------------------------------------------------------

FeatureReader::FeatureReader(const std::string& path) : path_(path) {
    in_.open(path, std::ios::binary);
    if (!in_) throw StoreError(StoreErrc::io, "cannot open " + path);

    // Magic is judged before anything else so an empty or foreign file is a
    // bad-magic error, not a short read.
    char magic[4] = {};
    in_.read(magic, 4);
    if (in_.gcount() != 4 || std::memcmp(magic, kFeatureMagic, 4) != 0)
        throw StoreError(StoreErrc::bad_magic, path + " is not a feature store");

    auto rest = read_exact(in_, path, 4, FeatureFileHeader::kHeaderBytes - 4, "header");
    ByteCursor cur(rest.data(), rest.size());
    std::uint32_t version = cur.u32();
    if (version != kFormatVersion)
        throw StoreError(StoreErrc::bad_version,
                         path + " has version " + std::to_string(version) + ", expected " +
                             std::to_string(kFormatVersion));
    std::uint8_t mode = cur.u8();
    if (mode > 1)
        throw StoreError(StoreErrc::mode_mismatch,
                         path + " has unknown mode byte " + std::to_string(mode));
    hdr_.mode = mode == 0 ? Encoding::JFE : Encoding::IFE;
    hdr_.channels = cur.u32();
    hdr_.tokens = cur.u32();
    hdr_.dim = cur.u32();
    hdr_.sample_count = cur.u32();
    hdr_.label_width = cur.u8();
    hdr_.encoder_hash = cur.u64();

    if (hdr_.channels == 0 || hdr_.tokens == 0 || hdr_.dim == 0)
        throw StoreError(StoreErrc::shape_mismatch, path + " header has a zero dimension");
    if (hdr_.label_width != 2)
        throw StoreError(StoreErrc::shape_mismatch,
                         path + " label width " + std::to_string(hdr_.label_width) +
                             " unsupported (expected 2)");
    if (hdr_.sample_count == FeatureFileHeader::kPartialMarker)
        throw StoreError(StoreErrc::partial_file,
                         path + " was never finalized (partial marker set)");

    const std::size_t expect =
        FeatureFileHeader::kHeaderBytes + hdr_.sample_count * hdr_.record_bytes();
    const std::size_t actual = file_size_of(path);
    if (actual != expect) {
        const std::size_t body = actual > FeatureFileHeader::kHeaderBytes
                                     ? actual - FeatureFileHeader::kHeaderBytes
                                     : 0;
        throw StoreError(StoreErrc::truncated,
                         path + " holds " + std::to_string(actual) + " bytes, expected " +
                             std::to_string(expect) + "; record " +
                             std::to_string(body / hdr_.record_bytes()) + " is incomplete");
    }
}

std::pair<FeatureMap, std::uint16_t> FeatureReader::read(std::size_t index) const {
    if (index >= hdr_.sample_count)
        throw std::out_of_range("feature index " + std::to_string(index) + " >= " +
                                std::to_string(hdr_.sample_count));
    const std::size_t offset =
        FeatureFileHeader::kHeaderBytes + index * hdr_.record_bytes();
    auto buf = read_exact(in_, path_, offset,
                          hdr_.record_bytes(), "record " + std::to_string(index));
    ByteCursor cur(buf.data(), buf.size());

    FeatureMap fm;
    fm.mode = hdr_.mode;
    const std::size_t c = hdr_.channels, n = hdr_.tokens, d = hdr_.dim;
    fm.cls = hdr_.mode == Encoding::JFE ? Tensor::zeros({1, d}) : Tensor::zeros({c, d});
    for (double& v : fm.cls.data) v = cur.f32();
    fm.patch = Tensor::zeros({c, n, d});
    for (double& v : fm.patch.data) v = cur.f32();
    return {std::move(fm), cur.u16()};
}

void FeatureReader::require_mode(Encoding mode) const {
    if (hdr_.mode != mode)
        throw StoreError(StoreErrc::mode_mismatch,
                         path_ + " holds " + encoding_name(hdr_.mode) + " features, " +
                             encoding_name(mode) + " requested");
}

void FeatureReader::require_encoder(std::uint64_t config_hash) const {
    if (hdr_.encoder_hash != config_hash)
        throw StoreError(StoreErrc::hash_mismatch,
                         path_ + " was extracted with a different encoder config");
}

// --------------------------------------------------------------------------
// SampleWriter / SampleReader
// --------------------------------------------------------------------------

SampleWriter::SampleWriter(const std::string& path, std::size_t channels,
                           std::size_t image_size, std::size_t classes)
    : path_(path) {
    check_u32_range(channels, "channels");
    check_u32_range(image_size, "image_size");
    check_u32_range(classes, "classes");
    hdr_.channels = static_cast<std::uint32_t>(channels);
    hdr_.image_size = static_cast<std::uint32_t>(image_size);
    hdr_.classes = static_cast<std::uint32_t>(classes);
    hdr_.sample_count = FeatureFileHeader::kPartialMarker;

    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw StoreError(StoreErrc::io, "cannot open " + path + " for writing");
    std::vector<char> buf;
    buf.insert(buf.end(), kSampleMagic, kSampleMagic + 4);
    put_u32(buf, kFormatVersion);
    put_u32(buf, hdr_.channels);
    put_u32(buf, hdr_.image_size);
    put_u32(buf, hdr_.classes);
    put_u32(buf, hdr_.sample_count);
    if (buf.size() != SampleFileHeader::kHeaderBytes)
        throw std::logic_error("sample header size drifted");
    out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out_) throw StoreError(StoreErrc::io, "header write failed for " + path);
}

void SampleWriter::append(const MultiChannelImage& image) {
    if (finalized_) throw StoreError(StoreErrc::io, "append after finalize on " + path_);
    const std::size_t c = hdr_.channels, s = hdr_.image_size;
    if (image.pixels.shape != std::vector<std::size_t>{c, s, s})
        throw StoreError(StoreErrc::shape_mismatch,
                         "sample pixels " + shape_str(image.pixels) + ", file wants {" +
                             std::to_string(c) + ", " + std::to_string(s) + ", " +
                             std::to_string(s) + "}");
    if (image.latents.size() != c)
        throw StoreError(StoreErrc::shape_mismatch,
                         "sample carries " + std::to_string(image.latents.size()) +
                             " latents, file wants " + std::to_string(c));
    if (image.label >= hdr_.classes)
        throw StoreError(StoreErrc::shape_mismatch,
                         "label " + std::to_string(image.label) + " >= classes " +
                             std::to_string(hdr_.classes));

    std::vector<char> buf;
    buf.reserve(hdr_.record_bytes());
    for (double v : image.pixels.data) put_f32(buf, v);
    put_u16(buf, image.label);
    for (double v : image.latents) put_f32(buf, v);
    out_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out_) throw StoreError(StoreErrc::io, "record write failed for " + path_);
    ++count_;
}

std::size_t SampleWriter::finalize() {
    if (finalized_) return count_;
    std::vector<char> buf;
    put_u32(buf, static_cast<std::uint32_t>(count_));
    out_.seekp(20); // magic(4) + version(4) + C,H,K(12)
    out_.write(buf.data(), 4);
    out_.flush();
    if (!out_) throw StoreError(StoreErrc::io, "finalize failed for " + path_);
    out_.close();
    finalized_ = true;
    hdr_.sample_count = static_cast<std::uint32_t>(count_);
    return count_;
}

SampleReader::SampleReader(const std::string& path) : path_(path) {
    in_.open(path, std::ios::binary);
    if (!in_) throw StoreError(StoreErrc::io, "cannot open " + path);
    char magic[4] = {};
    in_.read(magic, 4);
    if (in_.gcount() != 4 || std::memcmp(magic, kSampleMagic, 4) != 0)
        throw StoreError(StoreErrc::bad_magic, path + " is not a sample store");

    auto rest = read_exact(in_, path, 4, SampleFileHeader::kHeaderBytes - 4, "header");
    ByteCursor cur(rest.data(), rest.size());
    std::uint32_t version = cur.u32();
    if (version != kFormatVersion)
        throw StoreError(StoreErrc::bad_version,
                         path + " has version " + std::to_string(version) + ", expected " +
                             std::to_string(kFormatVersion));
    hdr_.channels = cur.u32();
    hdr_.image_size = cur.u32();
    hdr_.classes = cur.u32();
    hdr_.sample_count = cur.u32();
    if (hdr_.channels == 0 || hdr_.image_size == 0 || hdr_.classes == 0)
        throw StoreError(StoreErrc::shape_mismatch, path + " header has a zero dimension");
    if (hdr_.sample_count == FeatureFileHeader::kPartialMarker)
        throw StoreError(StoreErrc::partial_file,
                         path + " was never finalized (partial marker set)");

    const std::size_t expect =
        SampleFileHeader::kHeaderBytes + hdr_.sample_count * hdr_.record_bytes();
    const std::size_t actual = file_size_of(path);
    if (actual != expect) {
        const std::size_t body =
            actual > SampleFileHeader::kHeaderBytes ? actual - SampleFileHeader::kHeaderBytes : 0;
        throw StoreError(StoreErrc::truncated,
                         path + " holds " + std::to_string(actual) + " bytes, expected " +
                             std::to_string(expect) + "; record " +
                             std::to_string(body / hdr_.record_bytes()) + " is incomplete");
    }
}

MultiChannelImage SampleReader::read(std::size_t index) const {
    if (index >= hdr_.sample_count)
        throw std::out_of_range("sample index " + std::to_string(index) + " >= " +
                                std::to_string(hdr_.sample_count));
    const std::size_t offset = SampleFileHeader::kHeaderBytes + index * hdr_.record_bytes();
    auto buf = read_exact(in_, path_, offset,
                          hdr_.record_bytes(), "record " + std::to_string(index));
    ByteCursor cur(buf.data(), buf.size());

    MultiChannelImage img;
    const std::size_t c = hdr_.channels, s = hdr_.image_size;
    img.pixels = Tensor::zeros({c, s, s});
    for (double& v : img.pixels.data) v = cur.f32();
    img.label = cur.u16();
    img.latents.resize(c);
    for (double& v : img.latents) v = cur.f32();
    return img;
}

} // namespace cap
