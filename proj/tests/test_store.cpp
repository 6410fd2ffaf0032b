#include "doctest.h"

#include "cap/rng.hpp"
#include "cap/store.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using namespace cap;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("cap_store_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

FeatureMap random_features(Encoding mode, std::size_t c, std::size_t n, std::size_t d,
                           RngStream& rng) {
    FeatureMap fm;
    fm.mode = mode;
    fm.patch = Tensor::zeros({c, n, d});
    for (double& v : fm.patch.data) v = rng.next_double() * 4.0 - 2.0;
    fm.cls = mode == Encoding::JFE ? Tensor::zeros({1, d}) : Tensor::zeros({c, d});
    for (double& v : fm.cls.data) v = rng.next_double() * 4.0 - 2.0;
    return fm;
}

// The container narrows to f32; the ground truth for a round trip is the
// double that survives one float cast.
double as_stored(double v) { return static_cast<double>(static_cast<float>(v)); }

void patch_bytes(const fs::path& path, std::size_t offset, const std::vector<char>& bytes) {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    REQUIRE(f.good());
    f.seekp(static_cast<std::streamoff>(offset));
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE(f.good());
}

} // namespace

TEST_CASE("feature store round trip is bit exact in both modes") {
    auto dir = fresh_dir("roundtrip");
    for (Encoding mode : {Encoding::JFE, Encoding::IFE}) {
        const std::size_t c = 3, n = 5, d = 8, count = 10;
        fs::path path = dir / (std::string("feat_") + encoding_name(mode) + ".mcif");
        RngStream rng(7, mode == Encoding::JFE ? 0 : 1);

        std::vector<FeatureMap> originals;
        std::vector<std::uint16_t> labels;
        {
            FeatureWriter w(path.string(), mode, c, n, d, 0xDEADBEEFCAFE1234ull);
            for (std::size_t i = 0; i < count; ++i) {
                originals.push_back(random_features(mode, c, n, d, rng));
                labels.push_back(static_cast<std::uint16_t>(rng.next_u64() % 1000));
                w.append(originals.back(), labels.back());
            }
            CHECK(w.finalize() == count);
        }

        FeatureReader r(path.string());
        CHECK(r.header().mode == mode);
        CHECK(r.header().channels == c);
        CHECK(r.header().tokens == n);
        CHECK(r.header().dim == d);
        CHECK(r.header().encoder_hash == 0xDEADBEEFCAFE1234ull);
        REQUIRE(r.size() == count);

        // Out-of-order access exercises the fixed-stride offset arithmetic.
        for (std::size_t i = count; i-- > 0;) {
            auto [fm, label] = r.read(i);
            CHECK(label == labels[i]);
            CHECK(fm.mode == mode);
            REQUIRE(fm.patch.shape == originals[i].patch.shape);
            REQUIRE(fm.cls.shape == originals[i].cls.shape);
            for (std::size_t j = 0; j < fm.patch.data.size(); ++j)
                CHECK(fm.patch.data[j] == as_stored(originals[i].patch.data[j]));
            for (std::size_t j = 0; j < fm.cls.data.size(); ++j)
                CHECK(fm.cls.data[j] == as_stored(originals[i].cls.data[j]));
        }
        CHECK_THROWS_AS(r.read(count), std::out_of_range);
    }
}

TEST_CASE("feature store rejects corrupt and foreign files with distinct codes") {
    auto dir = fresh_dir("corrupt");

    auto code_of = [](const std::string& path) {
        try {
            FeatureReader r(path);
        } catch (const StoreError& e) {
            return e.code();
        }
        return StoreErrc::io; // reachable only if no throw, which fails the CHECK below
    };

    SUBCASE("empty file reads as bad magic") {
        fs::path p = dir / "empty.mcif";
        std::ofstream(p).close();
        CHECK(code_of(p.string()) == StoreErrc::bad_magic);
    }

    SUBCASE("foreign bytes read as bad magic") {
        fs::path p = dir / "foreign.mcif";
        std::ofstream(p) << "PNG\x89 not a feature file";
        CHECK(code_of(p.string()) == StoreErrc::bad_magic);
    }

    SUBCASE("missing file is an io error") {
        CHECK(code_of((dir / "no_such.mcif").string()) == StoreErrc::io);
    }

    // A small valid file to mutate.
    fs::path valid = dir / "valid.mcif";
    {
        RngStream rng(11);
        FeatureWriter w(valid.string(), Encoding::IFE, 2, 4, 6, 42);
        for (int i = 0; i < 4; ++i)
            w.append(random_features(Encoding::IFE, 2, 4, 6, rng),
                     static_cast<std::uint16_t>(i));
        w.finalize();
    }

    SUBCASE("version bump reads as bad version") {
        fs::path p = dir / "version.mcif";
        fs::copy_file(valid, p);
        patch_bytes(p, 4, {9, 0, 0, 0});
        CHECK(code_of(p.string()) == StoreErrc::bad_version);
    }

    SUBCASE("truncation names the first incomplete record") {
        fs::path p = dir / "trunc.mcif";
        fs::copy_file(valid, p);
        FeatureReader probe(valid.string());
        const std::size_t rec = probe.header().record_bytes();
        // Chop into the middle of record 2.
        fs::resize_file(p, FeatureFileHeader::kHeaderBytes + 2 * rec + rec / 2);
        try {
            FeatureReader r(p.string());
            CHECK(false);
        } catch (const StoreError& e) {
            CHECK(e.code() == StoreErrc::truncated);
            CHECK(std::string(e.what()).find("record 2") != std::string::npos);
        }
    }

    SUBCASE("unfinalized writer leaves a partial file marker") {
        fs::path p = dir / "partial.mcif";
        {
            RngStream rng(13);
            FeatureWriter w(p.string(), Encoding::JFE, 2, 4, 6, 0);
            w.append(random_features(Encoding::JFE, 2, 4, 6, rng), 0);
            // No finalize: simulates an aborted extraction.
        }
        CHECK(code_of(p.string()) == StoreErrc::partial_file);
    }

    SUBCASE("mode and encoder guards") {
        FeatureReader r(valid.string());
        CHECK_NOTHROW(r.require_mode(Encoding::IFE));
        CHECK_NOTHROW(r.require_encoder(42));
        try {
            r.require_mode(Encoding::JFE);
            CHECK(false);
        } catch (const StoreError& e) {
            CHECK(e.code() == StoreErrc::mode_mismatch);
        }
        try {
            r.require_encoder(43);
            CHECK(false);
        } catch (const StoreError& e) {
            CHECK(e.code() == StoreErrc::hash_mismatch);
        }
    }
}

TEST_CASE("feature writer rejects wrong shapes and modes at append time") {
    auto dir = fresh_dir("writer_guards");
    RngStream rng(17);
    FeatureWriter w((dir / "w.mcif").string(), Encoding::IFE, 2, 4, 6, 0);

    CHECK_THROWS_AS(w.append(random_features(Encoding::JFE, 2, 4, 6, rng), 0), StoreError);
    CHECK_THROWS_AS(w.append(random_features(Encoding::IFE, 3, 4, 6, rng), 0), StoreError);
    CHECK_THROWS_AS(w.append(random_features(Encoding::IFE, 2, 5, 6, rng), 0), StoreError);

    // Cls block shape is checked independently of the patch block.
    FeatureMap fm = random_features(Encoding::IFE, 2, 4, 6, rng);
    fm.cls = Tensor::zeros({1, 6});
    CHECK_THROWS_AS(w.append(fm, 0), StoreError);

    w.append(random_features(Encoding::IFE, 2, 4, 6, rng), 1);
    w.finalize();
    CHECK_THROWS_AS(w.append(random_features(Encoding::IFE, 2, 4, 6, rng), 2), StoreError);
    CHECK(FeatureReader((dir / "w.mcif").string()).size() == 1);
}

TEST_CASE("sample store round trips pixels, labels and latents") {
    auto dir = fresh_dir("samples");
    const std::size_t c = 3, s = 8, k = 4, count = 12;
    fs::path path = dir / "train.mcis";
    RngStream rng(23);

    std::vector<MultiChannelImage> originals;
    {
        SampleWriter w(path.string(), c, s, k);
        for (std::size_t i = 0; i < count; ++i) {
            MultiChannelImage img;
            img.pixels = Tensor::zeros({c, s, s});
            for (double& v : img.pixels.data) v = rng.next_double();
            img.label = static_cast<std::uint16_t>(i % k);
            img.latents = {rng.next_double(), rng.next_double(), rng.next_double()};
            originals.push_back(img);
            w.append(img);
        }
        CHECK(w.finalize() == count);
    }

    SampleReader r(path.string());
    CHECK(r.header().channels == c);
    CHECK(r.header().image_size == s);
    CHECK(r.header().classes == k);
    REQUIRE(r.size() == count);
    for (std::size_t i = 0; i < count; ++i) {
        MultiChannelImage img = r.read(i);
        CHECK(img.label == originals[i].label);
        REQUIRE(img.pixels.shape == originals[i].pixels.shape);
        for (std::size_t j = 0; j < img.pixels.data.size(); ++j)
            CHECK(img.pixels.data[j] == as_stored(originals[i].pixels.data[j]));
        REQUIRE(img.latents.size() == c);
        for (std::size_t j = 0; j < c; ++j)
            CHECK(img.latents[j] == as_stored(originals[i].latents[j]));
    }
    CHECK_THROWS_AS(r.read(count), std::out_of_range);
}

TEST_CASE("sample store guards labels, shapes and corrupt files") {
    auto dir = fresh_dir("sample_guards");
    fs::path path = dir / "g.mcis";
    {
        SampleWriter w(path.string(), 2, 4, 3);
        MultiChannelImage img;
        img.pixels = Tensor::zeros({2, 4, 4});
        img.latents = {0.1, 0.2};

        MultiChannelImage bad_label = img;
        bad_label.label = 3; // classes == 3 means labels 0..2
        CHECK_THROWS_AS(w.append(bad_label), StoreError);

        MultiChannelImage bad_shape = img;
        bad_shape.pixels = Tensor::zeros({2, 5, 5});
        CHECK_THROWS_AS(w.append(bad_shape), StoreError);

        MultiChannelImage bad_latents = img;
        bad_latents.latents = {0.1};
        CHECK_THROWS_AS(w.append(bad_latents), StoreError);

        w.append(img);
        w.finalize();
    }
    CHECK(SampleReader(path.string()).size() == 1);

    fs::path chopped = dir / "chopped.mcis";
    fs::copy_file(path, chopped);
    fs::resize_file(chopped, SampleFileHeader::kHeaderBytes + 3);
    try {
        SampleReader r(chopped.string());
        CHECK(false);
    } catch (const StoreError& e) {
        CHECK(e.code() == StoreErrc::truncated);
        CHECK(std::string(e.what()).find("record 0") != std::string::npos);
    }

    fs::path alien = dir / "alien.mcis";
    std::ofstream(alien) << "MCIF"; // feature magic is not sample magic
    try {
        SampleReader r(alien.string());
        CHECK(false);
    } catch (const StoreError& e) {
        CHECK(e.code() == StoreErrc::bad_magic);
    }
}
