#include "cap/encoder.hpp"

#include "cap/rng.hpp"

#include "doctest.h"

#include <cmath>
#include <stdexcept>

using namespace cap;

namespace {

EncoderConfig toy_config() {
    EncoderConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8; // N = 4, keeps brute-force checks cheap
    cfg.embed_dim = 16;
    cfg.depth = 2;
    cfg.heads = 4;
    cfg.init_seed = 12;
    return cfg;
}

MultiChannelImage random_image(std::size_t c, std::size_t hw, RngStream& rng) {
    MultiChannelImage img;
    img.pixels = Tensor::zeros({c, hw, hw});
    for (double& x : img.pixels.data) x = rng.next_double();
    img.latents.assign(c, 0.0);
    return img;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    }
    return m;
}

} // namespace

TEST_CASE("encoder config arithmetic and validation") {
    EncoderConfig cfg; // defaults: image 32, patch 8, D=64, depth 4, heads 4
    CHECK(cfg.tokens_per_channel() == 16);
    cfg.validate();

    EncoderConfig bad = cfg;
    bad.patch_size = 7;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.embed_dim = 66; // not divisible by 4 heads
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.depth = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("init_encoder is deterministic in the seed") {
    EncoderConfig cfg = toy_config();
    EncoderWeights a = init_encoder(cfg);
    EncoderWeights b = init_encoder(cfg);
    CHECK(a.checksum() == b.checksum());
    CHECK(a.patch_proj.data == b.patch_proj.data);
    CHECK(a.layers[1].w2.data == b.layers[1].w2.data);

    cfg.init_seed = 13;
    EncoderWeights c = init_encoder(cfg);
    CHECK(a.checksum() != c.checksum());
}

TEST_CASE("init_encoder truncates weights at two standard deviations") {
    EncoderWeights w = init_encoder(toy_config());
    for (double x : w.patch_proj.data) CHECK(std::abs(x) <= 0.04 + 1e-12);
    for (double x : w.pos.data) CHECK(std::abs(x) <= 0.04 + 1e-12);
}

TEST_CASE("tokenize shapes, shared projection, and rejection cases") {
    EncoderConfig cfg = toy_config();
    EncoderWeights w = init_encoder(cfg);
    RngStream rng(1, 0);
    MultiChannelImage img = random_image(3, cfg.image_size, rng);

    TokenBatch batch = tokenize(img, w);
    CHECK(batch.channels() == 3);
    CHECK(batch.tokens_per_channel() == 4);
    CHECK(batch.dim() == cfg.embed_dim);

    // identical pixel content in two channels -> identical token rows
    MultiChannelImage twin = img;
    for (std::size_t y = 0; y < cfg.image_size; ++y) {
        for (std::size_t x = 0; x < cfg.image_size; ++x) {
            twin.pixels.at(1, y, x) = twin.pixels.at(0, y, x);
        }
    }
    TokenBatch tb = tokenize(twin, w);
    for (std::size_t i = 0; i < tb.tokens_per_channel(); ++i) {
        for (std::size_t j = 0; j < tb.dim(); ++j) {
            CHECK(tb.tokens.at(0, i, j) == tb.tokens.at(1, i, j));
        }
    }

    MultiChannelImage empty;
    empty.pixels = Tensor::zeros({0, cfg.image_size, cfg.image_size});
    CHECK_THROWS_AS(tokenize(empty, w), std::invalid_argument);
    MultiChannelImage wrong = random_image(2, 8, rng);
    CHECK_THROWS_AS(tokenize(wrong, w), std::invalid_argument);
}

TEST_CASE("C=1: encode_jfe equals encode_ife") {
    EncoderConfig cfg = toy_config();
    EncoderWeights w = init_encoder(cfg);
    RngStream rng(2, 0);
    for (int trial = 0; trial < 10; ++trial) {
        MultiChannelImage img = random_image(1, cfg.image_size, rng);
        TokenBatch batch = tokenize(img, w);
        FeatureMap jfe = encode_jfe(batch, w);
        FeatureMap ife = encode_ife(batch, w);
        CHECK(max_abs_diff(jfe.patch, ife.patch) < 1e-9);
        CHECK(max_abs_diff(jfe.cls, ife.cls) < 1e-9);
    }
}

TEST_CASE("JFE: permuting input channels permutes output channel blocks (cls invariant)") {
    EncoderConfig cfg = toy_config();
    EncoderWeights w = init_encoder(cfg);
    RngStream rng(3, 0);
    const std::size_t c = 3;
    MultiChannelImage img = random_image(c, cfg.image_size, rng);
    TokenBatch batch = tokenize(img, w);
    FeatureMap base = encode_jfe(batch, w);

    const std::size_t perm[3] = {2, 0, 1};
    TokenBatch permuted;
    permuted.tokens = Tensor::zeros(batch.tokens.shape);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < batch.tokens_per_channel(); ++i) {
            for (std::size_t j = 0; j < batch.dim(); ++j) {
                permuted.tokens.at(ch, i, j) = batch.tokens.at(perm[ch], i, j);
            }
        }
    }
    FeatureMap moved = encode_jfe(permuted, w);
    CHECK(max_abs_diff(moved.cls, base.cls) < 1e-9);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < base.tokens_per_channel(); ++i) {
            for (std::size_t j = 0; j < base.dim(); ++j) {
                CHECK(std::abs(moved.patch.at(ch, i, j) - base.patch.at(perm[ch], i, j)) < 1e-9);
            }
        }
    }
}

TEST_CASE("IFE: channels are encoded independently (bitwise)") {
    EncoderConfig cfg = toy_config();
    EncoderWeights w = init_encoder(cfg);
    RngStream rng(4, 0);
    MultiChannelImage img = random_image(4, cfg.image_size, rng);
    TokenBatch batch = tokenize(img, w);
    FeatureMap base = encode_ife(batch, w);

    MultiChannelImage zeroed = img;
    for (std::size_t y = 0; y < cfg.image_size; ++y) {
        for (std::size_t x = 0; x < cfg.image_size; ++x) zeroed.pixels.at(2, y, x) = 0.0;
    }
    FeatureMap changed = encode_ife(tokenize(zeroed, w), w);
    bool ch2_differs = false;
    for (std::size_t ch = 0; ch < 4; ++ch) {
        for (std::size_t i = 0; i < base.tokens_per_channel(); ++i) {
            for (std::size_t j = 0; j < base.dim(); ++j) {
                if (ch == 2) {
                    ch2_differs = ch2_differs ||
                                  (changed.patch.at(ch, i, j) != base.patch.at(ch, i, j));
                } else {
                    CHECK(changed.patch.at(ch, i, j) == base.patch.at(ch, i, j));
                }
            }
        }
        if (ch != 2) {
            for (std::size_t j = 0; j < base.dim(); ++j) {
                CHECK(changed.cls.at(ch, j) == base.cls.at(ch, j));
            }
        }
    }
    CHECK(ch2_differs);
}

TEST_CASE("IFE: single-channel batch equals the channel slice of the full batch") {
    EncoderConfig cfg = toy_config();
    EncoderWeights w = init_encoder(cfg);
    RngStream rng(5, 0);
    MultiChannelImage img = random_image(3, cfg.image_size, rng);
    TokenBatch batch = tokenize(img, w);
    FeatureMap full = encode_ife(batch, w);

    const std::size_t pick = 1;
    TokenBatch solo;
    solo.tokens = Tensor::zeros({1, batch.tokens_per_channel(), batch.dim()});
    for (std::size_t i = 0; i < batch.tokens_per_channel(); ++i) {
        for (std::size_t j = 0; j < batch.dim(); ++j) {
            solo.tokens.at(0, i, j) = batch.tokens.at(pick, i, j);
        }
    }
    FeatureMap one = encode_ife(solo, w);
    for (std::size_t i = 0; i < batch.tokens_per_channel(); ++i) {
        for (std::size_t j = 0; j < batch.dim(); ++j) {
            CHECK(one.patch.at(0, i, j) == full.patch.at(pick, i, j));
        }
    }
    for (std::size_t j = 0; j < batch.dim(); ++j) {
        CHECK(one.cls.at(0, j) == full.cls.at(pick, j));
    }
}

TEST_CASE("IFE: permuting token rows consistently across channels permutes output rows") {
    // Positional embeddings travel with their token row, so row-level
    // permutation of the assembled batch is exactly equivariant.
    EncoderConfig cfg = toy_config();
    EncoderWeights w = init_encoder(cfg);
    RngStream rng(6, 0);
    MultiChannelImage img = random_image(2, cfg.image_size, rng);
    TokenBatch batch = tokenize(img, w);
    const std::size_t n = batch.tokens_per_channel();
    const std::size_t perm[4] = {3, 1, 0, 2};
    REQUIRE(n == 4);

    TokenBatch swapped;
    swapped.tokens = Tensor::zeros(batch.tokens.shape);
    for (std::size_t ch = 0; ch < 2; ++ch) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < batch.dim(); ++j) {
                swapped.tokens.at(ch, i, j) = batch.tokens.at(ch, perm[i], j);
            }
        }
    }
    FeatureMap base = encode_ife(batch, w);
    FeatureMap moved = encode_ife(swapped, w);
    CHECK(max_abs_diff(moved.cls, base.cls) < 1e-9);
    for (std::size_t ch = 0; ch < 2; ++ch) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < batch.dim(); ++j) {
                CHECK(std::abs(moved.patch.at(ch, i, j) - base.patch.at(ch, perm[i], j)) < 1e-9);
            }
        }
    }
}

TEST_CASE("JFE rejects sequences beyond max_sequence") {
    EncoderConfig cfg = toy_config();
    cfg.max_sequence = 9; // 2 channels * 4 tokens + cls = 9 fits; 3 channels do not
    EncoderWeights w = init_encoder(cfg);
    RngStream rng(7, 0);
    TokenBatch ok = tokenize(random_image(2, cfg.image_size, rng), w);
    CHECK_NOTHROW(encode_jfe(ok, w));
    TokenBatch big = tokenize(random_image(3, cfg.image_size, rng), w);
    CHECK_THROWS_AS(encode_jfe(big, w), std::invalid_argument);
}

TEST_CASE("encoding names round-trip") {
    CHECK(encoding_from_name("jfe") == Encoding::JFE);
    CHECK(encoding_from_name("IFE") == Encoding::IFE);
    CHECK(encoding_name(Encoding::JFE) == std::string("jfe"));
    CHECK_THROWS_AS(encoding_from_name("both"), std::invalid_argument);
}
