#pragma once

#include "cap/image.hpp"
#include "cap/tensor.hpp"

#include <cstdint>
#include <vector>

namespace cap {

enum class Encoding : std::uint8_t { JFE = 0, IFE = 1 };

const char* encoding_name(Encoding mode);
Encoding encoding_from_name(const std::string& name);

struct EncoderConfig {
    std::size_t image_size = 32; // square
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;  // D, divisible by heads
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::uint64_t init_seed = 0;
    // Upper bound on the assembled self-attention sequence (1 + C*N for
    // JFE); guards against accidental quadratic blowups.
    std::size_t max_sequence = 4096;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t tokens_per_channel() const { return grid() * grid(); } // N

    void validate() const; // throws std::invalid_argument

    // Stable 64-bit digest of every field above; stamped into feature files
    // so a probe can refuse features from a different encoder.
    std::uint64_t config_hash() const;
};

// Frozen ViT weights. One single-channel patch projection and one positional
// table are shared by every channel; nothing here is ever trained.
struct EncoderWeights {
    struct Layer {
        Tensor ln1_gamma, ln1_beta; // 1 x D
        Tensor wq, wk, wv, wo;      // D x D
        Tensor bq, bk, bv, bo;      // 1 x D
        Tensor ln2_gamma, ln2_beta; // 1 x D
        Tensor w1, b1;              // D x (mlp_ratio*D), 1 x (mlp_ratio*D)
        Tensor w2, b2;              // (mlp_ratio*D) x D, 1 x D
    };

    EncoderConfig cfg;
    Tensor patch_proj;  // (patch_size^2) x D
    Tensor patch_bias;  // 1 x D
    Tensor pos;         // (N+1) x D, row 0 is the cls slot
    Tensor cls;         // 1 x D
    std::vector<Layer> layers;
    Tensor lnf_gamma, lnf_beta; // 1 x D

    // FNV-1a over all weight bytes in declaration order; used to prove the
    // encoder stayed frozen across a training run.
    std::uint64_t checksum() const;
};

// Pre-encoder token embeddings, positional information already added.
struct TokenBatch {
    Tensor tokens; // C x N x D
    std::size_t channels() const { return tokens.shape.at(0); }
    std::size_t tokens_per_channel() const { return tokens.shape.at(1); }
    std::size_t dim() const { return tokens.shape.at(2); }
};

// Fixed representation produced by the frozen encoder.
struct FeatureMap {
    Encoding mode = Encoding::JFE;
    Tensor patch; // C x N x D
    Tensor cls;   // JFE: 1 x D; IFE: C x D

    std::size_t channels() const { return patch.shape.at(0); }
    std::size_t tokens_per_channel() const { return patch.shape.at(1); }
    std::size_t dim() const { return patch.shape.at(2); }
};

// Deterministic truncated-normal init (std 0.02) from RngStream(init_seed).
// Norm scales start at 1, shifts and projection biases at 0.
EncoderWeights init_encoder(const EncoderConfig& cfg);

// Shared single-channel patch projection + shared positional table applied
// identically to every channel. Rejects images whose spatial size mismatches
// the encoder config and empty channel sets. Takes weights rather than a
// bare config so per-sample calls do not re-derive the frozen tensors.
TokenBatch tokenize(const MultiChannelImage& image, const EncoderWeights& w);

// One global cls token prepended to the channel-concatenated sequence; full
// self-attention over 1 + C*N tokens. Rejects sequences above
// cfg.max_sequence.
FeatureMap encode_jfe(const TokenBatch& batch, const EncoderWeights& w);

// Each channel's tokens plus its own cls copy encoded as an independent
// 1 + N sequence through the same weights.
FeatureMap encode_ife(const TokenBatch& batch, const EncoderWeights& w);

} // namespace cap
