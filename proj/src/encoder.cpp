#include "cap/encoder.hpp"

#include "cap/rng.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace cap {

namespace {

constexpr double kLnEps = 1e-6;

std::uint64_t fnv1a_bytes(const void* data, std::size_t len, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a_u64(std::uint64_t v, std::uint64_t h) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    return fnv1a_bytes(buf, 8, h);
}

std::uint64_t fnv1a_tensor(const Tensor& t, std::uint64_t h) {
    h = fnv1a_u64(t.numel(), h);
    return fnv1a_bytes(t.data.data(), t.data.size() * sizeof(double), h);
}

Tensor trunc_normal_tensor(std::vector<std::size_t> shape, RngStream stream, double stddev) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& x : t.data) x = stream.next_trunc_normal(stddev);
    return t;
}

// Row-wise layer norm over (S, D).
Tensor ln_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    const std::size_t s = x.rows(), d = x.cols();
    Tensor out = Tensor::zeros({s, d});
    for (std::size_t i = 0; i < s; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        for (std::size_t j = 0; j < d; ++j) {
            out.at(i, j) = (x.at(i, j) - mean) * inv * gamma.at(0, j) + beta.at(0, j);
        }
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor out = matmul(x, w);
    for (std::size_t i = 0; i < out.rows(); ++i) {
        for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) += b.at(0, j);
    }
    return out;
}

// Multi-head self-attention over a pre-normalized (S, D) sequence.
Tensor self_attention(const Tensor& xn, const EncoderWeights::Layer& l, std::size_t heads) {
    const std::size_t s = xn.rows(), d = xn.cols();
    const std::size_t hd = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
    const Tensor q = linear(xn, l.wq, l.bq);
    const Tensor k = linear(xn, l.wk, l.bk);
    const Tensor v = linear(xn, l.wv, l.bv);
    Tensor mixed = Tensor::zeros({s, d});
    std::vector<double> scores(s);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < s; ++i) {
            double mx = -1e300;
            for (std::size_t j = 0; j < s; ++j) {
                double dot = 0.0;
                for (std::size_t t = 0; t < hd; ++t) {
                    dot += q.at(i, off + t) * k.at(j, off + t);
                }
                scores[j] = dot * inv;
                mx = std::max(mx, scores[j]);
            }
            double denom = 0.0;
            for (std::size_t j = 0; j < s; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                denom += scores[j];
            }
            for (std::size_t j = 0; j < s; ++j) {
                const double a = scores[j] / denom;
                for (std::size_t t = 0; t < hd; ++t) {
                    mixed.at(i, off + t) += a * v.at(j, off + t);
                }
            }
        }
    }
    return linear(mixed, l.wo, l.bo);
}

// Pre-norm transformer over an assembled (S, D) sequence, final norm applied.
Tensor encode_sequence(Tensor x, const EncoderWeights& w) {
    for (const auto& l : w.layers) {
        const Tensor attn = self_attention(ln_rows(x, l.ln1_gamma, l.ln1_beta), l, w.cfg.heads);
        for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += attn.data[i];
        const Tensor xn = ln_rows(x, l.ln2_gamma, l.ln2_beta);
        Tensor h1 = linear(xn, l.w1, l.b1);
        for (double& v : h1.data) v = gelu(v);
        const Tensor mlp = linear(h1, l.w2, l.b2);
        for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] += mlp.data[i];
    }
    return ln_rows(x, w.lnf_gamma, w.lnf_beta);
}

} // namespace

const char* encoding_name(Encoding mode) {
    return mode == Encoding::JFE ? "jfe" : "ife";
}

Encoding encoding_from_name(const std::string& name) {
    if (name == "jfe" || name == "JFE") return Encoding::JFE;
    if (name == "ife" || name == "IFE") return Encoding::IFE;
    throw std::invalid_argument("unknown encoding '" + name + "' (expected jfe or ife)");
}

void EncoderConfig::validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
        throw std::invalid_argument("encoder config: image_size must be a positive multiple of patch_size");
    }
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
        throw std::invalid_argument("encoder config: embed_dim must be a positive multiple of heads");
    }
    if (depth == 0 || mlp_ratio == 0) {
        throw std::invalid_argument("encoder config: depth and mlp_ratio must be positive");
    }
    if (max_sequence < 1 + tokens_per_channel()) {
        throw std::invalid_argument("encoder config: max_sequence below a single-channel sequence");
    }
}

std::uint64_t EncoderConfig::config_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::uint64_t v : {static_cast<std::uint64_t>(image_size),
                            static_cast<std::uint64_t>(patch_size),
                            static_cast<std::uint64_t>(embed_dim),
                            static_cast<std::uint64_t>(depth),
                            static_cast<std::uint64_t>(heads),
                            static_cast<std::uint64_t>(mlp_ratio), init_seed}) {
        h = fnv1a_u64(v, h);
    }
    return h;
}

std::uint64_t EncoderWeights::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    h = fnv1a_tensor(patch_proj, h);
    h = fnv1a_tensor(patch_bias, h);
    h = fnv1a_tensor(pos, h);
    h = fnv1a_tensor(cls, h);
    for (const auto& l : layers) {
        for (const Tensor* t : {&l.ln1_gamma, &l.ln1_beta, &l.wq, &l.wk, &l.wv, &l.wo,
                                &l.bq, &l.bk, &l.bv, &l.bo, &l.ln2_gamma, &l.ln2_beta,
                                &l.w1, &l.b1, &l.w2, &l.b2}) {
            h = fnv1a_tensor(*t, h);
        }
    }
    h = fnv1a_tensor(lnf_gamma, h);
    h = fnv1a_tensor(lnf_beta, h);
    return h;
}

EncoderWeights init_encoder(const EncoderConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.embed_dim;
    const std::size_t n = cfg.tokens_per_channel();
    const std::size_t p2 = cfg.patch_size * cfg.patch_size;
    const std::size_t hidden = cfg.mlp_ratio * d;
    constexpr double kStd = 0.02;

    RngStream root(cfg.init_seed);
    std::uint64_t next_stream = 0;
    auto draw = [&](std::vector<std::size_t> shape) {
        return trunc_normal_tensor(std::move(shape), root.split(next_stream++), kStd);
    };

    EncoderWeights w;
    w.cfg = cfg;
    w.patch_proj = draw({p2, d});
    w.patch_bias = Tensor::zeros({1, d});
    w.pos = draw({n + 1, d});
    w.cls = draw({1, d});
    w.layers.resize(cfg.depth);
    for (auto& l : w.layers) {
        l.ln1_gamma = Tensor::full({1, d}, 1.0);
        l.ln1_beta = Tensor::zeros({1, d});
        l.wq = draw({d, d});
        l.wk = draw({d, d});
        l.wv = draw({d, d});
        l.wo = draw({d, d});
        l.bq = Tensor::zeros({1, d});
        l.bk = Tensor::zeros({1, d});
        l.bv = Tensor::zeros({1, d});
        l.bo = Tensor::zeros({1, d});
        l.ln2_gamma = Tensor::full({1, d}, 1.0);
        l.ln2_beta = Tensor::zeros({1, d});
        l.w1 = draw({d, hidden});
        l.b1 = Tensor::zeros({1, hidden});
        l.w2 = draw({hidden, d});
        l.b2 = Tensor::zeros({1, d});
    }
    w.lnf_gamma = Tensor::full({1, d}, 1.0);
    w.lnf_beta = Tensor::zeros({1, d});
    return w;
}

TokenBatch tokenize(const MultiChannelImage& image, const EncoderWeights& w) {
    const EncoderConfig& cfg = w.cfg;
    if (image.pixels.rank() != 3) {
        throw std::invalid_argument("tokenize: pixels must be C x H x W");
    }
    const std::size_t c = image.channels();
    if (c == 0) throw std::invalid_argument("tokenize: image has no channels");
    if (image.height() != cfg.image_size || image.width() != cfg.image_size) {
        throw std::invalid_argument("tokenize: image size does not match encoder config");
    }
    const std::size_t g = cfg.grid();
    const std::size_t n = cfg.tokens_per_channel();
    const std::size_t d = cfg.embed_dim;
    const std::size_t ps = cfg.patch_size;

    TokenBatch batch;
    batch.tokens = Tensor::zeros({c, n, d});
    std::vector<double> patch(ps * ps);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t py = 0; py < g; ++py) {
            for (std::size_t px = 0; px < g; ++px) {
                const std::size_t token = py * g + px;
                for (std::size_t y = 0; y < ps; ++y) {
                    for (std::size_t x = 0; x < ps; ++x) {
                        patch[y * ps + x] = image.pixels.at(ch, py * ps + y, px * ps + x);
                    }
                }
                for (std::size_t j = 0; j < d; ++j) {
                    double acc = w.patch_bias.at(0, j) + w.pos.at(token + 1, j);
                    for (std::size_t t = 0; t < ps * ps; ++t) {
                        acc += patch[t] * w.patch_proj.at(t, j);
                    }
                    batch.tokens.at(ch, token, j) = acc;
                }
            }
        }
    }
    return batch;
}

FeatureMap encode_jfe(const TokenBatch& batch, const EncoderWeights& w) {
    const std::size_t c = batch.channels();
    const std::size_t n = batch.tokens_per_channel();
    const std::size_t d = batch.dim();
    if (c == 0) throw std::invalid_argument("encode_jfe: empty token batch");
    if (n != w.cfg.tokens_per_channel() || d != w.cfg.embed_dim) {
        throw std::invalid_argument("encode_jfe: token shape does not match weights");
    }
    const std::size_t s = 1 + c * n;
    if (s > w.cfg.max_sequence) {
        throw std::invalid_argument("encode_jfe: sequence length " + std::to_string(s) +
                                    " exceeds max_sequence " + std::to_string(w.cfg.max_sequence));
    }
    Tensor seq = Tensor::zeros({s, d});
    for (std::size_t j = 0; j < d; ++j) seq.at(0, j) = w.cls.at(0, j) + w.pos.at(0, j);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                seq.at(1 + ch * n + i, j) = batch.tokens.at(ch, i, j);
            }
        }
    }
    const Tensor enc = encode_sequence(std::move(seq), w);
    FeatureMap out;
    out.mode = Encoding::JFE;
    out.cls = Tensor::zeros({1, d});
    for (std::size_t j = 0; j < d; ++j) out.cls.at(0, j) = enc.at(0, j);
    out.patch = Tensor::zeros({c, n, d});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                out.patch.at(ch, i, j) = enc.at(1 + ch * n + i, j);
            }
        }
    }
    return out;
}

FeatureMap encode_ife(const TokenBatch& batch, const EncoderWeights& w) {
    const std::size_t c = batch.channels();
    const std::size_t n = batch.tokens_per_channel();
    const std::size_t d = batch.dim();
    if (c == 0) throw std::invalid_argument("encode_ife: empty token batch");
    if (n != w.cfg.tokens_per_channel() || d != w.cfg.embed_dim) {
        throw std::invalid_argument("encode_ife: token shape does not match weights");
    }
    FeatureMap out;
    out.mode = Encoding::IFE;
    out.cls = Tensor::zeros({c, d});
    out.patch = Tensor::zeros({c, n, d});
    for (std::size_t ch = 0; ch < c; ++ch) {
        Tensor seq = Tensor::zeros({1 + n, d});
        for (std::size_t j = 0; j < d; ++j) seq.at(0, j) = w.cls.at(0, j) + w.pos.at(0, j);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) seq.at(1 + i, j) = batch.tokens.at(ch, i, j);
        }
        const Tensor enc = encode_sequence(std::move(seq), w);
        for (std::size_t j = 0; j < d; ++j) out.cls.at(ch, j) = enc.at(0, j);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < d; ++j) out.patch.at(ch, i, j) = enc.at(1 + i, j);
        }
    }
    return out;
}

} // namespace cap
