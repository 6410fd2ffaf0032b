#include "cap/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace cap {

namespace {

double cosine(const Tensor& m, std::size_t row_a, std::size_t row_b) {
    const std::size_t d = m.shape.back();
    double dot = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < d; ++k) {
        const double a = m.data[row_a * d + k];
        const double b = m.data[row_b * d + k];
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if (na == 0.0 || nb == 0.0)
        throw std::invalid_argument("cosine undefined: channel " +
                                    std::to_string(na == 0.0 ? row_a : row_b) +
                                    " is the zero vector");
    return dot / std::sqrt(na * nb);
}

std::ofstream open_csv(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    return out;
}

} // namespace

double mean_pairwise_channel_cosine(const Tensor& vectors) {
    if (vectors.shape.size() != 2)
        throw std::invalid_argument("channel cosine wants a C x D matrix, got " +
                                    shape_str(vectors));
    const std::size_t c = vectors.shape[0];
    if (c < 2) throw std::invalid_argument("channel cosine needs C >= 2 channels");
    double sum = 0;
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = i + 1; j < c; ++j) sum += cosine(vectors, i, j);
    return sum / (static_cast<double>(c) * (c - 1) / 2.0);
}

double instance_diversity(const FeatureMap& features, TokenSource source,
                          double filter_fraction) {
    const std::size_t c = features.channels();
    if (c < 2) throw std::invalid_argument("instance diversity needs C >= 2 channels");

    if (source == TokenSource::cls) {
        if (features.mode != Encoding::IFE)
            throw std::invalid_argument(
                "cls diversity is defined only for IFE features (JFE has one global cls)");
        return mean_pairwise_channel_cosine(features.cls);
    }

    if (!(filter_fraction >= 0.0 && filter_fraction <= 1.0))
        throw std::invalid_argument("filter_fraction must lie in [0, 1], got " +
                                    std::to_string(filter_fraction));
    const std::size_t n = features.tokens_per_channel();
    const std::size_t d = features.dim();

    std::vector<double> per_position(n);
    Tensor slice = Tensor::zeros({c, d});
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t k = 0; k < d; ++k) slice.data[ch * d + k] =
                features.patch.at(ch, p, k);
        per_position[p] = mean_pairwise_channel_cosine(slice);
    }

    const std::size_t dropped =
        static_cast<std::size_t>(std::floor(static_cast<double>(n) * filter_fraction));
    const std::size_t kept = n - dropped;
    if (kept == 0)
        throw std::invalid_argument("filter_fraction " + std::to_string(filter_fraction) +
                                    " removes all " + std::to_string(n) + " positions");

    // Most similar positions are dropped; ascending sort keeps the `kept`
    // least similar ones at the front.
    std::sort(per_position.begin(), per_position.end());
    return std::accumulate(per_position.begin(),
                           per_position.begin() + static_cast<std::ptrdiff_t>(kept), 0.0) /
           static_cast<double>(kept);
}

CostReport encoder_flops(const EncoderConfig& cfg, std::size_t channels, Encoding mode) {
    cfg.validate();
    if (channels == 0) throw std::invalid_argument("encoder_flops: channels must be positive");
    const std::uint64_t n = cfg.tokens_per_channel();
    const std::uint64_t d = cfg.embed_dim;
    const std::uint64_t passes = mode == Encoding::JFE ? 1 : channels;
    const std::uint64_t s = mode == Encoding::JFE ? 1 + channels * n : 1 + n;

    const std::uint64_t attn_linear = 4 * s * d * d;
    const std::uint64_t attn_quadratic = 2 * s * s * d;
    const std::uint64_t mlp = 2 * s * d * (cfg.mlp_ratio * d);
    CostReport r;
    r.component = mode == Encoding::JFE ? "encoder-JFE" : "encoder-IFE";
    r.arch = "vit";
    r.channels = channels;
    r.tokens = n;
    r.dim = d;
    r.depth = cfg.depth;
    r.heads = cfg.heads;
    r.flops = passes * cfg.depth * (attn_linear + attn_quadratic + mlp);
    r.params = encoder_param_count(cfg);
    return r;
}

std::uint64_t encoder_attention_quadratic_flops(const EncoderConfig& cfg, std::size_t channels,
                                                Encoding mode) {
    cfg.validate();
    if (channels == 0) throw std::invalid_argument("encoder_flops: channels must be positive");
    const std::uint64_t n = cfg.tokens_per_channel();
    const std::uint64_t d = cfg.embed_dim;
    const std::uint64_t passes = mode == Encoding::JFE ? 1 : channels;
    const std::uint64_t s = mode == Encoding::JFE ? 1 + channels * n : 1 + n;
    return passes * cfg.depth * 2 * s * s * d;
}

std::uint64_t encoder_param_count(const EncoderConfig& cfg) {
    cfg.validate();
    const std::uint64_t d = cfg.embed_dim;
    const std::uint64_t p2 = cfg.patch_size * cfg.patch_size;
    const std::uint64_t n = cfg.tokens_per_channel();
    const std::uint64_t r = cfg.mlp_ratio;
    // patch projection + bias, positional table (cls slot included), cls,
    // per layer: 2 norms (2D each) + 4 projections (D^2+D each) + MLP
    // (D*rD + rD + rD*D + D), final norm.
    const std::uint64_t per_layer = (4 + 2 * r) * d * d + (9 + r) * d;
    return p2 * d + d + (n + 1) * d + d + cfg.depth * per_layer + 2 * d;
}

CostReport pooler_flops(PoolArch arch, PoolStrategy strategy, std::size_t channels,
                        std::size_t tokens, std::size_t dim, std::size_t heads,
                        std::size_t queries, std::size_t prototypes) {
    if (channels == 0 || tokens == 0)
        throw std::invalid_argument("pooler_flops: channels and tokens must be positive");
    PoolerConfig pc{arch, dim, heads, queries, prototypes};
    pc.validate();

    const std::uint64_t d = dim;
    // Per-row rate r(D): every arch touches each input row a fixed number of
    // times, so cost is r * M. Row-independent work (query-side projections,
    // feed-forward on the single pooled row, output projections) is excluded
    // from the model, which is what makes it exactly linear in M.
    std::uint64_t rate = 0;
    switch (arch) {
    case PoolArch::mean:
        rate = d; // one accumulate per element
        break;
    case PoolArch::simpool:
        // key projection 2D^2, query-key score 2D, softmax ~4, weighted sum 2D
        rate = 2 * d * d + 4 * d + 4;
        break;
    case PoolArch::abmilp:
        // V and U projections to D/2 (D^2 each), tanh/sigmoid/gate 3D/2,
        // score dot D, softmax ~4, weighted sum 2D
        rate = 2 * d * d + 9 * d / 2 + 4;
        break;
    case PoolArch::ep:
        // shared key projection 2D^2; per query: score 2D + softmax 4 +
        // weighted sum 2D
        rate = 2 * d * d + static_cast<std::uint64_t>(queries) * (4 * d + 4);
        break;
    case PoolArch::mab:
    case PoolArch::mhca:
        // key+value projections with bias 2(2D^2+D), per-head scores 2D,
        // softmax ~4 per head, value mixing 2D
        rate = 4 * d * d + 6 * d + 4 * static_cast<std::uint64_t>(heads);
        break;
    case PoolArch::protobin:
        // per prototype: score 2D + softmax 4 + weighted sum 2D
        rate = static_cast<std::uint64_t>(prototypes) * (4 * d + 4);
        break;
    }

    const std::uint64_t c = channels, n = tokens;
    CostReport r;
    r.component = strategy == PoolStrategy::JAP ? "pooler-JAP" : "pooler-DCP";
    r.arch = pool_arch_name(arch);
    r.channels = c;
    r.tokens = n;
    r.dim = d;
    r.heads = heads;
    r.flops = strategy == PoolStrategy::JAP ? rate * (c * n) : c * (rate * n) + rate * c;
    r.params = param_count(init_pooler(arch, dim, 0, heads, queries, prototypes));
    return r;
}

void write_fig2_csv(const std::string& path, const std::vector<DiversityReport>& reports) {
    auto out = open_csv(path);
    out << "dataset,mean_sim,n_instances\n";
    for (const auto& r : reports)
        out << r.dataset << "," << r.mean_similarity << "," << r.instances << "\n";
}

void write_fig5_csv(const std::string& path, const std::vector<DiversityReport>& reports) {
    auto out = open_csv(path);
    out << "dataset,encoding,filter_fraction,mean_sim,n_instances\n";
    for (const auto& r : reports)
        out << r.dataset << "," << encoding_name(r.mode) << "," << r.filter_fraction << ","
            << r.mean_similarity << "," << r.instances << "\n";
}

void write_fig6_csv(const std::string& path, const std::vector<CostReport>& reports) {
    auto out = open_csv(path);
    write_fig6_csv(out, reports);
}

void write_fig6_csv(std::ostream& os, const std::vector<CostReport>& reports) {
    os << "arch,strategy,C,N,flops\n";
    for (const auto& r : reports) {
        const std::string strategy = r.component.find("JAP") != std::string::npos  ? "JAP"
                                     : r.component.find("DCP") != std::string::npos ? "DCP"
                                                                                    : r.component;
        os << r.arch << "," << strategy << "," << r.channels << "," << r.tokens << ","
           << r.flops << "\n";
    }
}

double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("spearman: length mismatch");
    if (xs.size() < 2) throw std::invalid_argument("spearman: need at least two points");
    auto ranks = [](const std::vector<double>& v) {
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            double less = 0, equal = 0;
            for (double w : v) {
                if (w < v[i]) ++less;
                if (w == v[i]) ++equal;
            }
            r[i] = less + (equal + 1) / 2;
        }
        return r;
    };
    const std::vector<double> rx = ranks(xs), ry = ranks(ys);
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double num = 0, vx = 0, vy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        num += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if (vx == 0.0 || vy == 0.0)
        throw std::invalid_argument("spearman: a sequence is constant, rank correlation undefined");
    return num / std::sqrt(vx * vy);
}

} // namespace cap
