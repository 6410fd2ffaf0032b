#include "cap/pooling.hpp"

#include "cap/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cap {

namespace {

constexpr double kLnEps = 1e-5;

Tensor trunc_normal_tensor(std::vector<std::size_t> shape, RngStream stream, double stddev) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& x : t.data) x = stream.next_trunc_normal(stddev);
    return t;
}

void check_feats(const Graph& g, const PoolerConfig& cfg, Graph::NodeId feats, const char* op) {
    const Tensor& v = g.value(feats);
    if (v.rank() != 2 || v.cols() != cfg.dim) {
        throw std::invalid_argument(std::string(op) + ": expected M x " +
                                    std::to_string(cfg.dim) + " features, got " + shape_str(v));
    }
    if (v.rows() == 0) {
        throw std::invalid_argument(std::string(op) + ": empty feature set (M = 0)");
    }
    if (!v.all_finite()) {
        throw std::invalid_argument(std::string(op) + ": non-finite feature value");
    }
}

// Weighted sum of raw rows: attention (M, q) and rows (M, D) -> (q, D).
Graph::NodeId weighted_rows(Graph& g, Graph::NodeId attn, Graph::NodeId rows) {
    return g.matmul_tn(attn, rows);
}

Graph::NodeId build_simpool(Graph& g, const PoolerConfig& cfg,
                            const std::vector<Graph::NodeId>& p, Graph::NodeId x) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    auto q = g.matmul(g.row_mean(x), p[0]);          // (1,D) query from the row mean
    auto keys = g.matmul(x, p[1]);                   // (M,D)
    auto scores = g.scale(g.matmul_nt(keys, q), inv); // (M,1)
    auto attn = g.softmax_cols(scores);
    return weighted_rows(g, attn, x); // (1,D), convex combination of raw rows
}

Graph::NodeId build_abmilp(Graph& g, const PoolerConfig& cfg,
                           const std::vector<Graph::NodeId>& p, Graph::NodeId x) {
    (void)cfg;
    auto gate_a = g.tanh_(g.matmul(x, p[0]));    // (M, D/2)
    auto gate_b = g.sigmoid_(g.matmul(x, p[1])); // (M, D/2)
    auto scores = g.matmul(g.mul(gate_a, gate_b), p[2]); // (M,1)
    auto attn = g.softmax_cols(scores);
    return weighted_rows(g, attn, x);
}

Graph::NodeId build_ep(Graph& g, const PoolerConfig& cfg,
                       const std::vector<Graph::NodeId>& p, Graph::NodeId x) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    auto keys = g.matmul(x, p[1]);                      // shared key projection
    auto scores = g.scale(g.matmul_nt(keys, p[0]), inv); // (M, k)
    auto attn = g.softmax_cols(scores);
    auto per_query = weighted_rows(g, attn, x); // (k, D)
    return g.row_mean(per_query);
}

Graph::NodeId build_mab(Graph& g, const PoolerConfig& cfg,
                        const std::vector<Graph::NodeId>& p, Graph::NodeId x) {
    // p: q, wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, ln2_g, ln2_b,
    //    w1, b1, w2, b2
    auto qp = g.add(g.matmul(p[0], p[1]), p[2]);       // (1,D)
    auto keys = g.add_rowvec(g.matmul(x, p[3]), p[4]); // (M,D)
    auto vals = g.add_rowvec(g.matmul(x, p[5]), p[6]);
    auto attn = g.softmax_cols(g.heads_dot(keys, qp, cfg.heads));
    auto mixed = g.heads_mix(attn, vals);              // (1,D)
    auto attn_out = g.add(g.matmul(mixed, p[7]), p[8]);
    auto h = g.layer_norm_rows(g.add(p[0], attn_out), p[9], p[10], kLnEps);
    auto ff = g.add(g.matmul(g.relu_(g.add(g.matmul(h, p[13]), p[14])), p[15]), p[16]);
    return g.layer_norm_rows(g.add(h, ff), p[11], p[12], kLnEps);
}

Graph::NodeId build_mhca(Graph& g, const PoolerConfig& cfg,
                         const std::vector<Graph::NodeId>& p, Graph::NodeId x) {
    // p: q, wk, bk, wv, bv, wo, bo — the latent query is free (no projection).
    auto keys = g.add_rowvec(g.matmul(x, p[1]), p[2]);
    auto vals = g.add_rowvec(g.matmul(x, p[3]), p[4]);
    auto attn = g.softmax_cols(g.heads_dot(keys, p[0], cfg.heads));
    auto mixed = g.heads_mix(attn, vals);
    return g.add(g.matmul(mixed, p[5]), p[6]);
}

Graph::NodeId build_protobin(Graph& g, const PoolerConfig& cfg,
                             const std::vector<Graph::NodeId>& p, Graph::NodeId x) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    auto scores = g.scale(g.matmul_nt(x, p[0]), inv); // (M, P)
    auto attn = g.softmax_cols(scores);
    auto per_proto = weighted_rows(g, attn, x); // (P, D)
    return g.row_mean(per_proto);
}

} // namespace

const std::vector<PoolArch>& all_pool_archs() {
    static const std::vector<PoolArch> archs = {
        PoolArch::mean,    PoolArch::simpool, PoolArch::abmilp, PoolArch::ep,
        PoolArch::mab,     PoolArch::mhca,    PoolArch::protobin,
    };
    return archs;
}

const char* pool_arch_name(PoolArch arch) {
    switch (arch) {
        case PoolArch::mean: return "mean";
        case PoolArch::simpool: return "simpool";
        case PoolArch::abmilp: return "abmilp";
        case PoolArch::ep: return "ep";
        case PoolArch::mab: return "mab";
        case PoolArch::mhca: return "mhca";
        case PoolArch::protobin: return "protobin";
    }
    throw std::invalid_argument("unknown pooler arch value");
}

PoolArch pool_arch_from_name(const std::string& name) {
    for (PoolArch a : all_pool_archs()) {
        if (name == pool_arch_name(a)) return a;
    }
    throw std::invalid_argument("unknown pooler arch '" + name + "'");
}

const char* strategy_name(PoolStrategy s) {
    return s == PoolStrategy::JAP ? "jap" : "dcp";
}

PoolStrategy strategy_from_name(const std::string& name) {
    if (name == "jap" || name == "JAP") return PoolStrategy::JAP;
    if (name == "dcp" || name == "DCP") return PoolStrategy::DCP;
    throw std::invalid_argument("unknown pooling strategy '" + name + "' (expected jap or dcp)");
}

void PoolerConfig::validate() const {
    if (dim == 0) throw std::invalid_argument("pooler config: dim must be positive");
    if (arch == PoolArch::mab || arch == PoolArch::mhca) {
        if (heads == 0 || dim % heads != 0) {
            throw std::invalid_argument("pooler config: dim must be a positive multiple of heads");
        }
    }
    if (arch == PoolArch::abmilp && dim % 2 != 0) {
        throw std::invalid_argument("pooler config: abmilp needs even dim (hidden width D/2)");
    }
    if (arch == PoolArch::ep && queries == 0) {
        throw std::invalid_argument("pooler config: ep needs at least one query");
    }
    if (arch == PoolArch::protobin && prototypes == 0) {
        throw std::invalid_argument("pooler config: protobin needs at least one prototype");
    }
}

Pooler init_pooler(PoolArch arch, std::size_t dim, std::uint64_t seed, std::size_t heads,
                   std::size_t queries, std::size_t prototypes) {
    Pooler p;
    p.cfg = PoolerConfig{arch, dim, heads, queries, prototypes};
    p.cfg.validate();

    RngStream root(seed);
    std::uint64_t next_stream = 0;
    auto draw = [&](std::vector<std::size_t> shape) {
        return trunc_normal_tensor(std::move(shape), root.split(next_stream++), 0.02);
    };
    const std::size_t d = dim;
    switch (arch) {
        case PoolArch::mean:
            break;
        case PoolArch::simpool:
            p.params.add("wq", draw({d, d}));
            p.params.add("wk", draw({d, d}));
            break;
        case PoolArch::abmilp: {
            const std::size_t h = d / 2;
            p.params.add("v", draw({d, h}));
            p.params.add("u", draw({d, h}));
            p.params.add("w", draw({h, 1}));
            break;
        }
        case PoolArch::ep:
            p.params.add("queries", draw({queries, d}));
            p.params.add("wk", draw({d, d}));
            break;
        case PoolArch::mab:
            p.params.add("seed_q", draw({1, d}));
            p.params.add("wq", draw({d, d}));
            p.params.add("bq", Tensor::zeros({1, d}));
            p.params.add("wk", draw({d, d}));
            p.params.add("bk", Tensor::zeros({1, d}));
            p.params.add("wv", draw({d, d}));
            p.params.add("bv", Tensor::zeros({1, d}));
            p.params.add("wo", draw({d, d}));
            p.params.add("bo", Tensor::zeros({1, d}));
            p.params.add("ln1_gamma", Tensor::full({1, d}, 1.0));
            p.params.add("ln1_beta", Tensor::zeros({1, d}));
            p.params.add("ln2_gamma", Tensor::full({1, d}, 1.0));
            p.params.add("ln2_beta", Tensor::zeros({1, d}));
            p.params.add("w1", draw({d, 2 * d}));
            p.params.add("b1", Tensor::zeros({1, 2 * d}));
            p.params.add("w2", draw({2 * d, d}));
            p.params.add("b2", Tensor::zeros({1, d}));
            break;
        case PoolArch::mhca:
            p.params.add("latent_q", draw({1, d}));
            p.params.add("wk", draw({d, d}));
            p.params.add("bk", Tensor::zeros({1, d}));
            p.params.add("wv", draw({d, d}));
            p.params.add("bv", Tensor::zeros({1, d}));
            p.params.add("wo", draw({d, d}));
            p.params.add("bo", Tensor::zeros({1, d}));
            break;
        case PoolArch::protobin:
            p.params.add("prototypes", draw({prototypes, d}));
            break;
    }
    return p;
}

std::size_t param_count(const Pooler& p) { return p.params.total_scalars(); }

std::vector<Graph::NodeId> register_params(Graph& g, const ParamSet& ps, bool requires_grad) {
    std::vector<Graph::NodeId> ids;
    ids.reserve(ps.size());
    for (const auto& t : ps.values) ids.push_back(g.input(t, requires_grad));
    return ids;
}

Graph::NodeId build_pool(Graph& g, const PoolerConfig& cfg,
                         const std::vector<Graph::NodeId>& param_ids, Graph::NodeId feats) {
    cfg.validate();
    check_feats(g, cfg, feats, "pool");
    switch (cfg.arch) {
        case PoolArch::mean: return g.row_mean(feats);
        case PoolArch::simpool: return build_simpool(g, cfg, param_ids, feats);
        case PoolArch::abmilp: return build_abmilp(g, cfg, param_ids, feats);
        case PoolArch::ep: return build_ep(g, cfg, param_ids, feats);
        case PoolArch::mab: return build_mab(g, cfg, param_ids, feats);
        case PoolArch::mhca: return build_mhca(g, cfg, param_ids, feats);
        case PoolArch::protobin: return build_protobin(g, cfg, param_ids, feats);
    }
    throw std::invalid_argument("unknown pooler arch value");
}

namespace {

void check_x3(const Tensor& x, const char* op) {
    if (x.rank() != 3 || x.shape[0] == 0 || x.shape[1] == 0) {
        throw std::invalid_argument(std::string(op) + ": expected nonempty C x N x D input, got " +
                                    shape_str(x));
    }
}

} // namespace

Graph::NodeId build_jap(Graph& g, const PoolerConfig& cfg,
                        const std::vector<Graph::NodeId>& param_ids, const Tensor& X) {
    check_x3(X, "jap_forward");
    // Channel-major row-major layout makes the Eq. 7 concatenation a reshape.
    Tensor flat = X.reshaped({X.shape[0] * X.shape[1], X.shape[2]});
    auto rows = g.input(std::move(flat), false);
    return build_pool(g, cfg, param_ids, rows);
}

Graph::NodeId build_dcp(Graph& g, const PoolerConfig& cfg,
                        const std::vector<Graph::NodeId>& param_ids, const Tensor& X) {
    check_x3(X, "dcp_forward");
    const std::size_t c = X.shape[0], n = X.shape[1], d = X.shape[2];
    std::vector<Graph::NodeId> locals;
    locals.reserve(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        Tensor slice = Tensor::zeros({n, d});
        std::copy(X.data.begin() + ch * n * d, X.data.begin() + (ch + 1) * n * d,
                  slice.data.begin());
        auto rows = g.input(std::move(slice), false);
        locals.push_back(build_pool(g, cfg, param_ids, rows));
    }
    // Second pass sees exactly C rows (Eq. 10) through the same parameters.
    auto z_local = g.concat_rows(locals);
    return build_pool(g, cfg, param_ids, z_local);
}

Tensor pool(const Pooler& p, const Tensor& feats) {
    Graph g;
    auto ids = register_params(g, p.params, false);
    auto out = build_pool(g, p.cfg, ids, g.input(feats, false));
    return g.value(out);
}

Tensor jap_forward(const Pooler& p, const Tensor& X) {
    Graph g;
    auto ids = register_params(g, p.params, false);
    return g.value(build_jap(g, p.cfg, ids, X));
}

Tensor dcp_forward(const Pooler& p, const Tensor& X) {
    Graph g;
    auto ids = register_params(g, p.params, false);
    return g.value(build_dcp(g, p.cfg, ids, X));
}

} // namespace cap
