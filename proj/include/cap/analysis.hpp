#pragma once

#include "cap/encoder.hpp"
#include "cap/pooling.hpp"
#include "cap/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace cap {

// ---------------------------------------------------------------------------
// Inter-channel diversity
// ---------------------------------------------------------------------------

// Average cosine similarity over all unordered channel pairs of a C x D
// matrix. Rejects C < 2 and zero rows (cosine undefined).
double mean_pairwise_channel_cosine(const Tensor& vectors);

enum class TokenSource : std::uint8_t { cls = 0, patch = 1 };

// Per-instance inter-channel similarity.
//   patch: score each spatial position by the mean pairwise cosine of its C
//          channel vectors, drop the floor(N * filter_fraction) most similar
//          positions, average the rest.
//   cls:   mean pairwise cosine of the per-channel cls rows; defined only
//          for IFE features (JFE has a single global cls).
// filter_fraction applies to the patch variant only and must leave at least
// one position.
double instance_diversity(const FeatureMap& features, TokenSource source,
                          double filter_fraction = 0.75);

struct DiversityReport {
    std::string dataset;
    Encoding mode = Encoding::IFE;
    TokenSource source = TokenSource::cls;
    double filter_fraction = 0.0;
    double mean_similarity = 0.0;
    std::size_t instances = 0;
};

// ---------------------------------------------------------------------------
// Analytic cost model (counts, not measurements; multiply-accumulate = 2)
// ---------------------------------------------------------------------------

struct CostReport {
    std::string component; // "encoder-JFE" | "encoder-IFE" | "pooler-JAP" | "pooler-DCP"
    std::string arch;      // "vit" or the pooler arch name
    std::size_t channels = 0;
    std::size_t tokens = 0; // N, per channel
    std::size_t dim = 0;
    std::size_t depth = 0;
    std::size_t heads = 0;
    std::uint64_t flops = 0;
    std::uint64_t params = 0;
};

// Transformer forward cost. Per layer and per sequence of length S:
//   attention = 4*S*D^2 (q,k,v,o projections) + 2*S^2*D (scores + mixing)
//   mlp       = 2*S*D*(mlp_ratio*D)            (two linear maps)
// JFE runs one pass at S = 1 + C*N; IFE runs C passes at S = 1 + N.
// Embedding/norm/softmax terms are excluded from the model by design.
CostReport encoder_flops(const EncoderConfig& cfg, std::size_t channels, Encoding mode);

// The quadratic attention term alone (2*S^2*D summed over layers and
// passes); the JFE/IFE ratio of this term is the O(C^2 N^2) vs O(C N^2)
// comparison.
std::uint64_t encoder_attention_quadratic_flops(const EncoderConfig& cfg, std::size_t channels,
                                                Encoding mode);

// Closed-form learnable-scalar count of the configured encoder.
std::uint64_t encoder_param_count(const EncoderConfig& cfg);

// Pooler forward cost. Every arch's per-row rate r(D) is M-independent, so
// cost_g(M) = M * r; JAP = cost_g(C*N), DCP = C*cost_g(N) + cost_g(C).
CostReport pooler_flops(PoolArch arch, PoolStrategy strategy, std::size_t channels,
                        std::size_t tokens, std::size_t dim, std::size_t heads = 4,
                        std::size_t queries = 4, std::size_t prototypes = 8);

// ---------------------------------------------------------------------------
// Figure-analogue CSV emitters (deterministic: rows in input order)
// ---------------------------------------------------------------------------

// Columns: dataset,mean_sim,n_instances (cls-variant reports).
void write_fig2_csv(const std::string& path, const std::vector<DiversityReport>& reports);
// Columns: dataset,encoding,filter_fraction,mean_sim,n_instances.
void write_fig5_csv(const std::string& path, const std::vector<DiversityReport>& reports);
// Columns: arch,strategy,C,N,flops. The stream overload backs stdout
// emission in the CLI.
void write_fig6_csv(const std::string& path, const std::vector<CostReport>& reports);
void write_fig6_csv(std::ostream& os, const std::vector<CostReport>& reports);

// Spearman rank correlation; average ranks on ties. Rejects length
// mismatches and fewer than two points.
double spearman(const std::vector<double>& xs, const std::vector<double>& ys);

} // namespace cap
