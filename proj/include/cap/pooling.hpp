#pragma once

#include "cap/autodiff.hpp"
#include "cap/optim.hpp"
#include "cap/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cap {

// Six published attentive-pooling architectures plus the mean baseline.
// Every pooler maps an M x D row set (M >= 1) to one D-vector and is
// invariant to row order.
enum class PoolArch : std::uint8_t {
    mean = 0,
    simpool = 1,
    abmilp = 2,
    ep = 3,
    mab = 4,
    mhca = 5,
    protobin = 6,
};

const std::vector<PoolArch>& all_pool_archs();
const char* pool_arch_name(PoolArch arch);
PoolArch pool_arch_from_name(const std::string& name);

enum class PoolStrategy : std::uint8_t { JAP = 0, DCP = 1 };

const char* strategy_name(PoolStrategy s);
PoolStrategy strategy_from_name(const std::string& name);

struct PoolerConfig {
    PoolArch arch = PoolArch::mean;
    std::size_t dim = 64;       // D
    std::size_t heads = 4;      // mab, mhca
    std::size_t queries = 4;    // ep
    std::size_t prototypes = 8; // protobin

    void validate() const;
};

// One shared parameter set; JAP and DCP wrap the same instance, which is the
// source of the parameter-parity property.
struct Pooler {
    PoolerConfig cfg;
    ParamSet params;
};

// Deterministic truncated-normal init (std 0.02) from the seed; layer-norm
// scales start at 1, shifts and biases at 0. Rejects unknown arch.
Pooler init_pooler(PoolArch arch, std::size_t dim, std::uint64_t seed,
                   std::size_t heads = 4, std::size_t queries = 4,
                   std::size_t prototypes = 8);

// Learnable scalar count. Identical for JAP and DCP by construction.
std::size_t param_count(const Pooler& p);

// Registers pooler parameters as graph inputs in ParamSet order.
std::vector<Graph::NodeId> register_params(Graph& g, const ParamSet& ps, bool requires_grad);

// Tape builder for g(feats): feats node (M, D) -> pooled (1, D) node.
// param_ids must come from register_params on the same pooler.
Graph::NodeId build_pool(Graph& g, const PoolerConfig& cfg,
                         const std::vector<Graph::NodeId>& param_ids, Graph::NodeId feats);

// Joint pooling (one pass over the channel-concatenated CN x D rows) and
// decoupled pooling (per-channel pass, then one pass over the C pooled
// rows), both on the same parameters. X is C x N x D.
Graph::NodeId build_jap(Graph& g, const PoolerConfig& cfg,
                        const std::vector<Graph::NodeId>& param_ids, const Tensor& X);
Graph::NodeId build_dcp(Graph& g, const PoolerConfig& cfg,
                        const std::vector<Graph::NodeId>& param_ids, const Tensor& X);

// Inference-only conveniences (no gradients retained).
Tensor pool(const Pooler& p, const Tensor& feats);        // M x D -> 1 x D
Tensor jap_forward(const Pooler& p, const Tensor& X);     // C x N x D -> 1 x D
Tensor dcp_forward(const Pooler& p, const Tensor& X);     // C x N x D -> 1 x D

} // namespace cap
