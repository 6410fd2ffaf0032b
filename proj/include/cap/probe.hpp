#pragma once

#include "cap/encoder.hpp"
#include "cap/optim.hpp"
#include "cap/pooling.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cap {

// ---------------------------------------------------------------------------
// Frozen-feature dataset held in memory. The probe pools patch tokens only,
// so cls blocks are not retained here.
// ---------------------------------------------------------------------------
struct FeatureDataset {
    Encoding mode = Encoding::JFE;
    std::vector<Tensor> patch; // each C x N x D
    std::vector<std::uint16_t> labels;

    std::size_t size() const { return patch.size(); }
    std::size_t num_classes() const; // max label + 1; rejects empty
};

// Reads every record of a finalized feature store into memory, enforcing the
// expected encoding via the file's mode flag.
FeatureDataset load_feature_dataset(const std::string& path, Encoding expected_mode);

// ---------------------------------------------------------------------------
// Probe training
// ---------------------------------------------------------------------------
struct ProbeConfig {
    Encoding encoding = Encoding::JFE;
    PoolStrategy strategy = PoolStrategy::JAP;
    PoolArch arch = PoolArch::mean;
    double lr = 1e-3;
    double weight_decay = 0.01;
    std::size_t batch_size = 128;
    std::size_t epochs = 30;
    std::uint64_t seed = 42;
    std::size_t heads = 4;
    std::size_t queries = 4;
    std::size_t prototypes = 8;

    void validate() const;
};

// Trained pooler + linear head over pooled vectors. The parameter set is the
// pooler's parameters followed by "head_w" (D x K) and "head_b" (1 x K).
struct ProbeModel {
    PoolerConfig pool_cfg;
    PoolStrategy strategy = PoolStrategy::JAP;
    std::size_t classes = 0;
    ParamSet params;
};

// Logits for one sample's patch features (C x N x D -> 1 x K).
Tensor probe_logits(const ProbeModel& model, const Tensor& X);

// Argmax accuracy over a split; ties resolve to the lowest class index.
// Rejects an empty split and labels outside the model's class range.
double evaluate(const ProbeModel& model, const FeatureDataset& split);

struct ProbeRun {
    ProbeConfig cfg;
    ProbeModel model; // parameters at the best validation epoch
    double train_acc = 0.0;
    double val_acc = 0.0;
    double test_acc = -1.0; // -1 when no test split was given
    std::vector<double> loss_curve; // mean train loss per epoch
    std::vector<double> val_curve;  // validation accuracy per epoch
    double elapsed_seconds = 0.0;
    std::string lr_provenance = "fixed";
};

// Minibatch cross-entropy with AdamW (decoupled decay on every trained
// parameter). Keeps the parameter snapshot of the epoch with the best
// validation accuracy (earliest on ties). Deterministic given cfg: pooler
// init, head init and shuffles all derive from cfg.seed. test may be null.
ProbeRun train_probe(const ProbeConfig& cfg, const FeatureDataset& train,
                     const FeatureDataset& val, const FeatureDataset* test = nullptr);

// ---------------------------------------------------------------------------
// Learning-rate search protocol
// ---------------------------------------------------------------------------
struct LrTrial {
    double lr = 0.0;
    double val_acc = 0.0;
    std::string stage; // "coarse" | "fine"
};

struct LrSearchResult {
    double lr = 0.0;
    double val_acc = 0.0;
    std::string provenance; // "coarse" | "fine"
    std::vector<LrTrial> trials;
};

// Stage 1: exactly 10 log-uniform draws in [1e-5, 1e-2] from RngStream(42),
// each trained at seed 42. Stage 2: steps of 1*10^p around the incumbent,
// p the incumbent's decade clamped to {-5..-2}, repeated until neither
// in-range neighbor strictly improves validation accuracy.
LrSearchResult lr_search(const ProbeConfig& cfg_template, const FeatureDataset& train,
                         const FeatureDataset& val);

// ---------------------------------------------------------------------------
// Run matrix and result tables
// ---------------------------------------------------------------------------
struct SplitSet {
    FeatureDataset train, val, test;
};

struct MatrixJob {
    std::string dataset;
    const SplitSet* jfe = nullptr; // null -> cells marked absent
    const SplitSet* ife = nullptr;
};

struct MatrixOptions {
    std::vector<PoolArch> archs;
    std::vector<std::uint64_t> seeds = {42, 43, 44, 45, 46};
    double lr = 1e-3;
    bool search_lr = false; // when set, lr_search picks the cell's lr first
    std::size_t epochs = 30;
    std::size_t batch_size = 128;
    double weight_decay = 0.01;
    std::size_t heads = 4;
    std::size_t queries = 4;
    std::size_t prototypes = 8;
};

struct ResultRow {
    std::string dataset;
    Encoding encoding = Encoding::JFE;
    PoolStrategy strategy = PoolStrategy::JAP;
    PoolArch arch = PoolArch::mean;
    std::uint64_t seed = 0;
    double lr = 0.0;
    double val_acc = 0.0;
    double test_acc = 0.0;
};

std::vector<ResultRow> run_matrix(const std::vector<MatrixJob>& jobs, const MatrixOptions& opt);

struct SummaryRow {
    std::string dataset;
    PoolArch arch = PoolArch::mean;
    Encoding encoding = Encoding::JFE;
    PoolStrategy strategy = PoolStrategy::JAP;
    std::size_t n_runs = 0; // 0 marks an absent cell
    double mean_test = 0.0;
    double std_test = 0.0;     // population std over seeds
    bool delta_known = false;  // false when the JFE+JAP baseline is absent
    double delta_cap = 0.0;    // cell mean minus JFE+JAP mean, same dataset+arch
};

// One row per expected cell (datasets x archs x 4 encoding/strategy combos);
// cells without result rows are marked absent rather than dropped.
std::vector<SummaryRow> summarize_matrix(const std::vector<ResultRow>& rows,
                                         const std::vector<std::string>& datasets,
                                         const std::vector<PoolArch>& archs);

// results.csv: dataset,encoding,strategy,arch,seed,lr,val_acc,test_acc
void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows);
// summary.csv: dataset,arch,encoding,strategy,n_runs,mean_test_acc,std_test_acc,delta_cap
void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows);

} // namespace cap
