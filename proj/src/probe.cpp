#include "cap/probe.hpp"

#include "cap/autodiff.hpp"
#include "cap/rng.hpp"
#include "cap/store.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cap {

namespace {

std::string fmt(double v) {
    std::ostringstream ss;
    ss << std::setprecision(10) << v;
    return ss.str();
}

std::size_t argmax_row(const Tensor& logits) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.data.size(); ++k)
        if (logits.data[k] > logits.data[best]) best = k;
    return best;
}

void check_dataset_shapes(const FeatureDataset& ds, const char* name) {
    if (ds.size() == 0) throw std::invalid_argument(std::string(name) + " split is empty");
    if (ds.labels.size() != ds.patch.size())
        throw std::invalid_argument(std::string(name) + ": label/sample count mismatch");
    const auto& shape = ds.patch.front().shape;
    if (shape.size() != 3)
        throw std::invalid_argument(std::string(name) + ": patch tensors must be C x N x D");
    for (const Tensor& t : ds.patch)
        if (t.shape != shape)
            throw std::invalid_argument(std::string(name) + ": inconsistent sample shapes");
}

struct BatchStep {
    double loss = 0.0;
};

// One minibatch: forward tape over every sample sharing the parameter nodes,
// one backward pass, one optimizer step.
BatchStep run_batch(ProbeModel& model, AdamW& opt, const FeatureDataset& train,
                    const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
    Graph g;
    std::vector<Graph::NodeId> ids = register_params(g, model.params, true);
    const std::size_t n_pool = model.params.size() - 2;
    const std::vector<Graph::NodeId> pool_ids(ids.begin(),
                                              ids.begin() + static_cast<std::ptrdiff_t>(n_pool));
    const Graph::NodeId w_id = ids[n_pool], b_id = ids[n_pool + 1];

    std::vector<Graph::NodeId> losses;
    losses.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
        const std::size_t idx = order[i];
        const Graph::NodeId pooled =
            model.strategy == PoolStrategy::JAP
                ? build_jap(g, model.pool_cfg, pool_ids, train.patch[idx])
                : build_dcp(g, model.pool_cfg, pool_ids, train.patch[idx]);
        const Graph::NodeId logits = g.add(g.matmul(pooled, w_id), b_id);
        losses.push_back(g.cross_entropy(logits, train.labels[idx]));
    }
    const Graph::NodeId loss = g.mean_scalars(losses);
    g.backward(loss);

    std::vector<Tensor> grads;
    grads.reserve(ids.size());
    for (Graph::NodeId id : ids) grads.push_back(g.grad(id));
    opt.step(model.params, grads);
    return {g.value(loss).data[0]};
}

} // namespace

std::size_t FeatureDataset::num_classes() const {
    if (labels.empty()) throw std::invalid_argument("dataset has no labels");
    return static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
}

FeatureDataset load_feature_dataset(const std::string& path, Encoding expected_mode) {
    FeatureReader reader(path);
    reader.require_mode(expected_mode);
    FeatureDataset ds;
    ds.mode = expected_mode;
    ds.patch.reserve(reader.size());
    ds.labels.reserve(reader.size());
    for (std::size_t i = 0; i < reader.size(); ++i) {
        auto [fm, label] = reader.read(i);
        ds.patch.push_back(std::move(fm.patch));
        ds.labels.push_back(label);
    }
    return ds;
}

void ProbeConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr))
        throw std::invalid_argument("probe: lr must be finite and >= 0");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
        throw std::invalid_argument("probe: weight_decay must be finite and >= 0");
    if (batch_size == 0) throw std::invalid_argument("probe: batch_size must be positive");
    if (epochs == 0) throw std::invalid_argument("probe: epochs must be positive");
}

Tensor probe_logits(const ProbeModel& model, const Tensor& X) {
    Graph g;
    std::vector<Graph::NodeId> pool_ids;
    const std::size_t n_pool = model.params.size() - 2;
    pool_ids.reserve(n_pool);
    for (std::size_t i = 0; i < n_pool; ++i) pool_ids.push_back(g.input(model.params.at(i)));
    const Graph::NodeId pooled = model.strategy == PoolStrategy::JAP
                                     ? build_jap(g, model.pool_cfg, pool_ids, X)
                                     : build_dcp(g, model.pool_cfg, pool_ids, X);
    Tensor logits = matmul(g.value(pooled), model.params.find("head_w"));
    const Tensor& b = model.params.find("head_b");
    for (std::size_t k = 0; k < logits.data.size(); ++k) logits.data[k] += b.data[k];
    return logits;
}

double evaluate(const ProbeModel& model, const FeatureDataset& split) {
    check_dataset_shapes(split, "evaluation");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < split.size(); ++i) {
        if (split.labels[i] >= model.classes)
            throw std::invalid_argument("label " + std::to_string(split.labels[i]) +
                                        " outside the model's " +
                                        std::to_string(model.classes) + " classes");
        if (argmax_row(probe_logits(model, split.patch[i])) == split.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

ProbeRun train_probe(const ProbeConfig& cfg, const FeatureDataset& train,
                     const FeatureDataset& val, const FeatureDataset* test) {
    const auto t0 = std::chrono::steady_clock::now();
    cfg.validate();
    check_dataset_shapes(train, "train");
    check_dataset_shapes(val, "val");
    if (test) check_dataset_shapes(*test, "test");
    if (train.mode != cfg.encoding || val.mode != cfg.encoding ||
        (test && test->mode != cfg.encoding))
        throw std::invalid_argument(std::string("features are not ") + encoding_name(cfg.encoding) +
                                    "-encoded; re-extract or fix the probe config");
    if (train.patch.front().shape != val.patch.front().shape ||
        (test && test->patch.front().shape != train.patch.front().shape))
        throw std::invalid_argument("splits disagree on feature shape");

    const std::size_t dim = train.patch.front().shape[2];
    std::size_t classes = std::max(train.num_classes(), val.num_classes());
    if (test) classes = std::max(classes, test->num_classes());
    if (classes < 2) throw std::invalid_argument("probe needs at least two classes");

    ProbeRun run;
    run.cfg = cfg;
    Pooler pooler =
        init_pooler(cfg.arch, dim, cfg.seed, cfg.heads, cfg.queries, cfg.prototypes);
    run.model.pool_cfg = pooler.cfg;
    run.model.strategy = cfg.strategy;
    run.model.classes = classes;
    run.model.params = std::move(pooler.params);

    // Head init follows the pooler convention: truncated normal weights,
    // zero bias, from a stream disjoint from the pooler's.
    RngStream head_rng(cfg.seed, 0x4eadULL);
    Tensor w = Tensor::zeros({dim, classes});
    for (double& v : w.data) v = head_rng.next_trunc_normal(0.02);
    run.model.params.add("head_w", std::move(w));
    run.model.params.add("head_b", Tensor::zeros({1, classes}));

    AdamW opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}, run.model.params);

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const RngStream shuffle_root(cfg.seed, 0x5f5fULL);

    double best_val = -1.0;
    ParamSet best_params;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        RngStream er = shuffle_root.split(epoch);
        for (std::size_t i = order.size(); i-- > 1;)
            std::swap(order[i], order[er.next_u64() % (i + 1)]);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(begin + cfg.batch_size, order.size());
            loss_sum += run_batch(run.model, opt, train, order, begin, end).loss;
            ++batches;
        }
        run.loss_curve.push_back(loss_sum / static_cast<double>(batches));

        const double val_acc = evaluate(run.model, val);
        run.val_curve.push_back(val_acc);
        if (val_acc > best_val) {
            best_val = val_acc;
            best_params = run.model.params;
        }
    }

    run.model.params = std::move(best_params);
    run.val_acc = best_val;
    run.train_acc = evaluate(run.model, train);
    if (test) run.test_acc = evaluate(run.model, *test);
    run.elapsed_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run;
}

LrSearchResult lr_search(const ProbeConfig& cfg_template, const FeatureDataset& train,
                         const FeatureDataset& val) {
    check_dataset_shapes(train, "train");
    check_dataset_shapes(val, "val");
    constexpr double kLo = 1e-5, kHi = 1e-2;
    constexpr std::size_t kCoarseDraws = 10;
    constexpr std::size_t kMaxFineSteps = 25;

    ProbeConfig cfg = cfg_template;
    cfg.seed = 42; // the whole search runs under the fixed search seed

    LrSearchResult res;
    auto run_at = [&](double lr, const char* stage) {
        cfg.lr = lr;
        ProbeRun run = train_probe(cfg, train, val);
        res.trials.push_back({lr, run.val_acc, stage});
        return run.val_acc;
    };

    // Stage 1: exactly ten log-uniform draws across the three decades.
    RngStream draws(42);
    double best_lr = 0.0, best_acc = -1.0;
    for (std::size_t t = 0; t < kCoarseDraws; ++t) {
        const double lr = std::pow(10.0, -5.0 + 3.0 * draws.next_double());
        const double acc = run_at(lr, "coarse");
        if (acc > best_acc) {
            best_acc = acc;
            best_lr = lr;
        }
    }
    res.provenance = "coarse";

    // Stage 2: walk in steps of one unit of the incumbent's decade until
    // neither in-range neighbor strictly improves.
    for (std::size_t step = 0; step < kMaxFineSteps; ++step) {
        const int p = std::clamp(static_cast<int>(std::floor(std::log10(best_lr))), -5, -2);
        const double unit = std::pow(10.0, p);
        bool improved = false;
        for (double cand : {best_lr - unit, best_lr + unit}) {
            if (cand < kLo || cand > kHi) continue;
            const double acc = run_at(cand, "fine");
            if (acc > best_acc) {
                best_acc = acc;
                best_lr = cand;
                improved = true;
            }
        }
        if (!improved) break;
        res.provenance = "fine";
    }

    res.lr = best_lr;
    res.val_acc = best_acc;
    return res;
}

std::vector<ResultRow> run_matrix(const std::vector<MatrixJob>& jobs, const MatrixOptions& opt) {
    if (opt.archs.empty()) throw std::invalid_argument("run_matrix: no pooler archs requested");
    if (opt.seeds.empty()) throw std::invalid_argument("run_matrix: no seeds requested");

    std::vector<ResultRow> rows;
    for (const MatrixJob& job : jobs) {
        const std::pair<Encoding, const SplitSet*> encodings[2] = {
            {Encoding::JFE, job.jfe}, {Encoding::IFE, job.ife}};
        for (const auto& [encoding, splits] : encodings) {
            if (!splits) continue; // summarize_matrix reports the absence
            for (PoolStrategy strategy : {PoolStrategy::JAP, PoolStrategy::DCP}) {
                for (PoolArch arch : opt.archs) {
                    ProbeConfig cfg;
                    cfg.encoding = encoding;
                    cfg.strategy = strategy;
                    cfg.arch = arch;
                    cfg.lr = opt.lr;
                    cfg.weight_decay = opt.weight_decay;
                    cfg.batch_size = opt.batch_size;
                    cfg.epochs = opt.epochs;
                    cfg.heads = opt.heads;
                    cfg.queries = opt.queries;
                    cfg.prototypes = opt.prototypes;

                    double lr = opt.lr;
                    if (opt.search_lr)
                        lr = lr_search(cfg, splits->train, splits->val).lr;
                    for (std::uint64_t seed : opt.seeds) {
                        cfg.seed = seed;
                        cfg.lr = lr;
                        ProbeRun run = train_probe(cfg, splits->train, splits->val,
                                                   &splits->test);
                        rows.push_back({job.dataset, encoding, strategy, arch, seed, lr,
                                        run.val_acc, run.test_acc});
                    }
                }
            }
        }
    }
    return rows;
}

std::vector<SummaryRow> summarize_matrix(const std::vector<ResultRow>& rows,
                                         const std::vector<std::string>& datasets,
                                         const std::vector<PoolArch>& archs) {
    struct CellStats {
        std::size_t n = 0;
        double mean = 0.0, stddev = 0.0;
    };
    auto stats_for = [&](const std::string& dataset, PoolArch arch, Encoding enc,
                         PoolStrategy strat) {
        CellStats s;
        double sum = 0.0, sum2 = 0.0;
        for (const ResultRow& r : rows)
            if (r.dataset == dataset && r.arch == arch && r.encoding == enc &&
                r.strategy == strat) {
                ++s.n;
                sum += r.test_acc;
                sum2 += r.test_acc * r.test_acc;
            }
        if (s.n > 0) {
            s.mean = sum / static_cast<double>(s.n);
            // Population std over the seeds actually present.
            s.stddev = std::sqrt(std::max(0.0, sum2 / static_cast<double>(s.n) - s.mean * s.mean));
        }
        return s;
    };

    const std::pair<Encoding, PoolStrategy> combos[4] = {
        {Encoding::JFE, PoolStrategy::JAP},
        {Encoding::JFE, PoolStrategy::DCP},
        {Encoding::IFE, PoolStrategy::JAP},
        {Encoding::IFE, PoolStrategy::DCP},
    };

    std::vector<SummaryRow> out;
    for (const std::string& dataset : datasets) {
        for (PoolArch arch : archs) {
            const CellStats baseline = stats_for(dataset, arch, Encoding::JFE, PoolStrategy::JAP);
            for (const auto& [enc, strat] : combos) {
                const CellStats s = stats_for(dataset, arch, enc, strat);
                SummaryRow row;
                row.dataset = dataset;
                row.arch = arch;
                row.encoding = enc;
                row.strategy = strat;
                row.n_runs = s.n;
                row.mean_test = s.mean;
                row.std_test = s.stddev;
                row.delta_known = s.n > 0 && baseline.n > 0;
                row.delta_cap = row.delta_known ? s.mean - baseline.mean : 0.0;
                out.push_back(row);
            }
        }
    }
    return out;
}

void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "dataset,encoding,strategy,arch,seed,lr,val_acc,test_acc\n";
    for (const ResultRow& r : rows)
        out << r.dataset << "," << encoding_name(r.encoding) << "," << strategy_name(r.strategy)
            << "," << pool_arch_name(r.arch) << "," << r.seed << "," << fmt(r.lr) << ","
            << fmt(r.val_acc) << "," << fmt(r.test_acc) << "\n";
}

void write_summary_csv(const std::string& path, const std::vector<SummaryRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "dataset,arch,encoding,strategy,n_runs,mean_test_acc,std_test_acc,delta_cap\n";
    for (const SummaryRow& r : rows) {
        out << r.dataset << "," << pool_arch_name(r.arch) << "," << encoding_name(r.encoding)
            << "," << strategy_name(r.strategy) << "," << r.n_runs << ",";
        if (r.n_runs == 0)
            out << "absent,absent,";
        else
            out << fmt(r.mean_test) << "," << fmt(r.std_test) << ",";
        out << (r.delta_known ? fmt(r.delta_cap) : "absent") << "\n";
    }
}

} // namespace cap
