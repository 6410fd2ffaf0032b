#include "cap/cli.hpp"

#include "CLI11.hpp"

#include "cap/analysis.hpp"
#include "cap/encoder.hpp"
#include "cap/kvfile.hpp"
#include "cap/probe.hpp"
#include "cap/store.hpp"
#include "cap/synthdata.hpp"

#include <algorithm>
#include <chrono>
#include <concepts>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cap {
namespace {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Formatting helpers
// ---------------------------------------------------------------------------

std::string iso_utc_now() {
    const std::time_t t =
        std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string fmt_g(double v) {
    std::ostringstream os;
    os << std::setprecision(15) << v;
    return os.str();
}

std::string fmt10(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
    std::string s;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(seeds[i]);
    }
    return s;
}

std::string join_names(const std::vector<std::string>& names) {
    std::string s;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i) s += ',';
        s += names[i];
    }
    return s;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (const char ch : s) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

bool has_suffix(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Last path component, ignoring trailing slashes; used as a default dataset
// label.
std::string path_label(std::string p) {
    while (p.size() > 1 && p.back() == '/') p.pop_back();
    const std::string name = fs::path(p).filename().string();
    return name.empty() ? std::string("data") : name;
}

std::string file_stem(const std::string& p) {
    const std::string s = fs::path(p).stem().string();
    return s.empty() ? std::string("features") : s;
}

// ---------------------------------------------------------------------------
// Config files. CLI11 2.4 only applies set_config() on the top-level app, so
// flat per-subcommand config files are merged by hand: a key is applied when
// its flag was not given on the command line, after running the flag's own
// validators. Unknown keys are rejected.
// ---------------------------------------------------------------------------

std::uint64_t parse_config_u64(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    std::uint64_t v = 0;
    try {
        v = std::stoull(value, &pos);
    } catch (const std::exception&) {
        pos = std::string::npos;
    }
    if (pos != value.size() || value.find('-') != std::string::npos)
        throw std::runtime_error("config: key '" + key + "' needs an unsigned integer, got '" +
                                 value + "'");
    return v;
}

double parse_config_double(const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &pos);
    } catch (const std::exception&) {
        pos = std::string::npos;
    }
    if (pos != value.size())
        throw std::runtime_error("config: key '" + key + "' needs a number, got '" + value + "'");
    return v;
}

bool parse_config_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw std::runtime_error("config: key '" + key + "' needs true/false, got '" + value + "'");
}

// Runs the option's own validators (range/membership checks) on a
// config-supplied value so config and command line enforce the same rules.
std::string run_option_validators(CLI::Option* opt, const std::string& key, std::string value) {
    for (int i = 0;; ++i) {
        const CLI::Validator* validator = nullptr;
        try {
            validator = opt->get_validator(i);
        } catch (const CLI::OptionNotFound&) {
            break;
        }
        const std::string err = (*validator)(value);
        if (!err.empty()) throw CLI::ValidationError(key + ": " + err);
    }
    return value;
}

class ConfigBinder {
public:
    void bind(CLI::Option* opt, std::string& target) {
        add(opt, [&target, opt](const std::string& k, const std::string& v) {
            target = run_option_validators(opt, k, v);
        });
    }
    void bind(CLI::Option* opt, bool& target) {
        add(opt, [&target, opt](const std::string& k, const std::string& v) {
            target = parse_config_bool(k, run_option_validators(opt, k, v));
        });
    }
    void bind(CLI::Option* opt, double& target) {
        add(opt, [&target, opt](const std::string& k, const std::string& v) {
            target = parse_config_double(k, run_option_validators(opt, k, v));
        });
    }
    template <std::unsigned_integral T>
        requires(!std::same_as<T, bool>)
    void bind(CLI::Option* opt, T& target) {
        add(opt, [&target, opt](const std::string& k, const std::string& v) {
            target = static_cast<T>(parse_config_u64(k, run_option_validators(opt, k, v)));
        });
    }
    void bind(CLI::Option* opt, std::vector<std::uint64_t>& target) {
        add(opt, [&target, opt](const std::string& k, const std::string& v) {
            target.clear();
            for (const std::string& item : split_on(v, ','))
                target.push_back(parse_config_u64(k, run_option_validators(opt, k, item)));
        });
    }
    void bind(CLI::Option* opt, std::vector<std::string>& target) {
        add(opt, [&target, opt](const std::string& k, const std::string& v) {
            target.clear();
            for (const std::string& item : split_on(v, ','))
                target.push_back(run_option_validators(opt, k, item));
        });
    }

    // Applies `path` (no-op when empty): command-line flags win, everything
    // else takes the config value.
    void apply(const std::string& path) const {
        if (path.empty()) return;
        for (const auto& [key, value] : read_kv_file(path)) {
            const auto it = std::find_if(entries_.begin(), entries_.end(),
                                         [&key](const Entry& e) { return e.key == key; });
            if (it == entries_.end())
                throw std::runtime_error("config: unknown key '" + key + "' in " + path);
            if (it->opt->count() > 0) continue; // command line wins
            it->set(key, value);
        }
    }

private:
    struct Entry {
        std::string key;
        CLI::Option* opt;
        std::function<void(const std::string&, const std::string&)> set;
    };

    void add(CLI::Option* opt,
             std::function<void(const std::string&, const std::string&)> set) {
        entries_.push_back(Entry{opt->get_lnames().front(), opt, std::move(set)});
    }

    std::vector<Entry> entries_;
};

// Required options may come from the config file, so CLI11's own required
// flag cannot be used; emptiness is checked after the config merge.
void require_value(const std::string& value, const char* flag) {
    if (value.empty()) throw CLI::RequiredError(flag);
}

// ---------------------------------------------------------------------------
// Run manifests. Every output directory records the command and resolved
// configuration that produced it; only the timestamps differ between reruns.
// ---------------------------------------------------------------------------

struct Echo {
    KvPairs kv;
    void add(const std::string& k, const char* v) { kv.emplace_back(k, v); }
    void add(const std::string& k, const std::string& v) { kv.emplace_back(k, v); }
    template <std::integral T>
        requires(!std::same_as<T, bool>)
    void add(const std::string& k, T v) {
        kv.emplace_back(k, std::to_string(v));
    }
    void add(const std::string& k, double v) { kv.emplace_back(k, fmt_g(v)); }
    void add(const std::string& k, bool v) { kv.emplace_back(k, v ? "true" : "false"); }
};

struct ManifestInfo {
    std::string command;
    std::string config_path; // empty -> "none"
    std::string output;      // the --out argument as given
    std::string seeds;       // empty -> "none"
    std::string started_at;
    KvPairs echo; // resolved configuration, keys match flag names
};

void write_manifest(const fs::path& path, const ManifestInfo& m) {
    KvPairs kv;
    kv.emplace_back("kind", "run-manifest");
    kv.emplace_back("command", m.command);
    kv.emplace_back("config", m.config_path.empty() ? "none" : m.config_path);
    kv.emplace_back("output", m.output);
    kv.emplace_back("seeds", m.seeds.empty() ? "none" : m.seeds);
    kv.emplace_back("started_at", m.started_at);
    kv.emplace_back("finished_at", iso_utc_now());
    for (const auto& [k, v] : m.echo) kv.emplace_back("cfg." + k, v);
    write_kv_file(path.string(), kv);
}

// ---------------------------------------------------------------------------
// Shared option groups
// ---------------------------------------------------------------------------

void add_jobs_opt(CLI::App* sub, ConfigBinder& b, std::size_t& jobs) {
    b.bind(sub->add_option("--jobs", jobs,
                           "upper bound on worker threads; outputs are identical for any value")
               ->check(CLI::PositiveNumber)
               ->capture_default_str(),
           jobs);
}

void add_config_opt(CLI::App* sub, std::string& config_path) {
    sub->add_option("--config", config_path,
                    "flat key = value config file; command-line flags override it");
}

struct EncoderArgs {
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::uint64_t seed = 0;
};

void add_encoder_opts(CLI::App* sub, ConfigBinder& b, EncoderArgs& e) {
    b.bind(sub->add_option("--patch-size", e.patch_size, "encoder patch size")
               ->check(CLI::PositiveNumber)
               ->capture_default_str(),
           e.patch_size);
    b.bind(sub->add_option("--embed-dim", e.embed_dim, "encoder embedding dimension")
               ->check(CLI::PositiveNumber)
               ->capture_default_str(),
           e.embed_dim);
    b.bind(sub->add_option("--depth", e.depth, "encoder transformer layers")
               ->check(CLI::PositiveNumber)
               ->capture_default_str(),
           e.depth);
    b.bind(sub->add_option("--encoder-heads", e.heads, "encoder attention heads")
               ->check(CLI::PositiveNumber)
               ->capture_default_str(),
           e.heads);
    b.bind(sub->add_option("--mlp-ratio", e.mlp_ratio, "encoder MLP expansion ratio")
               ->check(CLI::PositiveNumber)
               ->capture_default_str(),
           e.mlp_ratio);
    b.bind(sub->add_option("--encoder-seed", e.seed, "frozen-encoder init seed")
               ->capture_default_str(),
           e.seed);
}

EncoderConfig make_encoder_config(const EncoderArgs& a, std::size_t image_size) {
    EncoderConfig ec;
    ec.image_size = image_size;
    ec.patch_size = a.patch_size;
    ec.embed_dim = a.embed_dim;
    ec.depth = a.depth;
    ec.heads = a.heads;
    ec.mlp_ratio = a.mlp_ratio;
    ec.init_seed = a.seed;
    ec.validate();
    return ec;
}

void echo_encoder(Echo& e, const EncoderArgs& a) {
    e.add("patch-size", a.patch_size);
    e.add("embed-dim", a.embed_dim);
    e.add("depth", a.depth);
    e.add("encoder-heads", a.heads);
    e.add("mlp-ratio", a.mlp_ratio);
    e.add("encoder-seed", a.seed);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string out;
    std::size_t channels = 4;
    std::size_t image_size = 32;
    std::size_t classes = 4;
    double rho = 0.0;
    std::size_t minority = 0;
    double noise = 0.05;
    std::uint64_t seed = 0;
    std::size_t n_train = 1000;
    std::size_t n_val = 200;
    std::size_t n_test = 200;
    std::size_t jobs = 1;
    std::string config_path;
};

void run_gen_data(const GenDataArgs& a) {
    const std::string started = iso_utc_now();
    require_value(a.out, "--out");
    GeneratorConfig gc;
    gc.channels = a.channels;
    gc.image_size = a.image_size;
    gc.classes = a.classes;
    gc.redundancy = a.rho;
    gc.minority_channel = a.minority;
    gc.noise = a.noise;
    gc.seed = a.seed;
    write_dataset(a.out, gc, a.n_train, a.n_val, a.n_test);

    Echo e;
    e.add("out", a.out);
    e.add("channels", a.channels);
    e.add("image-size", a.image_size);
    e.add("classes", a.classes);
    e.add("rho", a.rho);
    e.add("minority", a.minority);
    e.add("noise", a.noise);
    e.add("seed", a.seed);
    e.add("train", a.n_train);
    e.add("val", a.n_val);
    e.add("test", a.n_test);
    e.add("jobs", a.jobs);
    write_manifest(fs::path(a.out) / "run_manifest.txt",
                   {"gen-data", a.config_path, a.out, std::to_string(a.seed), started, e.kv});
    std::cout << "gen-data: wrote " << a.n_train + a.n_val + a.n_test << " samples to " << a.out
              << "\n";
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

struct ExtractArgs {
    std::string mode;
    std::string data;
    std::string out;
    std::string split = "train";
    EncoderArgs enc;
    std::size_t jobs = 1;
    std::string config_path;
};

void run_extract(const ExtractArgs& a) {
    const std::string started = iso_utc_now();
    require_value(a.mode, "--mode");
    require_value(a.data, "--data");
    require_value(a.out, "--out");
    const Encoding mode = encoding_from_name(a.mode);

    // --data names a dataset directory or a single sample store; --out names
    // a directory (one .mcif per split) or a single .mcif path.
    const bool file_in = has_suffix(a.data, ".mcis");
    const bool file_out = has_suffix(a.out, ".mcif");
    std::vector<std::pair<fs::path, fs::path>> units;
    if (file_in) {
        if (!file_out)
            throw std::runtime_error(
                "extract: --out must name a .mcif file when --data is a single .mcis file");
        units.emplace_back(a.data, a.out);
    } else if (file_out) {
        units.emplace_back(fs::path(a.data) / (a.split + ".mcis"), a.out);
    } else {
        for (const char* split : {"train", "val", "test"})
            units.emplace_back(fs::path(a.data) / (std::string(split) + ".mcis"),
                               fs::path(a.out) / (std::string(split) + ".mcif"));
    }

    std::size_t image_size = 0;
    std::size_t channels = 0;
    {
        const SampleReader first(units.front().first.string());
        image_size = first.header().image_size;
        channels = first.header().channels;
    }
    const EncoderConfig ec = make_encoder_config(a.enc, image_size);
    const EncoderWeights w = init_encoder(ec);

    if (file_out) {
        const fs::path parent = fs::path(a.out).parent_path();
        if (!parent.empty()) fs::create_directories(parent);
    } else {
        fs::create_directories(a.out);
    }

    std::size_t total = 0;
    for (const auto& [src, dst] : units) {
        const SampleReader reader(src.string());
        if (reader.header().channels != channels || reader.header().image_size != image_size)
            throw std::runtime_error("extract: splits disagree on channels/image size: " +
                                     src.string());
        FeatureWriter writer(dst.string(), mode, channels, ec.tokens_per_channel(), ec.embed_dim,
                             ec.config_hash());
        for (std::size_t i = 0; i < reader.header().sample_count; ++i) {
            const MultiChannelImage img = reader.read(i);
            const TokenBatch tokens = tokenize(img, w);
            const FeatureMap fm =
                mode == Encoding::JFE ? encode_jfe(tokens, w) : encode_ife(tokens, w);
            writer.append(fm, img.label);
        }
        total += writer.finalize();
    }

    Echo e;
    e.add("mode", a.mode);
    e.add("data", a.data);
    e.add("out", a.out);
    e.add("split", a.split);
    echo_encoder(e, a.enc);
    e.add("image-size", image_size); // resolved from the sample store
    e.add("channels", channels);
    e.add("tokens", ec.tokens_per_channel());
    e.add("jobs", a.jobs);
    const fs::path manifest_path =
        file_out ? fs::path(a.out + ".manifest.txt") : fs::path(a.out) / "run_manifest.txt";
    write_manifest(manifest_path,
                   {"extract", a.config_path, a.out, std::to_string(a.enc.seed), started, e.kv});
    std::cout << "extract: wrote " << total << " " << a.mode << " feature records\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string features;
    std::string out;
    std::string mode;
    std::string strategy;
    std::string arch;
    std::string dataset_name;
    double lr = 1e-3;
    double wd = 0.01;
    std::size_t batch = 128;
    std::size_t epochs = 30;
    std::uint64_t seed = 42;
    std::size_t heads = 4;
    std::size_t queries = 4;
    std::size_t prototypes = 8;
    bool search_lr = false;
    std::size_t jobs = 1;
    std::string config_path;
};

void run_train(const TrainArgs& a) {
    const std::string started = iso_utc_now();
    require_value(a.features, "--features");
    require_value(a.out, "--out");
    require_value(a.mode, "--mode");
    require_value(a.strategy, "--strategy");
    require_value(a.arch, "--arch");
    ProbeConfig pc;
    pc.encoding = encoding_from_name(a.mode);
    pc.strategy = strategy_from_name(a.strategy);
    pc.arch = pool_arch_from_name(a.arch);
    pc.lr = a.lr;
    pc.weight_decay = a.wd;
    pc.batch_size = a.batch;
    pc.epochs = a.epochs;
    pc.seed = a.seed;
    pc.heads = a.heads;
    pc.queries = a.queries;
    pc.prototypes = a.prototypes;

    const fs::path dir(a.features);
    const FeatureDataset train = load_feature_dataset((dir / "train.mcif").string(), pc.encoding);
    const FeatureDataset val = load_feature_dataset((dir / "val.mcif").string(), pc.encoding);
    std::optional<FeatureDataset> test;
    if (fs::exists(dir / "test.mcif"))
        test = load_feature_dataset((dir / "test.mcif").string(), pc.encoding);

    std::string provenance = "fixed";
    if (a.search_lr) {
        const LrSearchResult sr = lr_search(pc, train, val);
        pc.lr = sr.lr;
        provenance = sr.provenance;
    }
    const ProbeRun run = train_probe(pc, train, val, test ? &*test : nullptr);

    fs::create_directories(a.out);
    const std::string dataset = a.dataset_name.empty() ? path_label(a.features) : a.dataset_name;
    ResultRow row;
    row.dataset = dataset;
    row.encoding = pc.encoding;
    row.strategy = pc.strategy;
    row.arch = pc.arch;
    row.seed = pc.seed;
    row.lr = pc.lr;
    row.val_acc = run.val_acc;
    row.test_acc = run.test_acc;
    write_results_csv((fs::path(a.out) / "result.csv").string(), {row});

    {
        std::ofstream curves(fs::path(a.out) / "curves.csv");
        if (!curves) throw std::runtime_error("train: cannot write curves.csv under " + a.out);
        curves << "epoch,train_loss,val_acc\n";
        for (std::size_t i = 0; i < run.loss_curve.size(); ++i)
            curves << i + 1 << "," << fmt10(run.loss_curve[i]) << "," << fmt10(run.val_curve[i])
                   << "\n";
    }
    const KvPairs probe_kv = {
        {"dataset", dataset},
        {"encoding", encoding_name(pc.encoding)},
        {"strategy", strategy_name(pc.strategy)},
        {"arch", pool_arch_name(pc.arch)},
        {"lr", fmt_g(pc.lr)},
        {"lr_provenance", provenance},
        {"train_acc", fmt10(run.train_acc)},
        {"val_acc", fmt10(run.val_acc)},
        {"test_acc", fmt10(run.test_acc)},
    };
    write_kv_file((fs::path(a.out) / "probe.txt").string(), probe_kv);

    Echo e;
    e.add("features", a.features);
    e.add("out", a.out);
    e.add("mode", a.mode);
    e.add("strategy", a.strategy);
    e.add("arch", a.arch);
    e.add("dataset-name", dataset);
    e.add("lr", a.lr);
    e.add("wd", a.wd);
    e.add("batch", a.batch);
    e.add("epochs", a.epochs);
    e.add("seed", a.seed);
    e.add("heads", a.heads);
    e.add("queries", a.queries);
    e.add("prototypes", a.prototypes);
    e.add("search-lr", a.search_lr);
    e.add("jobs", a.jobs);
    write_manifest(fs::path(a.out) / "run_manifest.txt",
                   {"train", a.config_path, a.out, std::to_string(a.seed), started, e.kv});
    std::cout << "train: val_acc=" << fmt10(run.val_acc) << " test_acc=" << fmt10(run.test_acc)
              << " lr=" << fmt_g(pc.lr) << " (" << provenance << ")\n";
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepArgs {
    std::string data;
    std::string out;
    std::string grid = "default";
    std::vector<std::string> archs;                      // empty -> all
    std::vector<std::uint64_t> seeds = {42, 43, 44, 45, 46};
    double lr = 1e-3;
    bool search_lr = true;
    std::size_t epochs = 30;
    std::size_t batch = 128;
    double wd = 0.01;
    std::size_t heads = 4;
    std::size_t queries = 4;
    std::size_t prototypes = 8;
    EncoderArgs enc;
    std::string dataset_name;
    std::size_t jobs = 1;
    std::string config_path;
};

FeatureDataset encode_split(const SampleReader& reader, const EncoderWeights& w, Encoding mode) {
    FeatureDataset ds;
    ds.mode = mode;
    ds.patch.reserve(reader.header().sample_count);
    ds.labels.reserve(reader.header().sample_count);
    for (std::size_t i = 0; i < reader.header().sample_count; ++i) {
        const MultiChannelImage img = reader.read(i);
        const TokenBatch tokens = tokenize(img, w);
        FeatureMap fm = mode == Encoding::JFE ? encode_jfe(tokens, w) : encode_ife(tokens, w);
        ds.patch.push_back(std::move(fm.patch));
        ds.labels.push_back(img.label);
    }
    return ds;
}

void run_sweep(const SweepArgs& a) {
    const std::string started = iso_utc_now();
    require_value(a.data, "--data");
    require_value(a.out, "--out");
    std::vector<PoolArch> archs;
    if (a.archs.empty()) {
        archs = all_pool_archs();
    } else {
        for (const auto& name : a.archs) archs.push_back(pool_arch_from_name(name));
    }
    if (a.seeds.empty()) throw std::runtime_error("sweep: --seeds must not be empty");

    const fs::path data(a.data);
    const SampleReader train_r((data / "train.mcis").string());
    const SampleReader val_r((data / "val.mcis").string());
    const SampleReader test_r((data / "test.mcis").string());
    const EncoderConfig ec = make_encoder_config(a.enc, train_r.header().image_size);
    const EncoderWeights w = init_encoder(ec);

    SplitSet jfe, ife;
    jfe.train = encode_split(train_r, w, Encoding::JFE);
    jfe.val = encode_split(val_r, w, Encoding::JFE);
    jfe.test = encode_split(test_r, w, Encoding::JFE);
    ife.train = encode_split(train_r, w, Encoding::IFE);
    ife.val = encode_split(val_r, w, Encoding::IFE);
    ife.test = encode_split(test_r, w, Encoding::IFE);

    const std::string dataset = a.dataset_name.empty() ? path_label(a.data) : a.dataset_name;
    MatrixOptions mo;
    mo.archs = archs;
    mo.seeds = a.seeds;
    mo.lr = a.lr;
    mo.search_lr = a.search_lr;
    mo.epochs = a.epochs;
    mo.batch_size = a.batch;
    mo.weight_decay = a.wd;
    mo.heads = a.heads;
    mo.queries = a.queries;
    mo.prototypes = a.prototypes;

    MatrixJob job;
    job.dataset = dataset;
    job.jfe = &jfe;
    job.ife = &ife;
    const std::vector<ResultRow> rows = run_matrix({job}, mo);

    fs::create_directories(a.out);
    write_results_csv((fs::path(a.out) / "results.csv").string(), rows);
    const std::vector<SummaryRow> summary = summarize_matrix(rows, {dataset}, archs);
    write_summary_csv((fs::path(a.out) / "summary.csv").string(), summary);

    std::vector<std::string> arch_names;
    for (PoolArch arch : archs) arch_names.emplace_back(pool_arch_name(arch));
    Echo e;
    e.add("data", a.data);
    e.add("out", a.out);
    e.add("grid", a.grid);
    e.add("archs", join_names(arch_names));
    e.add("seeds", join_seeds(a.seeds));
    e.add("lr", a.lr);
    e.add("search-lr", a.search_lr);
    e.add("epochs", a.epochs);
    e.add("batch", a.batch);
    e.add("wd", a.wd);
    e.add("heads", a.heads);
    e.add("queries", a.queries);
    e.add("prototypes", a.prototypes);
    echo_encoder(e, a.enc);
    e.add("dataset-name", dataset);
    e.add("jobs", a.jobs);
    write_manifest(fs::path(a.out) / "run_manifest.txt",
                   {"sweep", a.config_path, a.out, join_seeds(a.seeds), started, e.kv});
    std::cout << "sweep: " << rows.size() << " probe runs -> results.csv, summary.csv\n";
}

// ---------------------------------------------------------------------------
// diversity
// ---------------------------------------------------------------------------

struct DiversityArgs {
    std::string features;
    std::string out;
    std::string source = "patch";
    std::string dataset_name;
    double filter = 0.75;
    std::size_t max_instances = 0;
    std::size_t jobs = 1;
    std::string config_path;
};

void run_diversity(const DiversityArgs& a) {
    const std::string started = iso_utc_now();
    require_value(a.features, "--features");
    require_value(a.out, "--out");
    const FeatureReader reader(a.features);
    const TokenSource source = a.source == "cls" ? TokenSource::cls : TokenSource::patch;
    std::size_t n = reader.header().sample_count;
    if (a.max_instances > 0 && a.max_instances < n) n = a.max_instances;
    if (n == 0) throw std::runtime_error("diversity: " + a.features + " holds no records");

    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto [fm, label] = reader.read(i);
        (void)label;
        sum += instance_diversity(fm, source, a.filter);
    }
    DiversityReport rep;
    rep.dataset = a.dataset_name.empty() ? file_stem(a.features) : a.dataset_name;
    rep.mode = reader.header().mode;
    rep.source = source;
    rep.filter_fraction = a.filter;
    rep.mean_similarity = sum / static_cast<double>(n);
    rep.instances = n;

    fs::create_directories(a.out);
    const std::string csv = (fs::path(a.out) / "diversity.csv").string();
    if (source == TokenSource::cls)
        write_fig2_csv(csv, {rep});
    else
        write_fig5_csv(csv, {rep});

    Echo e;
    e.add("features", a.features);
    e.add("out", a.out);
    e.add("source", a.source);
    e.add("dataset-name", rep.dataset);
    e.add("filter", a.filter);
    e.add("max-instances", a.max_instances);
    e.add("jobs", a.jobs);
    write_manifest(fs::path(a.out) / "run_manifest.txt",
                   {"diversity", a.config_path, a.out, "", started, e.kv});
    std::cout << "diversity: mean similarity " << fmt10(rep.mean_similarity) << " over " << n
              << " instances\n";
}

// ---------------------------------------------------------------------------
// flops
// ---------------------------------------------------------------------------

struct FlopsArgs {
    std::size_t C = 8;
    std::size_t N = 196;
    std::size_t D = 384;
    std::size_t heads = 4;
    std::size_t queries = 4;
    std::size_t prototypes = 8;
    std::string out; // empty -> stdout
    std::string config_path;
};

void run_flops(const FlopsArgs& a) {
    const std::string started = iso_utc_now();
    std::vector<CostReport> reports;
    for (PoolArch arch : all_pool_archs())
        for (PoolStrategy s : {PoolStrategy::JAP, PoolStrategy::DCP})
            reports.push_back(
                pooler_flops(arch, s, a.C, a.N, a.D, a.heads, a.queries, a.prototypes));

    if (a.out.empty()) {
        write_fig6_csv(std::cout, reports);
        return;
    }
    fs::create_directories(a.out);
    write_fig6_csv((fs::path(a.out) / "fig6.csv").string(), reports);
    Echo e;
    e.add("C", a.C);
    e.add("N", a.N);
    e.add("D", a.D);
    e.add("heads", a.heads);
    e.add("queries", a.queries);
    e.add("prototypes", a.prototypes);
    e.add("out", a.out);
    write_manifest(fs::path(a.out) / "run_manifest.txt",
                   {"flops", a.config_path, a.out, "", started, e.kv});
    std::cout << "flops: wrote fig6.csv (" << reports.size() << " rows)\n";
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportArgs {
    std::string results;
    std::string out;
    std::string config_path;
};

void run_report(const ReportArgs& a) {
    const std::string started = iso_utc_now();
    require_value(a.results, "--results");
    require_value(a.out, "--out");
    std::ifstream in(a.results);
    if (!in) throw std::runtime_error("report: cannot open " + a.results);
    std::string line;
    if (!std::getline(in, line) || line != "dataset,encoding,strategy,arch,seed,lr,val_acc,test_acc")
        throw std::runtime_error("report: " + a.results + " is not a results.csv (bad header)");

    std::vector<ResultRow> rows;
    std::vector<std::string> datasets;
    std::vector<PoolArch> archs;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::vector<std::string> f = split_on(line, ',');
        if (f.size() != 8)
            throw std::runtime_error("report: malformed row at line " + std::to_string(lineno) +
                                     " in " + a.results);
        ResultRow r;
        try {
            r.dataset = f[0];
            r.encoding = encoding_from_name(f[1]);
            r.strategy = strategy_from_name(f[2]);
            r.arch = pool_arch_from_name(f[3]);
            r.seed = std::stoull(f[4]);
            r.lr = std::stod(f[5]);
            r.val_acc = std::stod(f[6]);
            r.test_acc = std::stod(f[7]);
        } catch (const std::exception& ex) {
            throw std::runtime_error("report: malformed row at line " + std::to_string(lineno) +
                                     ": " + ex.what());
        }
        if (std::find(datasets.begin(), datasets.end(), r.dataset) == datasets.end())
            datasets.push_back(r.dataset);
        if (std::find(archs.begin(), archs.end(), r.arch) == archs.end()) archs.push_back(r.arch);
        rows.push_back(std::move(r));
    }

    const std::vector<SummaryRow> summary = summarize_matrix(rows, datasets, archs);
    fs::create_directories(a.out);
    write_summary_csv((fs::path(a.out) / "summary.csv").string(), summary);
    Echo e;
    e.add("results", a.results);
    e.add("out", a.out);
    write_manifest(fs::path(a.out) / "run_manifest.txt",
                   {"report", a.config_path, a.out, "", started, e.kv});
    std::cout << "report: " << summary.size() << " summary rows from " << rows.size()
              << " result rows\n";
}

} // namespace

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"channel-aware probing laboratory: synthetic multi-channel imagery, "
                 "frozen-encoder feature extraction, attentive probes and analytic cost models"};
    app.require_subcommand(1);

    const std::vector<std::string> mode_names = {"jfe", "ife"};
    const std::vector<std::string> strategy_names = {"jap", "dcp"};
    const std::vector<std::string> split_names = {"train", "val", "test"};
    std::vector<std::string> arch_names;
    for (PoolArch arch : all_pool_archs()) arch_names.emplace_back(pool_arch_name(arch));

    // gen-data --------------------------------------------------------------
    auto gd = std::make_shared<GenDataArgs>();
    auto gd_bind = std::make_shared<ConfigBinder>();
    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic multi-channel dataset");
    gd_bind->bind(gen->add_option("--out", gd->out, "output directory (required)"), gd->out);
    gd_bind->bind(gen->add_option("--channels", gd->channels, "channel count C (>= 2)")
                      ->capture_default_str(),
                  gd->channels);
    gd_bind->bind(gen->add_option("--image-size", gd->image_size, "square image size")
                      ->capture_default_str(),
                  gd->image_size);
    gd_bind->bind(gen->add_option("--classes", gd->classes, "class count K")->capture_default_str(),
                  gd->classes);
    gd_bind->bind(gen->add_option("--rho", gd->rho, "channel redundancy in [0,1]")
                      ->capture_default_str(),
                  gd->rho);
    gd_bind->bind(gen->add_option("--minority", gd->minority, "label-bearing channel index")
                      ->capture_default_str(),
                  gd->minority);
    gd_bind->bind(gen->add_option("--noise", gd->noise, "pixel noise stddev")->capture_default_str(),
                  gd->noise);
    gd_bind->bind(gen->add_option("--seed", gd->seed, "generator seed")->capture_default_str(),
                  gd->seed);
    gd_bind->bind(gen->add_option("--train", gd->n_train, "training samples")->capture_default_str(),
                  gd->n_train);
    gd_bind->bind(gen->add_option("--val", gd->n_val, "validation samples")->capture_default_str(),
                  gd->n_val);
    gd_bind->bind(gen->add_option("--test", gd->n_test, "test samples")->capture_default_str(),
                  gd->n_test);
    add_jobs_opt(gen, *gd_bind, gd->jobs);
    add_config_opt(gen, gd->config_path);
    gen->callback([gd, gd_bind] {
        gd_bind->apply(gd->config_path);
        run_gen_data(*gd);
    });

    // extract ---------------------------------------------------------------
    auto ex = std::make_shared<ExtractArgs>();
    auto ex_bind = std::make_shared<ConfigBinder>();
    CLI::App* extract = app.add_subcommand(
        "extract", "run the frozen encoder over a sample store and write feature files");
    ex_bind->bind(extract->add_option("--mode", ex->mode, "encoding: jfe or ife (required)")
                      ->check(CLI::IsMember(mode_names)),
                  ex->mode);
    ex_bind->bind(
        extract->add_option(
            "--data", ex->data,
            "dataset directory (train/val/test.mcis) or a single .mcis file (required)"),
        ex->data);
    ex_bind->bind(extract->add_option("--out", ex->out,
                                      "output directory, or a single .mcif path (required)"),
                  ex->out);
    ex_bind->bind(extract->add_option("--split", ex->split,
                                      "split to extract when --out is a single file")
                      ->check(CLI::IsMember(split_names))
                      ->capture_default_str(),
                  ex->split);
    add_encoder_opts(extract, *ex_bind, ex->enc);
    add_jobs_opt(extract, *ex_bind, ex->jobs);
    add_config_opt(extract, ex->config_path);
    extract->callback([ex, ex_bind] {
        ex_bind->apply(ex->config_path);
        run_extract(*ex);
    });

    // train -----------------------------------------------------------------
    auto ta = std::make_shared<TrainArgs>();
    auto ta_bind = std::make_shared<ConfigBinder>();
    CLI::App* train = app.add_subcommand("train", "train one attentive probe on stored features");
    ta_bind->bind(train->add_option("--features", ta->features,
                                    "feature directory holding train/val[/test].mcif (required)"),
                  ta->features);
    ta_bind->bind(train->add_option("--out", ta->out, "output directory (required)"), ta->out);
    ta_bind->bind(train->add_option("--mode", ta->mode, "encoding: jfe or ife (required)")
                      ->check(CLI::IsMember(mode_names)),
                  ta->mode);
    ta_bind->bind(train->add_option("--strategy", ta->strategy,
                                    "pooling strategy: jap or dcp (required)")
                      ->check(CLI::IsMember(strategy_names)),
                  ta->strategy);
    ta_bind->bind(train->add_option("--arch", ta->arch, "pooler arch (required)")
                      ->check(CLI::IsMember(arch_names)),
                  ta->arch);
    ta_bind->bind(train->add_option("--dataset-name", ta->dataset_name,
                                    "dataset label for result rows"),
                  ta->dataset_name);
    ta_bind->bind(train->add_option("--lr", ta->lr, "learning rate")->capture_default_str(),
                  ta->lr);
    ta_bind->bind(train->add_option("--wd", ta->wd, "weight decay")->capture_default_str(), ta->wd);
    ta_bind->bind(train->add_option("--batch", ta->batch, "batch size")->capture_default_str(),
                  ta->batch);
    ta_bind->bind(train->add_option("--epochs", ta->epochs, "training epochs")
                      ->capture_default_str(),
                  ta->epochs);
    ta_bind->bind(train->add_option("--seed", ta->seed, "probe seed")->capture_default_str(),
                  ta->seed);
    ta_bind->bind(train->add_option("--heads", ta->heads, "pooler heads (mab/mhca)")
                      ->capture_default_str(),
                  ta->heads);
    ta_bind->bind(train->add_option("--queries", ta->queries, "pooler queries (ep)")
                      ->capture_default_str(),
                  ta->queries);
    ta_bind->bind(train->add_option("--prototypes", ta->prototypes, "pooler prototypes (protobin)")
                      ->capture_default_str(),
                  ta->prototypes);
    ta_bind->bind(train->add_flag("--search-lr", ta->search_lr,
                                  "choose the learning rate with the search protocol first"),
                  ta->search_lr);
    add_jobs_opt(train, *ta_bind, ta->jobs);
    add_config_opt(train, ta->config_path);
    train->callback([ta, ta_bind] {
        ta_bind->apply(ta->config_path);
        run_train(*ta);
    });

    // sweep -----------------------------------------------------------------
    auto sw = std::make_shared<SweepArgs>();
    auto sw_bind = std::make_shared<ConfigBinder>();
    CLI::App* sweep = app.add_subcommand(
        "sweep", "run the {jfe,ife} x {jap,dcp} x archs x seeds probe matrix on a dataset");
    sw_bind->bind(sweep->add_option("--data", sw->data, "dataset directory from gen-data (required)"),
                  sw->data);
    sw_bind->bind(sweep->add_option("--out", sw->out, "output directory (required)"), sw->out);
    sw_bind->bind(sweep->add_option("--grid", sw->grid, "named grid (only: default)")
                      ->check(CLI::IsMember(std::vector<std::string>{"default"}))
                      ->capture_default_str(),
                  sw->grid);
    sw_bind->bind(sweep->add_option("--archs", sw->archs, "subset of pooler archs, comma-separated")
                      ->delimiter(',')
                      ->check(CLI::IsMember(arch_names)),
                  sw->archs);
    sw_bind->bind(sweep->add_option("--seeds", sw->seeds, "probe seeds, comma-separated")
                      ->delimiter(','),
                  sw->seeds);
    sw_bind->bind(sweep->add_option("--lr", sw->lr, "fixed learning rate when the search is off")
                      ->capture_default_str(),
                  sw->lr);
    sw_bind->bind(sweep->add_flag("--search-lr,!--no-search-lr", sw->search_lr,
                                  "run the LR-search protocol per cell (default on)"),
                  sw->search_lr);
    sw_bind->bind(sweep->add_option("--epochs", sw->epochs, "training epochs")
                      ->capture_default_str(),
                  sw->epochs);
    sw_bind->bind(sweep->add_option("--batch", sw->batch, "batch size")->capture_default_str(),
                  sw->batch);
    sw_bind->bind(sweep->add_option("--wd", sw->wd, "weight decay")->capture_default_str(), sw->wd);
    sw_bind->bind(sweep->add_option("--heads", sw->heads, "pooler heads (mab/mhca)")
                      ->capture_default_str(),
                  sw->heads);
    sw_bind->bind(sweep->add_option("--queries", sw->queries, "pooler queries (ep)")
                      ->capture_default_str(),
                  sw->queries);
    sw_bind->bind(sweep->add_option("--prototypes", sw->prototypes, "pooler prototypes (protobin)")
                      ->capture_default_str(),
                  sw->prototypes);
    add_encoder_opts(sweep, *sw_bind, sw->enc);
    sw_bind->bind(sweep->add_option("--dataset-name", sw->dataset_name,
                                    "dataset label for result rows"),
                  sw->dataset_name);
    add_jobs_opt(sweep, *sw_bind, sw->jobs);
    add_config_opt(sweep, sw->config_path);
    sweep->callback([sw, sw_bind] {
        sw_bind->apply(sw->config_path);
        run_sweep(*sw);
    });

    // diversity -------------------------------------------------------------
    auto dv = std::make_shared<DiversityArgs>();
    auto dv_bind = std::make_shared<ConfigBinder>();
    CLI::App* diversity =
        app.add_subcommand("diversity", "measure inter-channel feature similarity on a .mcif file");
    dv_bind->bind(diversity->add_option("--features", dv->features, "feature file (.mcif, required)"),
                  dv->features);
    dv_bind->bind(diversity->add_option("--out", dv->out, "output directory (required)"), dv->out);
    dv_bind->bind(diversity->add_option("--source", dv->source,
                                        "token source: cls (ife files only) or patch")
                      ->check(CLI::IsMember(std::vector<std::string>{"cls", "patch"}))
                      ->capture_default_str(),
                  dv->source);
    dv_bind->bind(diversity->add_option("--dataset-name", dv->dataset_name,
                                        "dataset label for report rows"),
                  dv->dataset_name);
    dv_bind->bind(diversity->add_option("--filter", dv->filter,
                                        "fraction of most-similar positions to drop")
                      ->check(CLI::Range(0.0, 1.0))
                      ->capture_default_str(),
                  dv->filter);
    dv_bind->bind(diversity->add_option("--max-instances", dv->max_instances,
                                        "cap on instances (0 = all)")
                      ->capture_default_str(),
                  dv->max_instances);
    add_jobs_opt(diversity, *dv_bind, dv->jobs);
    add_config_opt(diversity, dv->config_path);
    diversity->callback([dv, dv_bind] {
        dv_bind->apply(dv->config_path);
        run_diversity(*dv);
    });

    // flops -----------------------------------------------------------------
    auto fl = std::make_shared<FlopsArgs>();
    auto fl_bind = std::make_shared<ConfigBinder>();
    CLI::App* flops =
        app.add_subcommand("flops", "emit the analytic jap-vs-dcp cost table for all archs");
    fl_bind->bind(flops->add_option("--C", fl->C, "channel count")
                      ->check(CLI::PositiveNumber)
                      ->capture_default_str(),
                  fl->C);
    fl_bind->bind(flops->add_option("--N", fl->N, "tokens per channel")
                      ->check(CLI::PositiveNumber)
                      ->capture_default_str(),
                  fl->N);
    fl_bind->bind(flops->add_option("--D", fl->D, "embedding dimension")
                      ->check(CLI::PositiveNumber)
                      ->capture_default_str(),
                  fl->D);
    fl_bind->bind(flops->add_option("--heads", fl->heads, "pooler heads (mab/mhca)")
                      ->check(CLI::PositiveNumber)
                      ->capture_default_str(),
                  fl->heads);
    fl_bind->bind(flops->add_option("--queries", fl->queries, "pooler queries (ep)")
                      ->check(CLI::PositiveNumber)
                      ->capture_default_str(),
                  fl->queries);
    fl_bind->bind(flops->add_option("--prototypes", fl->prototypes, "pooler prototypes (protobin)")
                      ->check(CLI::PositiveNumber)
                      ->capture_default_str(),
                  fl->prototypes);
    fl_bind->bind(flops->add_option("--out", fl->out,
                                    "output directory (omit to print to stdout)"),
                  fl->out);
    add_config_opt(flops, fl->config_path);
    flops->callback([fl, fl_bind] {
        fl_bind->apply(fl->config_path);
        run_flops(*fl);
    });

    // report ----------------------------------------------------------------
    auto rp = std::make_shared<ReportArgs>();
    auto rp_bind = std::make_shared<ConfigBinder>();
    CLI::App* report =
        app.add_subcommand("report", "summarize a results.csv into per-cell means and deltas");
    rp_bind->bind(report->add_option("--results", rp->results,
                                     "results.csv from sweep or train (required)"),
                  rp->results);
    rp_bind->bind(report->add_option("--out", rp->out, "output directory (required)"), rp->out);
    add_config_opt(report, rp->config_path);
    report->callback([rp, rp_bind] {
        rp_bind->apply(rp->config_path);
        run_report(*rp);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const CLI::App* active = &app;
        const std::vector<CLI::App*> parsed = app.get_subcommands();
        if (!parsed.empty()) active = parsed.front();
        if (e.get_exit_code() == 0) { // --help and friends
            std::cout << active->help();
            return 0;
        }
        std::cerr << active->help();
        std::cerr << "error: usage: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace cap
