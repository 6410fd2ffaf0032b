#include "cap/synthdata.hpp"

#include "cap/kvfile.hpp"
#include "cap/store.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <stdexcept>
#include <string>

namespace cap {

namespace {

constexpr double kGratingAmplitude = 0.45; // around a 0.5 mean, clamp-free at zero noise
constexpr double kGratingCycles = 3.0;

// Orientation stays inside [0, pi/2] so latent distance maps monotonically
// to orientation distance with no wrap-around.
double orientation_of(double latent) { return latent * std::numbers::pi / 2.0; }

void render_channel(Tensor& pixels, std::size_t channel, double latent, double phase,
                    const std::vector<double>& noise_field, double sigma) {
    const std::size_t s = pixels.shape.at(1);
    const double theta = orientation_of(latent);
    const double cx = std::cos(theta), sx = std::sin(theta);
    const double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            const double u = static_cast<double>(x) / static_cast<double>(s);
            const double v = static_cast<double>(y) / static_cast<double>(s);
            const double t = u * cx + v * sx;
            double val = 0.5 + kGratingAmplitude * std::sin(two_pi * kGratingCycles * t + phase);
            if (sigma > 0.0) val += sigma * noise_field[y * s + x];
            pixels.at(channel, y, x) = std::clamp(val, 0.0, 1.0);
        }
    }
}

} // namespace

void GeneratorConfig::validate() const {
    if (channels < 2) throw std::invalid_argument("generator: channels must be >= 2");
    if (classes < 2) throw std::invalid_argument("generator: classes must be >= 2");
    if (image_size == 0) throw std::invalid_argument("generator: image_size must be positive");
    if (!(redundancy >= 0.0 && redundancy <= 1.0))
        throw std::invalid_argument("generator: redundancy must lie in [0, 1], got " +
                                    std::to_string(redundancy));
    if (minority_channel >= channels)
        throw std::invalid_argument("generator: minority_channel " +
                                    std::to_string(minority_channel) + " >= channels " +
                                    std::to_string(channels));
    if (!(noise >= 0.0) || !std::isfinite(noise))
        throw std::invalid_argument("generator: noise must be finite and >= 0");
    if (classes > 0xFFFF) throw std::invalid_argument("generator: classes exceed label width");
}

std::size_t latent_class(double latent, std::size_t classes) {
    if (!(latent >= 0.0 && latent < 1.0))
        throw std::invalid_argument("latent out of [0, 1): " + std::to_string(latent));
    auto k = static_cast<std::size_t>(latent * static_cast<double>(classes));
    return std::min(k, classes - 1);
}

MultiChannelImage render_sample(const std::vector<double>& latents, const GeneratorConfig& cfg,
                                RngStream stream) {
    cfg.validate();
    if (latents.size() != cfg.channels)
        throw std::invalid_argument("render_sample: got " + std::to_string(latents.size()) +
                                    " latents for " + std::to_string(cfg.channels) + " channels");
    for (double u : latents)
        if (!(u >= 0.0 && u < 1.0))
            throw std::invalid_argument("render_sample: latent out of [0, 1): " +
                                        std::to_string(u));

    // Phase and noise are per-sample but channel-shared: the only
    // cross-channel difference is the latent, which is what makes rho=1
    // produce pixel-identical channels.
    const double phase = stream.next_double() * 2.0 * std::numbers::pi;
    std::vector<double> noise_field;
    if (cfg.noise > 0.0) {
        noise_field.resize(cfg.image_size * cfg.image_size);
        for (double& z : noise_field) z = stream.next_normal();
    }

    MultiChannelImage img;
    img.pixels = Tensor::zeros({cfg.channels, cfg.image_size, cfg.image_size});
    img.latents = latents;
    img.label = static_cast<std::uint16_t>(latent_class(latents[cfg.minority_channel],
                                                        cfg.classes));
    for (std::size_t c = 0; c < cfg.channels; ++c)
        render_channel(img.pixels, c, latents[c], phase, noise_field, cfg.noise);
    return img;
}

MultiChannelImage generate_sample(const GeneratorConfig& cfg, std::size_t index) {
    cfg.validate();
    RngStream stream = RngStream(cfg.seed).split(index);

    // Labels cycle with the index, so any contiguous index range is balanced
    // to within one sample per class.
    const std::size_t cls = index % cfg.classes;
    const double bin_width = 1.0 / static_cast<double>(cfg.classes);
    const double target = (static_cast<double>(cls) + stream.next_double()) * bin_width;

    std::vector<double> latents(cfg.channels);
    for (std::size_t c = 0; c < cfg.channels; ++c) {
        if (c == cfg.minority_channel) {
            latents[c] = target;
        } else {
            const double indep = stream.next_double();
            latents[c] = cfg.redundancy * target + (1.0 - cfg.redundancy) * indep;
        }
    }
    MultiChannelImage img = render_sample(latents, cfg, stream);
    if (img.label != cls) throw std::logic_error("label drifted from its construction bin");
    return img;
}

Dataset generate_dataset(const GeneratorConfig& cfg, std::size_t n_train, std::size_t n_val,
                         std::size_t n_test) {
    cfg.validate();
    if (n_train == 0 || n_val == 0 || n_test == 0)
        throw std::invalid_argument("generate_dataset: all splits must be nonempty");
    Dataset ds;
    ds.train.reserve(n_train);
    ds.val.reserve(n_val);
    ds.test.reserve(n_test);
    std::size_t index = 0;
    for (std::size_t i = 0; i < n_train; ++i) ds.train.push_back(generate_sample(cfg, index++));
    for (std::size_t i = 0; i < n_val; ++i) ds.val.push_back(generate_sample(cfg, index++));
    for (std::size_t i = 0; i < n_test; ++i) ds.test.push_back(generate_sample(cfg, index++));
    return ds;
}

DatasetPaths write_dataset(const std::string& dir, const GeneratorConfig& cfg,
                           std::size_t n_train, std::size_t n_val, std::size_t n_test) {
    cfg.validate();
    if (n_train == 0 || n_val == 0 || n_test == 0)
        throw std::invalid_argument("write_dataset: all splits must be nonempty");
    std::filesystem::create_directories(dir);

    DatasetPaths paths;
    paths.train = (std::filesystem::path(dir) / "train.mcis").string();
    paths.val = (std::filesystem::path(dir) / "val.mcis").string();
    paths.test = (std::filesystem::path(dir) / "test.mcis").string();
    paths.manifest = (std::filesystem::path(dir) / "manifest.txt").string();

    struct Split {
        const std::string* path;
        std::size_t begin, count;
    };
    const Split splits[3] = {
        {&paths.train, 0, n_train},
        {&paths.val, n_train, n_val},
        {&paths.test, n_train + n_val, n_test},
    };
    for (const Split& sp : splits) {
        SampleWriter w(*sp.path, cfg.channels, cfg.image_size, cfg.classes);
        for (std::size_t i = 0; i < sp.count; ++i)
            w.append(generate_sample(cfg, sp.begin + i));
        w.finalize();
    }

    write_kv_file(paths.manifest,
                  {{"kind", "dataset"},
                   {"channels", std::to_string(cfg.channels)},
                   {"image_size", std::to_string(cfg.image_size)},
                   {"classes", std::to_string(cfg.classes)},
                   {"redundancy", std::to_string(cfg.redundancy)},
                   {"minority_channel", std::to_string(cfg.minority_channel)},
                   {"noise", std::to_string(cfg.noise)},
                   {"seed", std::to_string(cfg.seed)},
                   {"n_train", std::to_string(n_train)},
                   {"n_val", std::to_string(n_val)},
                   {"n_test", std::to_string(n_test)},
                   {"train_indices", "0.." + std::to_string(n_train)},
                   {"val_indices",
                    std::to_string(n_train) + ".." + std::to_string(n_train + n_val)},
                   {"test_indices", std::to_string(n_train + n_val) + ".." +
                                        std::to_string(n_train + n_val + n_test)}});
    return paths;
}

} // namespace cap
