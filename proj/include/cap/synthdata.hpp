#pragma once

#include "cap/image.hpp"
#include "cap/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cap {

// Synthetic multi-channel images. Each channel renders an oriented grating
// whose orientation encodes that channel's latent; the label is the class
// bin of the minority channel's latent only. The redundancy knob blends
// every other channel's latent toward the minority latent, so rho=1 makes
// channels pixel-identical and rho=0 makes their latents independent.
struct GeneratorConfig {
    std::size_t channels = 4;         // C >= 2
    std::size_t image_size = 32;
    std::size_t classes = 4;          // K >= 2
    double redundancy = 0.0;          // rho in [0, 1]
    std::size_t minority_channel = 0; // m < C, the only label-bearing channel
    double noise = 0.05;              // pixel noise stddev, >= 0
    std::uint64_t seed = 0;

    void validate() const;
};

// Class bin of a latent in [0, 1): floor(latent * K) clamped to K-1.
std::size_t latent_class(double latent, std::size_t classes);

// Renders one image from explicit latents. Phase and noise come from the
// per-sample stream, shared across channels, so channel c's pixels depend
// only on latents[c] plus the shared draws.
MultiChannelImage render_sample(const std::vector<double>& latents, const GeneratorConfig& cfg,
                                RngStream stream);

// Pure function of (cfg.seed, index): draws the minority latent inside the
// bin `index % K`, blends the other channels, renders. Safe to call from
// multiple threads.
MultiChannelImage generate_sample(const GeneratorConfig& cfg, std::size_t index);

struct Dataset {
    std::vector<MultiChannelImage> train;
    std::vector<MultiChannelImage> val;
    std::vector<MultiChannelImage> test;
};

// Splits take disjoint global index ranges, so classes stay balanced within
// each split (labels cycle with the index).
Dataset generate_dataset(const GeneratorConfig& cfg, std::size_t n_train, std::size_t n_val,
                         std::size_t n_test);

struct DatasetPaths {
    std::string train;
    std::string val;
    std::string test;
    std::string manifest;
};

// Writes train/val/test sample stores plus a manifest (cfg echo, counts,
// split index ranges) into `dir`, creating it if needed.
DatasetPaths write_dataset(const std::string& dir, const GeneratorConfig& cfg,
                           std::size_t n_train, std::size_t n_val, std::size_t n_test);

} // namespace cap
