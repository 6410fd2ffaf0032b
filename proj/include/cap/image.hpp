#pragma once

#include "cap/tensor.hpp"

#include <cstdint>
#include <vector>

namespace cap {

// C-channel raster in [0,1] with the per-channel latent factors that
// produced it. All channels share one H x W grid.
struct MultiChannelImage {
    Tensor pixels;               // C x H x W
    std::uint16_t label = 0;
    std::vector<double> latents; // one semantic latent per channel, in [0,1)

    std::size_t channels() const { return pixels.shape.at(0); }
    std::size_t height() const { return pixels.shape.at(1); }
    std::size_t width() const { return pixels.shape.at(2); }
};

} // namespace cap
