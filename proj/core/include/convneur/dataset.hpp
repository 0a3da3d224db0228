#pragma once

#include "convneur/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace convneur {

struct Dataset {
    Tensor images;  // [N, C, H, W] in [0, 1]; left empty when N = 0
    std::vector<std::size_t> labels;
    std::size_t num_classes = 0;
    std::string split;

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }
    Tensor image(std::size_t index) const;
    // Throws DataError if labels or pixel values are out of range.
    void validate() const;
};

// IDX files: big-endian, images magic 0x00000803 (N, rows, cols, u8 pixels),
// labels magic 0x00000801 (N, u8 labels). Pixels are scaled to [0, 1].
// num_classes is 1 + the largest label unless given.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t num_classes = 0, const std::string& split = "train");

// Replicates single-channel images to `channels` and zero-pads H, W up to a multiple of `multiple`.
Dataset adapt_channels(const Dataset& data, std::size_t channels = 3, std::size_t multiple = 32);

struct SynthOptions {
    double noise_max = 0.4;     // background uniform in [0, noise_max]
    double marker_min = 0.8;    // marker pixels uniform in [marker_min, 1]
    std::size_t margin = 4;     // marker centers keep this distance from the border
};

// Two bright 3x3 markers on a noisy 3-channel background, centers at least
// image_size / 2 apart. The label is the undirected orientation of the pair in
// [0, 180) quantized into num_classes bins centered on 0, 180/K, ...
// Classes are balanced: sample i has class i mod K.
Dataset synth_global_task(std::size_t n, std::size_t image_size, std::size_t num_classes, std::uint64_t seed,
                          const std::string& split = "train", const SynthOptions& options = {});

// Orientation bin for a marker displacement (dy down, dx right).
std::size_t orientation_class(double dy, double dx, std::size_t num_classes);

struct ProbeOptions {
    std::size_t patch = 7;
    std::size_t epochs = 300;
    double lr = 0.5;
    double l2 = 1e-4;
};

// Linear probe with a patch x patch receptive field: the features are the
// zero-padded patches averaged over every position, followed by softmax
// regression. Returns validation top-1.
double linear_probe_accuracy(const Dataset& train, const Dataset& val, const ProbeOptions& options = {});

}  // namespace convneur
