#pragma once

#include "deften/tensor.hpp"

#include <string>
#include <vector>

namespace deften {

struct Example {
    Tensord x;
    Index label = 0;
};

using Dataset = std::vector<Example>;

struct SplitFractions {
    double train = 0.8, val = 0.1, test = 0.1;
};

struct DataSplits {
    Dataset train, val, test;
};

// Small grayscale images, one structured template per class (blobs, gratings,
// checkers) with per-example amplitude jitter and pixel noise, values held in
// [0, 1]. The margin knob trades template contrast against noise, which sets
// how adversarially fragile a model trained on it ends up.
struct SyntheticImagesSource {
    Index classes = 4;
    Index height = 8, width = 8;
    Index count = 1000;
    double contrast = 0.85;  // template amplitude
    double jitter = 0.15;    // relative amplitude jitter per example
    double noise = 0.06;     // additive pixel noise, sd
    std::uint64_t seed = 1;
};
Dataset make_synthetic_images(const SyntheticImagesSource& source);

// Audio-shaped (1, 1, length) waveforms: per-class tone mixtures plus noise.
struct Synthetic1dSource {
    Index classes = 12;
    Index length = 16000;
    Index count = 120;
    double noise = 0.05;
    std::uint64_t seed = 1;
};
Dataset make_synthetic_1d(const Synthetic1dSource& source);

// IDX big-endian pair: images file (magic 0x00000803, dims N x rows x cols,
// one unsigned byte per pixel scaled to [0,1]) and labels file (magic
// 0x00000801, N bytes). Throws std::runtime_error on malformed headers or
// mismatched counts.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Deterministic contiguous split in dataset order; fractions must be positive
// and sum to 1 within 1e-9.
DataSplits split_dataset(const Dataset& data, const SplitFractions& fractions = {});

}  // namespace deften
