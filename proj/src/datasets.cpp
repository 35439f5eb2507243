#include "deften/dataset.hpp"

#include "deften/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace deften {

namespace {

// Per-class spatial templates in [-1, 1]: a centered blob, horizontal and
// vertical gratings, and their product. Mutually near-orthogonal, so a small
// model separates them quickly; contrast vs noise sets the attack margin.
double class_template(Index label, Index i, Index j, Index h, Index w) {
    const double tau = 2.0 * std::numbers::pi;
    switch (label) {
        case 0: {
            const double ci = (static_cast<double>(h) - 1.0) / 2.0;
            const double cj = (static_cast<double>(w) - 1.0) / 2.0;
            const double sigma = static_cast<double>(std::min(h, w)) / 3.5;
            const double r2 = (i - ci) * (i - ci) + (j - cj) * (j - cj);
            return 2.0 * std::exp(-r2 / (2.0 * sigma * sigma)) - 1.0;
        }
        case 1:
            return std::sin(tau * 2.0 * static_cast<double>(i) / static_cast<double>(h));
        case 2:
            return std::sin(tau * 2.0 * static_cast<double>(j) / static_cast<double>(w));
        default:
            return std::sin(tau * 2.0 * static_cast<double>(i) / static_cast<double>(h)) *
                   std::sin(tau * 2.0 * static_cast<double>(j) / static_cast<double>(w));
    }
}

std::uint32_t read_be32(std::istream& in, const std::string& what) {
    unsigned char bytes[4];
    if (!in.read(reinterpret_cast<char*>(bytes), 4))
        throw std::runtime_error("idx: truncated header in " + what);
    return (std::uint32_t(bytes[0]) << 24) | (std::uint32_t(bytes[1]) << 16) |
           (std::uint32_t(bytes[2]) << 8) | std::uint32_t(bytes[3]);
}

}  // namespace

Dataset make_synthetic_images(const SyntheticImagesSource& source) {
    if (source.classes < 2 || source.classes > 4)
        throw std::invalid_argument("synthetic images: class count must be 2..4");
    if (source.height < 4 || source.width < 4)
        throw std::invalid_argument("synthetic images: images must be at least 4x4");
    if (source.count < 1) throw std::invalid_argument("synthetic images: count must be positive");

    Rng rng(source.seed);
    Dataset data;
    data.reserve(static_cast<std::size_t>(source.count));
    for (Index n = 0; n < source.count; ++n) {
        Example ex;
        ex.label = n % source.classes;  // balanced, round-robin
        const double amplitude =
            source.contrast * (1.0 + source.jitter * rng.uniform(-1.0, 1.0));
        ex.x = Tensord({1, source.height, source.width});
        for (Index i = 0; i < source.height; ++i)
            for (Index j = 0; j < source.width; ++j) {
                const double t = class_template(ex.label, i, j, source.height, source.width);
                const double v = 0.5 + 0.5 * amplitude * t + source.noise * rng.normal();
                ex.x(0, i, j) = std::clamp(v, 0.0, 1.0);
            }
        data.push_back(std::move(ex));
    }
    return data;
}

Dataset make_synthetic_1d(const Synthetic1dSource& source) {
    if (source.classes < 2) throw std::invalid_argument("synthetic 1d: need at least 2 classes");
    if (source.length < 8) throw std::invalid_argument("synthetic 1d: length too short");
    if (source.count < 1) throw std::invalid_argument("synthetic 1d: count must be positive");

    const double tau = 2.0 * std::numbers::pi;
    Rng rng(source.seed);
    Dataset data;
    data.reserve(static_cast<std::size_t>(source.count));
    for (Index n = 0; n < source.count; ++n) {
        Example ex;
        ex.label = n % source.classes;
        // class-coded fundamental plus one harmonic, random phases
        const double cycles = 8.0 * static_cast<double>(ex.label + 1);
        const double phase1 = rng.uniform(0.0, tau);
        const double phase2 = rng.uniform(0.0, tau);
        ex.x = Tensord({1, 1, source.length});
        for (Index t = 0; t < source.length; ++t) {
            const double u = static_cast<double>(t) / static_cast<double>(source.length);
            double v = 0.45 * std::sin(tau * cycles * u + phase1) +
                       0.25 * std::sin(tau * 2.0 * cycles * u + phase2) +
                       source.noise * rng.normal();
            ex.x(0, 0, t) = std::clamp(v, -1.0, 1.0);
        }
        data.push_back(std::move(ex));
    }
    return data;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream images(images_path, std::ios::binary);
    if (!images) throw std::runtime_error("idx: cannot open " + images_path);
    if (read_be32(images, images_path) != 0x00000803u)
        throw std::runtime_error("idx: " + images_path + " is not an image file (bad magic)");
    const std::uint32_t n = read_be32(images, images_path);
    const std::uint32_t rows = read_be32(images, images_path);
    const std::uint32_t cols = read_be32(images, images_path);
    if (rows == 0 || cols == 0) throw std::runtime_error("idx: zero image dimensions");

    std::ifstream labels(labels_path, std::ios::binary);
    if (!labels) throw std::runtime_error("idx: cannot open " + labels_path);
    if (read_be32(labels, labels_path) != 0x00000801u)
        throw std::runtime_error("idx: " + labels_path + " is not a label file (bad magic)");
    if (read_be32(labels, labels_path) != n)
        throw std::runtime_error("idx: image and label counts disagree");

    Dataset data;
    data.reserve(n);
    std::vector<unsigned char> pixels(static_cast<std::size_t>(rows) * cols);
    for (std::uint32_t k = 0; k < n; ++k) {
        if (!images.read(reinterpret_cast<char*>(pixels.data()),
                         static_cast<std::streamsize>(pixels.size())))
            throw std::runtime_error("idx: truncated image data in " + images_path);
        char label = 0;
        if (!labels.read(&label, 1))
            throw std::runtime_error("idx: truncated label data in " + labels_path);
        Example ex;
        ex.label = static_cast<unsigned char>(label);
        ex.x = Tensord({1, static_cast<Index>(rows), static_cast<Index>(cols)});
        for (std::size_t p = 0; p < pixels.size(); ++p)
            ex.x[static_cast<Index>(p)] = pixels[p] / 255.0;
        data.push_back(std::move(ex));
    }
    return data;
}

DataSplits split_dataset(const Dataset& data, const SplitFractions& fractions) {
    if (fractions.train <= 0.0 || fractions.val <= 0.0 || fractions.test <= 0.0)
        throw std::invalid_argument("split: fractions must be positive");
    if (std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9)
        throw std::invalid_argument("split: fractions must sum to 1");
    const Index n = static_cast<Index>(data.size());
    const Index n_train = static_cast<Index>(std::floor(fractions.train * n));
    const Index n_val = static_cast<Index>(std::floor(fractions.val * n));
    DataSplits splits;
    splits.train.assign(data.begin(), data.begin() + n_train);
    splits.val.assign(data.begin() + n_train, data.begin() + n_train + n_val);
    splits.test.assign(data.begin() + n_train + n_val, data.end());
    return splits;
}

}  // namespace deften
