#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "apd/errors.hpp"
#include "apd/rng.hpp"

namespace apd {

struct Dataset {
    std::string name;
    Eigen::MatrixXd images;  // N x (channels*res*res), values in [0,1]
    std::vector<int> labels;
    std::vector<std::string> class_names;
    std::string split;

    int num_classes() const { return static_cast<int>(class_names.size()); }
    Eigen::Index size() const { return images.rows(); }

    void validate() const {
        if (images.rows() != static_cast<Eigen::Index>(labels.size()))
            throw load_error("dataset '" + name + "': label count mismatch");
        if (images.size() > 0 && (images.minCoeff() < 0.0 || images.maxCoeff() > 1.0))
            throw load_error("dataset '" + name + "': pixel values outside [0,1]");
        for (int y : labels)
            if (y < 0 || y >= num_classes())
                throw load_error("dataset '" + name + "': label out of range");
    }
};

struct SyntheticShapesConfig {
    int resolution = 32;
    int train_per_class = 64;
    int test_per_class = 64;
    double noise = 0.3;  // peak amplitude of the uniform background noise
    std::uint64_t seed = 0;
};

namespace detail {

// 8 classes: {circle, square, triangle, cross} x {red, green}. Shapes are
// drawn with jittered position/size/intensity on a low noise background.
inline const std::vector<std::string>& shape_class_names() {
    static const std::vector<std::string> names = {
        "green_circle", "green_cross", "green_square", "green_triangle",
        "red_circle",   "red_cross",   "red_square",   "red_triangle"};
    return names;
}

inline void render_shape(Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> out, int res,
                         int cls, double noise_level, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (Eigen::Index i = 0; i < out.size(); ++i) out(i) = noise_level * u01(rng);

    const std::string& name = shape_class_names()[static_cast<std::size_t>(cls)];
    const bool red = name.rfind("red", 0) == 0;
    const std::string shape = name.substr(name.find('_') + 1);

    std::uniform_real_distribution<double> ucenter(0.42 * res, 0.58 * res);
    std::uniform_real_distribution<double> usize(0.26 * res, 0.36 * res);
    std::uniform_real_distribution<double> ulevel(0.75, 1.0);
    const double cx = ucenter(rng), cy = ucenter(rng), r = usize(rng);
    const double level = ulevel(rng);
    const double rgb[3] = {red ? level : 0.15 * level, red ? 0.15 * level : level, 0.1 * level};

    auto inside = [&](double x, double y) {
        const double dx = x - cx, dy = y - cy;
        if (shape == "circle") return dx * dx + dy * dy <= r * r;
        if (shape == "square") return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
        if (shape == "triangle")
            return dy >= -r && dy <= 0.7 * r && std::abs(dx) <= 0.6 * (dy + r);
        // cross
        return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) ||
               (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
    };
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x)
            if (inside(x + 0.5, y + 0.5))
                for (int c = 0; c < 3; ++c)
                    out(static_cast<Eigen::Index>(c) * res * res + y * res + x) = rgb[c];
}

inline Dataset generate_split(const SyntheticShapesConfig& cfg, const std::string& split,
                              int per_class) {
    const auto& names = shape_class_names();
    const int num_classes = static_cast<int>(names.size());
    Dataset d;
    d.name = "synthetic-shapes";
    d.split = split;
    d.class_names = names;
    d.images.resize(static_cast<Eigen::Index>(per_class) * num_classes,
                    3 * cfg.resolution * cfg.resolution);
    d.labels.reserve(static_cast<std::size_t>(per_class) * num_classes);
    Eigen::Index row = 0;
    for (int cls = 0; cls < num_classes; ++cls) {
        auto rng = make_rng(cfg.seed, "shapes_" + split + "_" + names[static_cast<std::size_t>(cls)]);
        for (int i = 0; i < per_class; ++i) {
            render_shape(d.images.row(row++), cfg.resolution, cls, cfg.noise, rng);
            d.labels.push_back(cls);
        }
    }
    d.validate();
    return d;
}

}  // namespace detail

// Procedurally generated dataset so the whole suite runs without downloads.
inline std::pair<Dataset, Dataset> load_synthetic_shapes(const SyntheticShapesConfig& cfg) {
    return {detail::generate_split(cfg, "train", cfg.train_per_class),
            detail::generate_split(cfg, "test", cfg.test_per_class)};
}

struct FewShotSubset {
    const Dataset* parent = nullptr;
    std::vector<Eigen::Index> indices;
    int shots = 0;
    std::uint64_t seed = 0;
};

// Uniform without-replacement sampling of min(shots, population) examples
// per class; deterministic for fixed (seed, dataset).
inline FewShotSubset sample_few_shot(const Dataset& dataset, int shots, std::uint64_t seed) {
    if (shots < 1) throw config_error("sample_few_shot: shots must be >= 1");
    FewShotSubset subset{&dataset, {}, shots, seed};
    for (int cls = 0; cls < dataset.num_classes(); ++cls) {
        std::vector<Eigen::Index> pool;
        for (Eigen::Index i = 0; i < dataset.size(); ++i)
            if (dataset.labels[static_cast<std::size_t>(i)] == cls) pool.push_back(i);
        if (pool.empty())
            throw input_error("sample_few_shot: class '" +
                              dataset.class_names[static_cast<std::size_t>(cls)] +
                              "' has no examples");
        auto rng = make_rng(seed, "few_shot", static_cast<std::uint64_t>(cls));
        std::shuffle(pool.begin(), pool.end(), rng);
        const std::size_t take = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(shots));
        subset.indices.insert(subset.indices.end(), pool.begin(),
                              pool.begin() + static_cast<std::ptrdiff_t>(take));
    }
    std::sort(subset.indices.begin(), subset.indices.end());
    return subset;
}

struct Batch {
    Eigen::MatrixXd images;
    std::vector<int> labels;
};

// Seeded per-epoch reshuffle; the last partial batch is kept.
inline std::vector<Batch> batches(const FewShotSubset& subset, int batch_size,
                                  std::uint64_t epoch_seed) {
    if (batch_size < 1) throw config_error("batches: batch_size must be >= 1");
    std::vector<Eigen::Index> order = subset.indices;
    auto rng = make_rng(subset.seed, "epoch_shuffle", epoch_seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Batch> out;
    const Dataset& d = *subset.parent;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(batch_size),
                                                    order.size() - at);
        Batch b;
        b.images.resize(static_cast<Eigen::Index>(n), d.images.cols());
        b.labels.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            b.images.row(static_cast<Eigen::Index>(k)) = d.images.row(order[at + k]);
            b.labels[k] = d.labels[static_cast<std::size_t>(order[at + k])];
        }
        out.push_back(std::move(b));
    }
    return out;
}

// Seeded class-stratified subset of a test set, shared across methods so
// comparisons are paired.
inline std::vector<Eigen::Index> stratified_subset(const Dataset& dataset, int max_size,
                                                   std::uint64_t seed) {
    if (max_size <= 0 || static_cast<Eigen::Index>(max_size) >= dataset.size()) {
        std::vector<Eigen::Index> all(static_cast<std::size_t>(dataset.size()));
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    const int per_class =
        std::max(1, max_size / std::max(1, dataset.num_classes()));
    FewShotSubset s = sample_few_shot(dataset, per_class, derive_seed(seed, "eval_subset"));
    return s.indices;
}

}  // namespace apd
