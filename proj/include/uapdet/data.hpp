#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "uapdet/io.hpp"
#include "uapdet/rng.hpp"
#include "uapdet/tensor.hpp"

namespace uapdet {

// A labelled set of images, pixels in [0,1], with stable per-sample ids so
// that splits can be checked for disjointness.
struct ImageBatch {
    Tensor images;  // [N,C,H,W]
    std::vector<int> labels;
    std::vector<int64_t> ids;
    int num_classes = 0;

    int64_t size() const { return images.empty() ? 0 : images.dim(0); }
    int64_t pixels_per_image() const { return images.dim(1) * images.dim(2) * images.dim(3); }

    ImageBatch select(const std::vector<int64_t>& idx) const {
        ImageBatch out;
        out.num_classes = num_classes;
        const int64_t p = pixels_per_image();
        out.images = Tensor({static_cast<int64_t>(idx.size()), images.dim(1), images.dim(2), images.dim(3)});
        out.labels.reserve(idx.size());
        out.ids.reserve(idx.size());
        for (size_t k = 0; k < idx.size(); ++k) {
            const int64_t i = idx[k];
            std::copy_n(images.data() + i * p, p, out.images.data() + static_cast<int64_t>(k) * p);
            out.labels.push_back(labels[static_cast<size_t>(i)]);
            out.ids.push_back(ids[static_cast<size_t>(i)]);
        }
        return out;
    }

    ImageBatch slice(int64_t begin, int64_t end) const {
        std::vector<int64_t> idx;
        idx.reserve(static_cast<size_t>(end - begin));
        for (int64_t i = begin; i < end; ++i) idx.push_back(i);
        return select(idx);
    }

    uint64_t fingerprint() const {
        uint64_t h = fnv1a64(images.data(), static_cast<size_t>(images.numel()) * sizeof(float));
        h = fnv1a64(labels.data(), labels.size() * sizeof(int), h);
        return h;
    }
};

struct SplitSpec {
    uint64_t seed = 0;
    int64_t n_train = -1;  // -1: everything not taken by validation
    int64_t n_validation = 0;
    int64_t n_clean_per_class = 0;
    bool balance_clean = true;
};

namespace detail {

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;

inline uint32_t be32(ByteReader& r) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | r.u8();
    return v;
}

}  // namespace detail

// IDX image + label file pair (raw or gzip-compressed), pixels scaled to [0,1].
inline ImageBatch load_idx(const std::string& images_path, const std::string& labels_path,
                           int64_t id_base = 0) {
    const std::vector<uint8_t> img_bytes = read_maybe_gzipped(images_path);
    const std::vector<uint8_t> lbl_bytes = read_maybe_gzipped(labels_path);

    ByteReader ir(img_bytes, images_path);
    const uint32_t im = detail::be32(ir);
    if (im != detail::kIdxImagesMagic)
        ir.fail("bad IDX image magic 0x" + std::to_string(im));
    const int64_t n = detail::be32(ir);
    const int64_t rows = detail::be32(ir);
    const int64_t cols = detail::be32(ir);
    if (ir.remaining() < static_cast<size_t>(n * rows * cols))
        ir.fail("truncated image data, expected " + std::to_string(n * rows * cols) + " bytes");

    ByteReader lr(lbl_bytes, labels_path);
    const uint32_t lm = detail::be32(lr);
    if (lm != detail::kIdxLabelsMagic)
        lr.fail("bad IDX label magic 0x" + std::to_string(lm));
    const int64_t ln = detail::be32(lr);
    if (ln != n)
        throw FormatError(labels_path + ": label count " + std::to_string(ln) +
                          " does not match image count " + std::to_string(n));

    ImageBatch out;
    out.images = Tensor({n, 1, rows, cols});
    out.labels.resize(static_cast<size_t>(n));
    out.ids.resize(static_cast<size_t>(n));
    int max_label = 0;
    for (int64_t i = 0; i < n; ++i) {
        const int lab = lr.u8();
        out.labels[static_cast<size_t>(i)] = lab;
        max_label = std::max(max_label, lab);
        out.ids[static_cast<size_t>(i)] = id_base + i;
    }
    float* dst = out.images.data();
    for (int64_t i = 0; i < n * rows * cols; ++i) dst[i] = static_cast<float>(ir.u8()) / 255.0f;
    out.num_classes = max_label + 1;
    return out;
}

// Resolves "name" or "name.gz" under a dataset directory.
inline std::string resolve_dataset_file(const std::string& dir, const std::string& name) {
    namespace fs = std::filesystem;
    const fs::path plain = fs::path(dir) / name;
    if (fs::exists(plain)) return plain.string();
    const fs::path gz = fs::path(dir) / (name + ".gz");
    if (fs::exists(gz)) return gz.string();
    throw FormatError("dataset file not found: " + plain.string() + " (also tried .gz)");
}

// Standard MNIST layout: 60,000 train and 10,000 test samples of 1x28x28.
inline std::pair<ImageBatch, ImageBatch> load_mnist(const std::string& dir) {
    ImageBatch train = load_idx(resolve_dataset_file(dir, "train-images-idx3-ubyte"),
                                resolve_dataset_file(dir, "train-labels-idx1-ubyte"), 0);
    ImageBatch test = load_idx(resolve_dataset_file(dir, "t10k-images-idx3-ubyte"),
                               resolve_dataset_file(dir, "t10k-labels-idx1-ubyte"), 1'000'000);
    train.num_classes = test.num_classes = std::max(train.num_classes, test.num_classes);
    return {std::move(train), std::move(test)};
}

// CIFAR-10 binary format: records of 1 label byte + 3072 pixel bytes.
inline ImageBatch load_cifar10_file(const std::string& path, int64_t id_base = 0) {
    constexpr int64_t kRecord = 3073;
    constexpr int64_t kPixels = 3072;
    const std::vector<uint8_t> bytes = read_maybe_gzipped(path);
    if (bytes.empty() || bytes.size() % kRecord != 0)
        throw FormatError(path + ": size " + std::to_string(bytes.size()) +
                          " is not a multiple of the 3073-byte record");
    const int64_t n = static_cast<int64_t>(bytes.size()) / kRecord;
    ImageBatch out;
    out.images = Tensor({n, 3, 32, 32});
    out.labels.resize(static_cast<size_t>(n));
    out.ids.resize(static_cast<size_t>(n));
    int max_label = 0;
    for (int64_t i = 0; i < n; ++i) {
        const uint8_t* rec = bytes.data() + i * kRecord;
        const int lab = rec[0];
        if (lab > 9) throw FormatError(path + ": label byte " + std::to_string(lab) + " out of range at record " +
                                       std::to_string(i));
        out.labels[static_cast<size_t>(i)] = lab;
        max_label = std::max(max_label, lab);
        out.ids[static_cast<size_t>(i)] = id_base + i;
        float* dst = out.images.data() + i * kPixels;
        for (int64_t k = 0; k < kPixels; ++k) dst[k] = static_cast<float>(rec[1 + k]) / 255.0f;
    }
    out.num_classes = std::max(10, max_label + 1);
    return out;
}

inline std::pair<ImageBatch, ImageBatch> load_cifar10(const std::vector<std::string>& train_files,
                                                      const std::string& test_file) {
    if (train_files.empty()) throw ArgumentError("load_cifar10: no training files given");
    std::vector<ImageBatch> parts;
    int64_t base = 0;
    for (const auto& f : train_files) {
        parts.push_back(load_cifar10_file(f, base));
        base += parts.back().size();
    }
    ImageBatch train;
    train.num_classes = 10;
    const int64_t total = base;
    train.images = Tensor({total, 3, 32, 32});
    for (const auto& p : parts) {
        for (int64_t i = 0; i < p.size(); ++i) {
            const int64_t id = p.ids[static_cast<size_t>(i)];
            std::copy_n(p.images.data() + i * 3072, 3072, train.images.data() + id * 3072);
        }
        train.labels.insert(train.labels.end(), p.labels.begin(), p.labels.end());
        train.ids.insert(train.ids.end(), p.ids.begin(), p.ids.end());
    }
    ImageBatch test = load_cifar10_file(test_file, 1'000'000);
    return {std::move(train), std::move(test)};
}

struct DatasetSplits {
    ImageBatch train;
    ImageBatch validation;
};

// Deterministic disjoint train/validation split by seeded shuffle of indices.
inline DatasetSplits make_splits(const ImageBatch& full, const SplitSpec& spec) {
    const int64_t n = full.size();
    if (spec.n_validation < 0 || spec.n_validation > n)
        throw ArgumentError("make_splits: invalid validation size " + std::to_string(spec.n_validation));
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    Rng rng(spec.seed ^ 0x5eed5eed5eed5eedull);
    rng.shuffle(idx);

    std::vector<int64_t> val_idx(idx.begin(), idx.begin() + spec.n_validation);
    std::vector<int64_t> train_idx(idx.begin() + spec.n_validation, idx.end());
    if (spec.n_train >= 0) {
        if (spec.n_train > static_cast<int64_t>(train_idx.size()))
            throw ArgumentError("make_splits: requested " + std::to_string(spec.n_train) +
                                " training samples, only " + std::to_string(train_idx.size()) + " left");
        train_idx.resize(static_cast<size_t>(spec.n_train));
    }
    // keep source order within each split for cache-friendly gathers
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    return {full.select(train_idx), full.select(val_idx)};
}

// Class-balanced trusted clean sample, drawn from the training split.
inline ImageBatch sample_clean_baseline(const ImageBatch& train, const SplitSpec& spec) {
    if (spec.n_clean_per_class <= 0)
        throw ArgumentError("sample_clean_baseline: n_clean_per_class must be positive");
    std::map<int, std::vector<int64_t>> by_class;
    for (int64_t i = 0; i < train.size(); ++i) by_class[train.labels[static_cast<size_t>(i)]].push_back(i);

    Rng rng(spec.seed ^ 0xba5e11aeba5e11aeull);
    std::vector<int64_t> chosen;
    for (int c = 0; c < train.num_classes; ++c) {
        auto it = by_class.find(c);
        const int64_t have = it == by_class.end() ? 0 : static_cast<int64_t>(it->second.size());
        if (have < spec.n_clean_per_class)
            throw ArgumentError("sample_clean_baseline: class " + std::to_string(c) + " has " +
                                std::to_string(have) + " samples, need " +
                                std::to_string(spec.n_clean_per_class));
        std::vector<int64_t>& pool = it->second;
        rng.shuffle(pool);
        chosen.insert(chosen.end(), pool.begin(), pool.begin() + spec.n_clean_per_class);
    }
    return train.select(chosen);
}

inline std::vector<int64_t> class_histogram(const ImageBatch& b) {
    std::vector<int64_t> h(static_cast<size_t>(b.num_classes), 0);
    for (int lab : b.labels) h[static_cast<size_t>(lab)]++;
    return h;
}

}  // namespace uapdet
