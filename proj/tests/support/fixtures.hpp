#pragma once

// Shared test fixtures: temp directories and synthetic dataset files.

#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <chrono>
#include <string>
#include <vector>

#include "uapdet/rng.hpp"

namespace fixtures {

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        uapdet::Rng rng(static_cast<uint64_t>(
            std::chrono::steady_clock::now().time_since_epoch().count()));
        path_ = std::filesystem::temp_directory_path() /
                ("uapdet_" + tag + "_" + std::to_string(rng.next()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_gzip(const std::string& path, const std::vector<uint8_t>& bytes) {
    gzFile gz = gzopen(path.c_str(), "wb");
    gzwrite(gz, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(gz);
}

inline void push_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

// IDX image file: magic 0x803, count, rows, cols, pixel bytes.
inline std::vector<uint8_t> idx_images(const std::vector<std::vector<uint8_t>>& images, uint32_t rows,
                                       uint32_t cols) {
    std::vector<uint8_t> out;
    push_be32(out, 0x00000803);
    push_be32(out, static_cast<uint32_t>(images.size()));
    push_be32(out, rows);
    push_be32(out, cols);
    for (const auto& img : images) out.insert(out.end(), img.begin(), img.end());
    return out;
}

// IDX label file: magic 0x801, count, label bytes.
inline std::vector<uint8_t> idx_labels(const std::vector<uint8_t>& labels) {
    std::vector<uint8_t> out;
    push_be32(out, 0x00000801);
    push_be32(out, static_cast<uint32_t>(labels.size()));
    out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

// A small deterministic IDX dataset: texture-orientation classes (horizontal,
// vertical, diagonal bands) with pixel and label noise. Orientation cues are
// translation-free, so both mask and patch attacks have purchase, and the
// noise keeps a trained net away from saturated softmax outputs.
inline void synth_idx_dataset(const std::string& images_path, const std::string& labels_path, int n,
                              int num_classes, uint32_t side, uint64_t seed,
                              float label_noise = 0.04f) {
    uapdet::Rng rng(seed);
    std::vector<std::vector<uint8_t>> images;
    std::vector<uint8_t> labels;
    for (int i = 0; i < n; ++i) {
        const int cls = i % num_classes;
        std::vector<uint8_t> img(side * side, 0);
        for (uint32_t y = 0; y < side; ++y)
            for (uint32_t x = 0; x < side; ++x) {
                bool bright;
                switch (cls % 3) {
                    case 0: bright = (y % 4) < 2; break;
                    case 1: bright = (x % 4) < 2; break;
                    default: bright = ((x + y) % 4) < 2; break;
                }
                const int base = bright ? 150 : 70;
                const int noise = static_cast<int>(rng.below(70));
                img[y * side + x] = static_cast<uint8_t>(std::min(255, base + noise));
            }
        images.push_back(std::move(img));
        const bool flip = rng.uniform() < label_noise;
        labels.push_back(static_cast<uint8_t>(
            flip ? static_cast<int>(rng.below(static_cast<uint64_t>(num_classes))) : cls));
    }
    write_bytes(images_path, idx_images(images, side, side));
    write_bytes(labels_path, idx_labels(labels));
}

inline std::string mnist_dir() {
    return std::string(UAPDET_SOURCE_DIR) + "/data/mnist";
}

inline bool mnist_available() {
    return std::filesystem::exists(std::filesystem::path(mnist_dir()) / "train-images-idx3-ubyte.gz") ||
           std::filesystem::exists(std::filesystem::path(mnist_dir()) / "train-images-idx3-ubyte");
}

}  // namespace fixtures
