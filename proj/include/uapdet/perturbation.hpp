#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "uapdet/autodiff.hpp"
#include "uapdet/data.hpp"
#include "uapdet/io.hpp"
#include "uapdet/rng.hpp"
#include "uapdet/tensor.hpp"

namespace uapdet {

using json = nlohmann::json;

struct AttackConfig {
    float step_size = 0.0f;  // 0 selects the default epsilon/10
    int iterations = 500;
    int batch_size = 64;
    float epsilon = 0.0f;        // l-inf bound on the [0,1] pixel scale (mask attacks)
    float area_fraction = 0.0f;  // patch attacks, fraction of image area in (0, 0.25]
    std::optional<int> target_class;
    std::string target_layer;  // tap name for layer-maximization and defense-aware attacks
    float lambda = 1.0f;       // weight of the baseline penalty in the defense-aware attack
    uint64_t seed = 1;

    json to_json() const {
        json j{{"step_size", step_size}, {"iterations", iterations}, {"batch_size", batch_size},
               {"epsilon", epsilon},     {"area_fraction", area_fraction},
               {"lambda", lambda},       {"seed", seed}};
        if (target_class) j["target_class"] = *target_class;
        if (!target_layer.empty()) j["target_layer"] = target_layer;
        return j;
    }
};

// Full-image l-inf-bounded additive mask.
struct MaskPerturbation {
    Tensor delta;  // [C,H,W]
    float epsilon = 0.0f;
    std::string provenance;  // JSON: attack name, config, seed
};

struct PatchTransformRanges {
    float max_rotation_deg = 22.5f;
    float scale_min = 0.8f;
    float scale_max = 1.2f;
    // when >= 0, the placement center is fixed instead of uniformly sampled
    float center_x = -1.0f;
    float center_y = -1.0f;

    bool fixed_center() const { return center_x >= 0.0f && center_y >= 0.0f; }
};

// Square patch with an inscribed circular mask, placed under random
// translation/rotation/scale.
struct PatchPerturbation {
    Tensor patch;  // [C,S,S], pixels in [0,1]
    float area_fraction = 0.0f;
    PatchTransformRanges ranges;
    std::string provenance;
};

using Perturbation = std::variant<MaskPerturbation, PatchPerturbation>;

inline int64_t patch_side_for(float area_fraction, int64_t H, int64_t W) {
    const double side = std::sqrt(static_cast<double>(area_fraction) * static_cast<double>(H * W));
    return std::max<int64_t>(2, static_cast<int64_t>(std::llround(side)));
}

// x + delta, clipped to [0,1].
inline ImageBatch apply_mask(const ImageBatch& batch, const MaskPerturbation& mask) {
    const int64_t p = batch.pixels_per_image();
    if (mask.delta.numel() != p)
        throw ShapeError("apply_mask: perturbation " + shape_str(mask.delta.shape()) +
                         " does not match image shape " + shape_str(batch.images.shape()));
    ImageBatch out = batch;
    for (int64_t i = 0; i < batch.size(); ++i) {
        float* dst = out.images.data() + i * p;
        for (int64_t k = 0; k < p; ++k)
            dst[k] = std::clamp(dst[k] + mask.delta[k], 0.0f, 1.0f);
    }
    return out;
}

// One placement per image: uniform rotation/scale inside the configured
// ranges, uniform translation over centers that keep the patch in bounds.
inline std::vector<PatchTransform> sample_patch_transforms(const PatchPerturbation& patch, int64_t n,
                                                           int64_t H, int64_t W, Rng& rng) {
    const int64_t S = patch.patch.dim(1);
    std::vector<PatchTransform> out;
    out.reserve(static_cast<size_t>(n));
    const float deg2rad = std::numbers::pi_v<float> / 180.0f;
    for (int64_t i = 0; i < n; ++i) {
        PatchTransform t;
        t.angle = rng.uniform(-patch.ranges.max_rotation_deg, patch.ranges.max_rotation_deg) * deg2rad;
        t.scale = rng.uniform(patch.ranges.scale_min, patch.ranges.scale_max);
        const float half = 0.5f * t.scale * static_cast<float>(S);
        const float ext = half * (std::abs(std::cos(t.angle)) + std::abs(std::sin(t.angle)));
        if (patch.ranges.fixed_center()) {
            t.cx = patch.ranges.center_x;
            t.cy = patch.ranges.center_y;
        } else {
            const float xlo = std::min(ext, static_cast<float>(W) - ext);
            const float xhi = std::max(ext, static_cast<float>(W) - ext);
            const float ylo = std::min(ext, static_cast<float>(H) - ext);
            const float yhi = std::max(ext, static_cast<float>(H) - ext);
            t.cx = rng.uniform(xlo, xhi);
            t.cy = rng.uniform(ylo, yhi);
        }
        out.push_back(t);
    }
    return out;
}

// Renders the patch into every image with a fresh transform per image.
inline ImageBatch apply_patch(const ImageBatch& batch, const PatchPerturbation& patch, uint64_t seed) {
    Rng rng(seed ^ 0x9a7c4u);
    const auto transforms =
        sample_patch_transforms(patch, batch.size(), batch.images.dim(2), batch.images.dim(3), rng);
    Graph g(/*training=*/false);
    const int placed = g.place_patch(g.leaf(batch.images), g.leaf(patch.patch), transforms);
    ImageBatch out = batch;
    out.images = g.value(placed);
    return out;
}

inline ImageBatch apply_perturbation(const ImageBatch& batch, const Perturbation& p, uint64_t seed) {
    if (std::holds_alternative<MaskPerturbation>(p)) return apply_mask(batch, std::get<MaskPerturbation>(p));
    return apply_patch(batch, std::get<PatchPerturbation>(p), seed);
}

inline std::string perturbation_kind(const Perturbation& p) {
    return std::holds_alternative<MaskPerturbation>(p) ? "mask" : "patch";
}

inline const std::string& perturbation_provenance(const Perturbation& p) {
    return std::holds_alternative<MaskPerturbation>(p) ? std::get<MaskPerturbation>(p).provenance
                                                       : std::get<PatchPerturbation>(p).provenance;
}

inline std::string make_provenance(const std::string& attack, const AttackConfig& cfg,
                                   const PatchTransformRanges* ranges = nullptr) {
    json j{{"attack", attack}, {"config", cfg.to_json()}, {"seed", cfg.seed}};
    if (ranges) {
        j["transform_ranges"] = {{"max_rotation_deg", ranges->max_rotation_deg},
                                 {"scale_min", ranges->scale_min},
                                 {"scale_max", ranges->scale_max}};
        if (ranges->fixed_center()) {
            j["transform_ranges"]["center_x"] = ranges->center_x;
            j["transform_ranges"]["center_y"] = ranges->center_y;
        }
    }
    return j.dump();
}

// Perturbation file: "UAPP", version u16, kind u8 (0 mask / 1 patch),
// epsilon-or-area f32, tensor (shape + little-endian f32), provenance JSON.
inline void save_perturbation(const std::string& path, const Perturbation& p) {
    ByteWriter w;
    w.raw("UAPP", 4);
    w.u16(1);
    if (std::holds_alternative<MaskPerturbation>(p)) {
        const auto& m = std::get<MaskPerturbation>(p);
        w.u8(0);
        w.f32(m.epsilon);
        w.tensor(m.delta);
        w.str(m.provenance);
    } else {
        const auto& q = std::get<PatchPerturbation>(p);
        w.u8(1);
        w.f32(q.area_fraction);
        w.tensor(q.patch);
        w.str(q.provenance);
    }
    write_file_bytes(path, w.bytes());
}

inline Perturbation load_perturbation(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    ByteReader r(bytes, path);
    r.expect_magic("UAPP");
    const uint16_t version = r.u16();
    if (version != 1) r.fail("unsupported perturbation version " + std::to_string(version));
    const uint8_t kind = r.u8();
    const float value = r.f32();
    Tensor t = r.tensor();
    std::string provenance = r.str();
    if (kind == 0) {
        MaskPerturbation m;
        m.delta = std::move(t);
        m.epsilon = value;
        m.provenance = std::move(provenance);
        return m;
    }
    if (kind != 1) r.fail("unknown perturbation kind " + std::to_string(kind));
    PatchPerturbation q;
    q.patch = std::move(t);
    q.area_fraction = value;
    q.provenance = std::move(provenance);
    if (!q.provenance.empty()) {
        const json j = json::parse(q.provenance, nullptr, false);
        if (!j.is_discarded() && j.contains("transform_ranges")) {
            const auto& tr = j["transform_ranges"];
            q.ranges.max_rotation_deg = tr.value("max_rotation_deg", q.ranges.max_rotation_deg);
            q.ranges.scale_min = tr.value("scale_min", q.ranges.scale_min);
            q.ranges.scale_max = tr.value("scale_max", q.ranges.scale_max);
            q.ranges.center_x = tr.value("center_x", q.ranges.center_x);
            q.ranges.center_y = tr.value("center_y", q.ranges.center_y);
        }
    }
    return q;
}

}  // namespace uapdet
