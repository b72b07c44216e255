#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "uapdet/detector.hpp"
#include "uapdet/metrics.hpp"
#include "uapdet/model.hpp"
#include "uapdet/perlin.hpp"
#include "uapdet/perturbation.hpp"

namespace uapdet {

namespace detail {

inline float sign_step(float g) { return g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f); }

// Deterministic minibatch cursor: a seeded shuffle of the source indices,
// reshuffled each time the set is exhausted.
class BatchCursor {
public:
    BatchCursor(int64_t n, int batch, uint64_t seed) : n_(n), batch_(std::min<int64_t>(batch, n)), rng_(seed) {
        idx_.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) idx_[static_cast<size_t>(i)] = i;
        rng_.shuffle(idx_);
    }

    std::vector<int64_t> next() {
        if (pos_ + batch_ > n_) {
            rng_.shuffle(idx_);
            pos_ = 0;
        }
        std::vector<int64_t> out(idx_.begin() + pos_, idx_.begin() + pos_ + batch_);
        pos_ += batch_;
        return out;
    }

private:
    int64_t n_;
    int64_t batch_;
    Rng rng_;
    std::vector<int64_t> idx_;
    int64_t pos_ = 0;
};

// Builds a scalar objective from the forward pass of one perturbed minibatch.
using MaskObjective =
    std::function<int(Graph&, const SmallCnn::ForwardNodes&, const ImageBatch& minibatch)>;

// Shared optimizer for every mask attack: ascend (or descend) the objective
// with sign-gradient steps on delta, projecting onto the l-inf ball after
// every step; perturbed inputs are clipped to [0,1] before the forward pass.
inline MaskPerturbation projected_sign_mask_attack(const SmallCnn& model, const ImageBatch& data,
                                                   const AttackConfig& cfg, const std::string& name,
                                                   float direction, const MaskObjective& objective) {
    if (cfg.epsilon < 0.0f) throw ArgumentError(name + ": epsilon must be non-negative");
    if (cfg.batch_size <= 0) throw ArgumentError(name + ": batch size must be positive");
    if (data.size() == 0) throw ArgumentError(name + ": empty data set");
    const Shape img_shape{data.images.dim(1), data.images.dim(2), data.images.dim(3)};
    MaskPerturbation mask;
    mask.delta = Tensor(img_shape);
    mask.epsilon = cfg.epsilon;
    mask.provenance = make_provenance(name, cfg);
    if (cfg.epsilon == 0.0f || cfg.iterations == 0) return mask;  // the empty ball

    const float alpha = cfg.step_size > 0.0f ? cfg.step_size : cfg.epsilon / 10.0f;
    const int64_t pixels = shape_numel(img_shape);
    BatchCursor cursor(data.size(), cfg.batch_size, cfg.seed);

    for (int it = 0; it < cfg.iterations; ++it) {
        const ImageBatch mb = data.select(cursor.next());
        Tensor perturbed = mb.images;
        for (int64_t i = 0; i < mb.size(); ++i) {
            float* dst = perturbed.data() + i * pixels;
            for (int64_t k = 0; k < pixels; ++k)
                dst[k] = std::clamp(dst[k] + mask.delta[k], 0.0f, 1.0f);
        }
        Graph g;
        const int input = g.leaf(std::move(perturbed));
        int loss;
        try {
            const auto fwd = model.forward(g, input, /*track_param_grads=*/false);
            loss = objective(g, fwd, mb);
        } catch (const NumericError& err) {
            throw NumericError(name + ": aborted at iteration " + std::to_string(it) + ": " + err.what());
        }
        g.backward(loss);
        const Tensor& din = g.grad(input);
        for (int64_t k = 0; k < pixels; ++k) {
            float total = 0.0f;
            for (int64_t i = 0; i < mb.size(); ++i) total += din[i * pixels + k];
            mask.delta[k] = std::clamp(mask.delta[k] + direction * alpha * sign_step(total),
                                       -cfg.epsilon, cfg.epsilon);
        }
    }
    return mask;
}

}  // namespace detail

// Batch-gradient universal perturbation over the training loss: untargeted
// runs ascend the cross-entropy of the true labels, targeted runs descend
// the cross-entropy toward the target class.
inline MaskPerturbation sgd_uap(const SmallCnn& model, const ImageBatch& data, const AttackConfig& cfg) {
    const bool targeted = cfg.target_class.has_value();
    if (targeted && (*cfg.target_class < 0 || *cfg.target_class >= model.num_classes()))
        throw ArgumentError("sgd_uap: target class " + std::to_string(*cfg.target_class) + " out of range");
    const float direction = targeted ? -1.0f : 1.0f;
    const std::string name = targeted ? "sgd-uap-targeted" : "sgd-uap";
    return detail::projected_sign_mask_attack(
        model, data, cfg, name, direction,
        [&cfg](Graph& g, const SmallCnn::ForwardNodes& fwd, const ImageBatch& mb) {
            std::vector<int> labels = mb.labels;
            if (cfg.target_class) labels.assign(labels.size(), *cfg.target_class);
            return g.softmax_xent(fwd.logits, labels);
        });
}

// Layer-maximization proxy objective: ascend the squared l2 norm of the tap.
inline MaskPerturbation sgd_layer(const SmallCnn& model, const ImageBatch& data, const AttackConfig& cfg) {
    if (cfg.target_layer.empty()) throw ArgumentError("sgd_layer: target_layer must be set");
    const auto& names = tap_names();
    if (std::find(names.begin(), names.end(), cfg.target_layer) == names.end())
        throw ArgumentError("sgd_layer: unknown tap " + cfg.target_layer);
    return detail::projected_sign_mask_attack(
        model, data, cfg, "sgd-layer", 1.0f,
        [&cfg](Graph& g, const SmallCnn::ForwardNodes& fwd, const ImageBatch&) {
            const int tap = fwd.taps.at(cfg.target_layer);
            return g.sum(g.mul(tap, tap));
        });
}

// Defense-aware variant: ascend the training loss minus a penalty on mean
// activations exceeding the defended layer's clean baseline.
inline MaskPerturbation baseline_feature_uap(const SmallCnn& model, const ImageBatch& data,
                                             const ActivationBaseline& baseline, const AttackConfig& cfg) {
    if (baseline.mu.empty()) throw ArgumentError("baseline_feature_uap: missing baseline");
    if (baseline.kind != Aggregation::mean)
        throw ArgumentError("baseline_feature_uap: the penalty is defined on mean aggregation");
    if (!cfg.target_layer.empty() && cfg.target_layer != baseline.layer)
        throw ArgumentError("baseline_feature_uap: config layer " + cfg.target_layer +
                            " does not match baseline layer " + baseline.layer);
    Tensor mu({baseline.channels()});
    std::copy(baseline.mu.begin(), baseline.mu.end(), mu.data());
    return detail::projected_sign_mask_attack(
        model, data, cfg, "baseline-feature", 1.0f,
        [&](Graph& g, const SmallCnn::ForwardNodes& fwd, const ImageBatch& mb) {
            const int ce = g.softmax_xent(fwd.logits, mb.labels);
            const int mk = g.spatial_mean(fwd.taps.at(baseline.layer));
            const int pen = g.sum(g.relu(g.sub_rowvec(mk, g.leaf(mu, /*needs_grad=*/false))));
            const float weight = cfg.lambda / static_cast<float>(mb.size());
            return g.sub(ce, g.scalar_mul(pen, weight));
        });
}

struct PerlinParams {
    float wavelength_x = 8.0f;
    float wavelength_y = 8.0f;
    float phi_sine = 4.0f;
};

// wavelengths 4/8/16 px crossed with sine frequencies 2/4/8
inline const std::vector<PerlinParams>& default_perlin_grid() {
    static const std::vector<PerlinParams> grid = [] {
        std::vector<PerlinParams> g;
        for (float wx : {4.0f, 8.0f, 16.0f})
            for (float wy : {4.0f, 8.0f, 16.0f})
                for (float phi : {2.0f, 4.0f, 8.0f}) g.push_back({wx, wy, phi});
        return g;
    }();
    return grid;
}

inline Tensor perlin_mask_tensor(const PerlinParams& p, const Shape& chw, float eps,
                                 const LatticeGradient& grad) {
    Tensor noise = perlin_sine_mask(chw[1], chw[2], p.wavelength_x, p.wavelength_y, p.phi_sine, eps, grad);
    Tensor out(chw);
    for (int64_t c = 0; c < chw[0]; ++c)
        std::copy_n(noise.data(), chw[1] * chw[2], out.data() + c * chw[1] * chw[2]);
    return out;
}

// Black-box procedural-noise attack: exhaustive search over the parameter
// grid, keeping the noise image with the highest evasion rate on the
// evaluation batches. No gradients are used.
inline MaskPerturbation perlin_uap(const SmallCnn& model, const ImageBatch& eval_data,
                                   const AttackConfig& cfg,
                                   const std::vector<PerlinParams>& grid = default_perlin_grid()) {
    if (grid.empty()) throw ArgumentError("perlin_uap: empty parameter grid");
    if (cfg.epsilon < 0.0f) throw ArgumentError("perlin_uap: epsilon must be non-negative");
    if (eval_data.size() == 0) throw ArgumentError("perlin_uap: empty evaluation set");
    const Shape chw{eval_data.images.dim(1), eval_data.images.dim(2), eval_data.images.dim(3)};
    const LatticeGradient grad = hashed_gradients(cfg.seed);

    MaskPerturbation best;
    double best_uer = -1.0;
    PerlinParams best_params;
    for (const PerlinParams& p : grid) {
        MaskPerturbation candidate;
        candidate.delta = perlin_mask_tensor(p, chw, cfg.epsilon, grad);
        candidate.epsilon = cfg.epsilon;
        const double u = uer(model, candidate, eval_data);
        if (u > best_uer) {
            best_uer = u;
            best = std::move(candidate);
            best_params = p;
        }
    }
    json prov = json::parse(make_provenance("perlin", cfg));
    prov["perlin"] = {{"wavelength_x", best_params.wavelength_x},
                      {"wavelength_y", best_params.wavelength_y},
                      {"phi_sine", best_params.phi_sine},
                      {"grid_size", grid.size()},
                      {"search_uer", best_uer}};
    best.provenance = prov.dump();
    return best;
}

inline const PatchTransformRanges& default_patch_ranges() {
    static const PatchTransformRanges r{};
    return r;
}

// Targeted adversarial patch: descend the cross-entropy toward the target
// class under a fresh transformation per image per step (the expectation
// over transformations is estimated by sampling). Gradients reach only the
// patch pixels; placement is applied by mask composition.
inline PatchPerturbation eot_patch(const SmallCnn& model, const ImageBatch& data, const AttackConfig& cfg,
                                   const PatchTransformRanges& ranges = default_patch_ranges()) {
    if (!cfg.target_class) throw ArgumentError("eot_patch: a target class is required");
    if (*cfg.target_class < 0 || *cfg.target_class >= model.num_classes())
        throw ArgumentError("eot_patch: target class " + std::to_string(*cfg.target_class) + " out of range");
    if (!(cfg.area_fraction > 0.0f && cfg.area_fraction <= 0.25f))
        throw ArgumentError("eot_patch: area fraction must be in (0, 0.25], got " +
                            std::to_string(cfg.area_fraction));
    if (cfg.batch_size <= 0) throw ArgumentError("eot_patch: batch size must be positive");
    if (data.size() == 0) throw ArgumentError("eot_patch: empty data set");

    const int64_t C = data.images.dim(1), H = data.images.dim(2), W = data.images.dim(3);
    const int64_t side = patch_side_for(cfg.area_fraction, H, W);
    PatchPerturbation patch;
    patch.area_fraction = cfg.area_fraction;
    patch.ranges = ranges;
    patch.provenance = make_provenance("eot-patch", cfg, &ranges);
    patch.patch = Tensor({C, side, side});
    Rng rng(cfg.seed);
    for (int64_t i = 0; i < patch.patch.numel(); ++i) patch.patch[i] = rng.uniform();

    const float alpha = cfg.step_size > 0.0f ? cfg.step_size : 0.05f;
    detail::BatchCursor cursor(data.size(), cfg.batch_size, cfg.seed ^ 0xeea7);
    const std::vector<int> target(static_cast<size_t>(std::min<int64_t>(cfg.batch_size, data.size())),
                                  *cfg.target_class);

    for (int it = 0; it < cfg.iterations; ++it) {
        const ImageBatch mb = data.select(cursor.next());
        const auto transforms = sample_patch_transforms(patch, mb.size(), H, W, rng);
        Graph g;
        const int images = g.leaf(mb.images, /*needs_grad=*/false);
        const int patch_node = g.leaf(patch.patch);
        int loss;
        try {
            const int placed = g.place_patch(images, patch_node, transforms);
            const auto fwd = model.forward(g, placed, /*track_param_grads=*/false);
            loss = g.softmax_xent(fwd.logits, std::vector<int>(target.begin(), target.begin() + mb.size()));
        } catch (const NumericError& err) {
            throw NumericError("eot_patch: aborted at iteration " + std::to_string(it) + ": " + err.what());
        }
        g.backward(loss);
        const Tensor& dp = g.grad(patch_node);
        for (int64_t k = 0; k < patch.patch.numel(); ++k)
            patch.patch[k] =
                std::clamp(patch.patch[k] - alpha * detail::sign_step(dp[k]), 0.0f, 1.0f);
    }
    return patch;
}

}  // namespace uapdet
