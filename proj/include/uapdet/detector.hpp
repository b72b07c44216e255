#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "uapdet/data.hpp"
#include "uapdet/metrics.hpp"
#include "uapdet/model.hpp"
#include "uapdet/tensor.hpp"

namespace uapdet {

enum class Aggregation { mean, std_dev };

inline const char* aggregation_name(Aggregation a) { return a == Aggregation::mean ? "mean" : "std"; }

inline Aggregation parse_aggregation(const std::string& s) {
    if (s == "mean" || s == "M") return Aggregation::mean;
    if (s == "std" || s == "S" || s == "std_dev") return Aggregation::std_dev;
    throw ArgumentError("unknown aggregation kind: " + s);
}

// Short label like "3.0M" / "2.1S" used in reports.
inline std::string config_label(const std::string& layer, Aggregation kind) {
    return layer + (kind == Aggregation::mean ? "M" : "S");
}

constexpr float kSigmaFloor = 1e-6f;  // dead channels get a floored deviation

// Per-channel spatial statistics of a tap tensor: [N,C,H,W] -> [N,C] where
// component j is the mean (or population standard deviation) of feature map j.
// Dense taps [N,D] are treated as D feature maps of a single pixel.
inline Tensor aggregate_batch(const Tensor& tap, Aggregation kind) {
    if (tap.rank() != 4 && tap.rank() != 2)
        throw ShapeError("aggregate: expected rank-2 or rank-4 tap, got " + shape_str(tap.shape()));
    if (tap.rank() == 2) {
        if (kind == Aggregation::mean) return tap;
        return Tensor({tap.dim(0), tap.dim(1)});  // single-pixel maps have zero deviation
    }
    const int64_t N = tap.dim(0), C = tap.dim(1), HW = tap.dim(2) * tap.dim(3);
    Tensor out({N, C});
    for (int64_t i = 0; i < N; ++i) {
        for (int64_t c = 0; c < C; ++c) {
            const float* p = tap.data() + (i * C + c) * HW;
            float s = 0.0f;
            for (int64_t k = 0; k < HW; ++k) s += p[k];
            const float m = s / static_cast<float>(HW);
            if (kind == Aggregation::mean) {
                out.at(i, c) = m;
            } else {
                float var = 0.0f;
                for (int64_t k = 0; k < HW; ++k) var += (p[k] - m) * (p[k] - m);
                out.at(i, c) = std::sqrt(var / static_cast<float>(HW));
            }
        }
    }
    return out;
}

// Baseline statistics of the aggregated features over a trusted clean set.
struct ActivationBaseline {
    std::string layer;
    Aggregation kind = Aggregation::mean;
    std::vector<float> mu;
    std::vector<float> sigma;  // elementwise population std, floored at kSigmaFloor
    int64_t sample_count = 0;
    uint64_t dataset_fingerprint = 0;

    int64_t channels() const { return static_cast<int64_t>(mu.size()); }
};

inline ActivationBaseline fit_baseline_from_aggregates(const Tensor& agg, std::string layer,
                                                       Aggregation kind, uint64_t fingerprint = 0) {
    const int64_t N = agg.dim(0), d = agg.dim(1);
    if (N < 2) throw ArgumentError("fit_baseline: need at least 2 clean samples, got " + std::to_string(N));
    ActivationBaseline b;
    b.layer = std::move(layer);
    b.kind = kind;
    b.sample_count = N;
    b.dataset_fingerprint = fingerprint;
    b.mu.resize(static_cast<size_t>(d));
    b.sigma.resize(static_cast<size_t>(d));
    for (int64_t j = 0; j < d; ++j) {
        float s = 0.0f;
        for (int64_t i = 0; i < N; ++i) s += agg.at(i, j);
        const float m = s / static_cast<float>(N);
        float var = 0.0f;
        for (int64_t i = 0; i < N; ++i) var += (agg.at(i, j) - m) * (agg.at(i, j) - m);
        float sd = std::sqrt(var / static_cast<float>(N));
        if (sd < kSigmaFloor) sd = kSigmaFloor;
        b.mu[static_cast<size_t>(j)] = m;
        b.sigma[static_cast<size_t>(j)] = sd;
    }
    return b;
}

inline ActivationBaseline fit_baseline(const SmallCnn& model, const ImageBatch& clean,
                                       const std::string& layer, Aggregation kind) {
    const Tensor tap = tap_activations(model, clean, layer);
    return fit_baseline_from_aggregates(aggregate_batch(tap, kind), layer, kind, clean.fingerprint());
}

struct DetectorConfig {
    std::string layer;
    Aggregation kind = Aggregation::mean;
    float top_fraction = 0.1f;  // t in (0,1]
    float threshold = 0.0f;     // theta
    float fp_rate = 0.05f;      // r used when the threshold was calibrated

    std::string label() const { return config_label(layer, kind); }
};

struct DetectionResult {
    std::vector<float> scores;   // z_top_avg per input
    std::vector<uint8_t> flags;  // 1 iff score > threshold
    DetectorConfig config;
};

inline int64_t top_count(float top_fraction, int64_t d) {
    if (!(top_fraction > 0.0f && top_fraction <= 1.0f))
        throw ArgumentError("top_fraction must be in (0,1], got " + std::to_string(top_fraction));
    // the product is formed in float so that t values like 0.2 land exactly
    // on integer counts before the ceiling is taken
    const int64_t m = static_cast<int64_t>(std::ceil(top_fraction * static_cast<float>(d)));
    return std::clamp<int64_t>(m, 1, d);
}

// Scores a batch of aggregated features: z = (A - mu) / sigma, take the
// ceil(t*d) largest signed components, average them, flag when above theta.
inline DetectionResult score_aggregates(const Tensor& agg, const ActivationBaseline& baseline,
                                        const DetectorConfig& config) {
    if (agg.rank() != 2 || agg.dim(1) != baseline.channels())
        throw ShapeError("score: aggregate " + shape_str(agg.shape()) + " does not match baseline with " +
                         std::to_string(baseline.channels()) + " channels");
    const int64_t N = agg.dim(0), d = agg.dim(1);
    const int64_t m = top_count(config.top_fraction, d);
    DetectionResult out;
    out.config = config;
    out.scores.resize(static_cast<size_t>(N));
    out.flags.resize(static_cast<size_t>(N));
    std::vector<float> z(static_cast<size_t>(d));
    for (int64_t i = 0; i < N; ++i) {
        for (int64_t j = 0; j < d; ++j)
            z[static_cast<size_t>(j)] =
                (agg.at(i, j) - baseline.mu[static_cast<size_t>(j)]) / baseline.sigma[static_cast<size_t>(j)];
        std::partial_sort(z.begin(), z.begin() + m, z.end(), std::greater<float>());
        float s = 0.0f;
        for (int64_t k = 0; k < m; ++k) s += z[static_cast<size_t>(k)];
        const float score = s / static_cast<float>(m);
        out.scores[static_cast<size_t>(i)] = score;
        out.flags[static_cast<size_t>(i)] = score > config.threshold ? 1 : 0;
    }
    return out;
}

inline DetectionResult score(const SmallCnn& model, const ImageBatch& batch,
                             const ActivationBaseline& baseline, const DetectorConfig& config) {
    if (config.layer != baseline.layer || config.kind != baseline.kind)
        throw ArgumentError("score: config " + config.label() + " does not match baseline " +
                            config_label(baseline.layer, baseline.kind));
    const Tensor tap = tap_activations(model, batch, config.layer);
    return score_aggregates(aggregate_batch(tap, config.kind), baseline, config);
}

// theta = the smallest clean score with at most an r fraction of clean scores
// strictly above it (the (1-r) empirical quantile, higher-value convention).
inline float calibrate_threshold(std::vector<float> clean_scores, float r) {
    if (!(r > 0.0f && r < 1.0f)) throw ArgumentError("fp rate must be in (0,1), got " + std::to_string(r));
    const int64_t n = static_cast<int64_t>(clean_scores.size());
    if (n < static_cast<int64_t>(std::ceil(1.0 / static_cast<double>(r))))
        throw ArgumentError("calibrate_threshold: need at least " +
                            std::to_string(static_cast<int64_t>(std::ceil(1.0 / static_cast<double>(r)))) +
                            " clean scores for r=" + std::to_string(r) + ", got " + std::to_string(n));
    std::sort(clean_scores.begin(), clean_scores.end());
    const double budget = static_cast<double>(r) * static_cast<double>(n);
    for (int64_t j = 0; j < n; ++j) {
        // count strictly above clean_scores[j]
        const auto above = clean_scores.end() - std::upper_bound(clean_scores.begin(), clean_scores.end(),
                                                                 clean_scores[static_cast<size_t>(j)]);
        if (static_cast<double>(above) <= budget) return clean_scores[static_cast<size_t>(j)];
    }
    return clean_scores.back();
}

struct CombinedDetection {
    std::vector<uint8_t> flags;    // OR over members
    std::vector<uint32_t> fired;   // bitmask of which member configurations flagged
    std::vector<std::string> member_labels;
};

// Flag when any member flags; `fired` records which member(s) did, which
// tells a mask-tuned configuration apart from a patch-tuned one.
inline CombinedDetection combined_flag(const std::vector<DetectionResult>& members) {
    if (members.empty()) throw ArgumentError("combined_flag: no member results");
    const size_t n = members[0].flags.size();
    for (const auto& m : members)
        if (m.flags.size() != n)
            throw ArgumentError("combined_flag: member result sizes disagree (" + std::to_string(n) +
                                " vs " + std::to_string(m.flags.size()) + ")");
    CombinedDetection out;
    out.flags.assign(n, 0);
    out.fired.assign(n, 0);
    for (size_t mi = 0; mi < members.size(); ++mi) {
        out.member_labels.push_back(members[mi].config.label());
        for (size_t i = 0; i < n; ++i) {
            if (members[mi].flags[i]) {
                out.flags[i] = 1;
                out.fired[i] |= (1u << mi);
            }
        }
    }
    return out;
}

// Aggregated features for several layers and both statistics in one pass
// over the data (the taps come from the same forward pass as predictions).
inline std::map<std::string, std::map<Aggregation, Tensor>> aggregate_all(
    const SmallCnn& model, const ImageBatch& batch, const std::vector<std::string>& layers,
    const std::vector<Aggregation>& kinds) {
    PredictResult pr = predict(model, batch, layers);
    std::map<std::string, std::map<Aggregation, Tensor>> out;
    for (const auto& k : layers)
        for (Aggregation a : kinds) out[k][a] = aggregate_batch(pr.taps.at(k), a);
    return out;
}

struct CalibrationCell {
    std::string layer;
    Aggregation kind = Aggregation::mean;
    float top_fraction = 0.1f;
    double mean_auc = 0.0;
    std::vector<double> per_attack_auc;
};

struct CalibrationResult {
    DetectorConfig chosen;                 // threshold still unset (calibrate separately)
    std::vector<CalibrationCell> layer_grid;  // all (layer, aggregation) at the default t
    std::vector<CalibrationCell> t_grid;      // the t sweep at the chosen (layer, aggregation)

    nlohmann::json to_json() const {
        auto cell = [](const CalibrationCell& c) {
            return nlohmann::json{{"layer", c.layer},
                                  {"aggregation", aggregation_name(c.kind)},
                                  {"top_fraction", c.top_fraction},
                                  {"mean_auc", c.mean_auc},
                                  {"per_attack_auc", c.per_attack_auc}};
        };
        nlohmann::json grid = nlohmann::json::array(), tg = nlohmann::json::array();
        for (const auto& c : layer_grid) grid.push_back(cell(c));
        for (const auto& c : t_grid) tg.push_back(cell(c));
        return {{"chosen",
                 {{"layer", chosen.layer},
                  {"aggregation", aggregation_name(chosen.kind)},
                  {"top_fraction", chosen.top_fraction}}},
                {"layer_grid", grid},
                {"t_grid", tg}};
    }
};

inline const std::vector<float>& default_t_grid() {
    static const std::vector<float> grid = {0.01f, 0.05f, 0.1f, 0.25f, 0.5f, 1.0f};
    return grid;
}

// Chooses (layer, aggregation) maximizing mean AUC over the given attack
// sets, then the top-percentile t maximizing the same objective. Ties break
// toward the earlier candidate layer and mean before std.
inline CalibrationResult calibrate_detector(const SmallCnn& model, const ImageBatch& clean_baseline,
                                            const ImageBatch& clean_eval,
                                            const std::vector<ImageBatch>& perturbed_eval_sets,
                                            const std::vector<std::string>& candidate_layers,
                                            const std::vector<float>& t_grid = default_t_grid(),
                                            float default_t = 0.1f) {
    if (candidate_layers.empty()) throw ArgumentError("calibrate_detector: no candidate layers");
    if (perturbed_eval_sets.empty()) throw ArgumentError("calibrate_detector: no attack sets");
    const std::vector<Aggregation> kinds = {Aggregation::mean, Aggregation::std_dev};

    const auto base_aggs = aggregate_all(model, clean_baseline, candidate_layers, kinds);
    const auto clean_aggs = aggregate_all(model, clean_eval, candidate_layers, kinds);
    std::vector<std::map<std::string, std::map<Aggregation, Tensor>>> attack_aggs;
    for (const auto& adv : perturbed_eval_sets)
        attack_aggs.push_back(aggregate_all(model, adv, candidate_layers, kinds));

    std::map<std::pair<std::string, int>, ActivationBaseline> baselines;
    for (const auto& k : candidate_layers)
        for (Aggregation a : kinds)
            baselines[{k, static_cast<int>(a)}] = fit_baseline_from_aggregates(
                base_aggs.at(k).at(a), k, a, clean_baseline.fingerprint());

    auto mean_auc_at = [&](const std::string& k, Aggregation a, float t, std::vector<double>* per) {
        DetectorConfig cfg{k, a, t, 0.0f, 0.05f};
        const auto& baseline = baselines.at({k, static_cast<int>(a)});
        const auto clean_scores = score_aggregates(clean_aggs.at(k).at(a), baseline, cfg).scores;
        double total = 0.0;
        for (const auto& aggs : attack_aggs) {
            const auto adv_scores = score_aggregates(aggs.at(k).at(a), baseline, cfg).scores;
            const double auc = roc_auc(adv_scores, clean_scores).auc;
            total += auc;
            if (per) per->push_back(auc);
        }
        return total / static_cast<double>(attack_aggs.size());
    };

    CalibrationResult result;
    double best = -1.0;
    for (const auto& k : candidate_layers) {
        for (Aggregation a : kinds) {
            CalibrationCell cell;
            cell.layer = k;
            cell.kind = a;
            cell.top_fraction = default_t;
            cell.mean_auc = mean_auc_at(k, a, default_t, &cell.per_attack_auc);
            result.layer_grid.push_back(cell);
            if (cell.mean_auc > best) {  // strict: first maximum wins the tie
                best = cell.mean_auc;
                result.chosen.layer = k;
                result.chosen.kind = a;
            }
        }
    }
    double best_t_auc = -1.0;
    for (float t : t_grid) {
        CalibrationCell cell;
        cell.layer = result.chosen.layer;
        cell.kind = result.chosen.kind;
        cell.top_fraction = t;
        cell.mean_auc = mean_auc_at(result.chosen.layer, result.chosen.kind, t, &cell.per_attack_auc);
        result.t_grid.push_back(cell);
        if (cell.mean_auc > best_t_auc) {
            best_t_auc = cell.mean_auc;
            result.chosen.top_fraction = t;
        }
    }
    return result;
}

// Baseline file: "UAPB", version u16, layer, aggregation u8, d_k u32,
// mu then sigma as little-endian f32, then sample count and fingerprint.
inline void save_baseline(const std::string& path, const ActivationBaseline& b) {
    ByteWriter w;
    w.raw("UAPB", 4);
    w.u16(1);
    w.str(b.layer);
    w.u8(b.kind == Aggregation::mean ? 0 : 1);
    w.u32(static_cast<uint32_t>(b.mu.size()));
    w.f32_array(b.mu.data(), b.mu.size());
    w.f32_array(b.sigma.data(), b.sigma.size());
    w.u64(static_cast<uint64_t>(b.sample_count));
    w.u64(b.dataset_fingerprint);
    write_file_bytes(path, w.bytes());
}

inline ActivationBaseline load_baseline(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    ByteReader r(bytes, path);
    r.expect_magic("UAPB");
    const uint16_t version = r.u16();
    if (version != 1) r.fail("unsupported baseline version " + std::to_string(version));
    ActivationBaseline b;
    b.layer = r.str();
    b.kind = r.u8() == 0 ? Aggregation::mean : Aggregation::std_dev;
    const uint32_t d = r.u32();
    b.mu.resize(d);
    b.sigma.resize(d);
    for (uint32_t i = 0; i < d; ++i) b.mu[i] = r.f32();
    for (uint32_t i = 0; i < d; ++i) b.sigma[i] = r.f32();
    b.sample_count = static_cast<int64_t>(r.u64());
    b.dataset_fingerprint = r.u64();
    return b;
}

inline void save_detector_config(const std::string& path, const DetectorConfig& c) {
    nlohmann::json j{{"layer", c.layer},
                     {"aggregation", aggregation_name(c.kind)},
                     {"top_fraction", c.top_fraction},
                     {"threshold", c.threshold},
                     {"fp_rate", c.fp_rate}};
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot create file: " + path);
    f << j.dump(2) << "\n";
}

inline DetectorConfig load_detector_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
    DetectorConfig c;
    c.layer = j.at("layer").get<std::string>();
    c.kind = parse_aggregation(j.at("aggregation").get<std::string>());
    c.top_fraction = j.at("top_fraction").get<float>();
    c.threshold = j.at("threshold").get<float>();
    c.fp_rate = j.at("fp_rate").get<float>();
    return c;
}

}  // namespace uapdet
