#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "uapdet/detector.hpp"
#include "uapdet/metrics.hpp"
#include "uapdet/model.hpp"

namespace uapdet {

struct BenchConfig {
    int batch_size = 64;
    int repetitions = 30;
    int warmup = 5;
};

namespace detail {

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

template <typename Fn>
inline std::pair<double, double> time_ms(Fn&& fn, const BenchConfig& cfg) {
    using Clock = std::chrono::steady_clock;
    for (int i = 0; i < cfg.warmup; ++i) fn();
    std::vector<double> samples;
    samples.reserve(static_cast<size_t>(cfg.repetitions));
    for (int i = 0; i < cfg.repetitions; ++i) {
        const auto t0 = Clock::now();
        fn();
        const auto t1 = Clock::now();
        samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return {median_of(samples), mean_of(samples)};
}

}  // namespace detail

// Wall-clock latency of plain inference versus inference plus detection, on
// one batch, single-threaded. Detection reuses the forward pass: the taps
// are read out of the same graph that produced the predictions, so the added
// cost is aggregation, z-scoring and the top-percentile selection.
inline LatencyReport bench_latency(const SmallCnn& model, const ImageBatch& source,
                                   const std::vector<std::pair<ActivationBaseline, DetectorConfig>>& detectors,
                                   const BenchConfig& cfg = {}) {
    if (cfg.repetitions < 1) throw ArgumentError("bench: repetitions must be >= 1");
    if (cfg.batch_size < 1) throw ArgumentError("bench: batch size must be >= 1");
    if (source.size() < cfg.batch_size)
        throw ArgumentError("bench: need at least " + std::to_string(cfg.batch_size) + " images");
    for (const auto& [baseline, dcfg] : detectors)
        if (baseline.layer != dcfg.layer || baseline.kind != dcfg.kind)
            throw ArgumentError("bench: baseline/config mismatch for " + dcfg.label());

    const Tensor images = source.slice(0, cfg.batch_size).images;
    LatencyReport report;
    report.batch_size = cfg.batch_size;
    report.repetitions = cfg.repetitions;
    report.warmup = cfg.warmup;

    volatile float sink = 0.0f;  // keep the timed work observable
    auto [plain_med, plain_mean] = detail::time_ms(
        [&] {
            PredictResult r = predict_batch(model, images);
            sink = sink + r.probabilities[0];
        },
        cfg);
    report.plain_batch_ms_median = plain_med;
    report.plain_batch_ms_mean = plain_mean;

    auto defended_pass = [&](const std::vector<std::pair<ActivationBaseline, DetectorConfig>>& members) {
        std::vector<std::string> taps;
        for (const auto& [b, d] : members) taps.push_back(d.layer);
        PredictResult r = predict_batch(model, images, taps);
        std::vector<DetectionResult> results;
        for (const auto& [b, d] : members)
            results.push_back(score_aggregates(aggregate_batch(r.taps.at(d.layer), d.kind), b, d));
        if (members.size() > 1) {
            CombinedDetection c = combined_flag(results);
            sink = sink + static_cast<float>(c.flags[0]);
        } else if (!results.empty()) {
            sink = sink + static_cast<float>(results[0].flags[0]);
        }
        sink = sink + r.probabilities[0];
    };

    for (const auto& member : detectors) {
        auto [med, mean] = detail::time_ms([&] { defended_pass({member}); }, cfg);
        report.defended_batch_ms_median[member.second.label()] = med;
        report.defended_batch_ms_mean[member.second.label()] = mean;
    }
    if (!detectors.empty()) {
        auto [med, mean] = detail::time_ms([&] { defended_pass(detectors); }, cfg);
        report.combined_batch_ms_median = med;
        report.combined_batch_ms_mean = mean;
    } else {
        // no detector: the defended pipeline is plain inference
        report.combined_batch_ms_median = plain_med;
        report.combined_batch_ms_mean = plain_mean;
    }
    return report;
}

}  // namespace uapdet
