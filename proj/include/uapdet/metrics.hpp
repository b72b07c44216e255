#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uapdet/model.hpp"
#include "uapdet/perturbation.hpp"

namespace uapdet {

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocCurve {
    std::vector<RocPoint> points;  // monotone from (0,0) to (1,1)
    double auc = 0.0;
};

// ROC over all thresholds of the rule "flag when score > theta". Perturbed
// inputs are the positives regardless of whether the attack fooled the model.
// Tied scores advance both counts at once, which makes the trapezoidal area
// equal to the pairwise-comparison probability with ties counted as 1/2.
inline RocCurve roc_auc(const std::vector<float>& perturbed_scores,
                        const std::vector<float>& clean_scores) {
    if (perturbed_scores.empty() || clean_scores.empty())
        throw ArgumentError("roc_auc: empty score set");
    std::vector<float> pos = perturbed_scores, neg = clean_scores;
    std::sort(pos.begin(), pos.end(), std::greater<float>());
    std::sort(neg.begin(), neg.end(), std::greater<float>());
    const int64_t P = static_cast<int64_t>(pos.size()), N = static_cast<int64_t>(neg.size());

    RocCurve out;
    out.points.push_back({0.0, 0.0});
    int64_t tp = 0, fp = 0;
    int64_t area2 = 0;  // 2 * sum of trapezoids, in raw counts (exact in integers)
    size_t i = 0, j = 0;
    while (i < pos.size() || j < neg.size()) {
        const float v = [&] {
            if (i == pos.size()) return neg[j];
            if (j == neg.size()) return pos[i];
            return std::max(pos[i], neg[j]);
        }();
        const int64_t tp0 = tp, fp0 = fp;
        while (i < pos.size() && pos[i] == v) {
            ++tp;
            ++i;
        }
        while (j < neg.size() && neg[j] == v) {
            ++fp;
            ++j;
        }
        area2 += (fp - fp0) * (tp + tp0);
        out.points.push_back({static_cast<double>(fp) / static_cast<double>(N),
                              static_cast<double>(tp) / static_cast<double>(P)});
    }
    out.auc = static_cast<double>(area2) / (2.0 * static_cast<double>(P) * static_cast<double>(N));
    return out;
}

inline void write_roc_csv(const std::string& path, const RocCurve& roc) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot create file: " + path);
    f << "fpr,tpr\n";
    for (const auto& p : roc.points) f << p.fpr << "," << p.tpr << "\n";
}

// Universal evasion rate: fraction of inputs whose perturbed prediction
// differs from the true label, so already-misclassified inputs count.
inline double uer_from_labels(const std::vector<int>& perturbed_pred, const std::vector<int>& truth) {
    if (perturbed_pred.size() != truth.size() || truth.empty())
        throw ArgumentError("uer: size mismatch or empty");
    int64_t evaded = 0;
    for (size_t i = 0; i < truth.size(); ++i) evaded += perturbed_pred[i] != truth[i];
    return static_cast<double>(evaded) / static_cast<double>(truth.size());
}

inline double tsr_from_labels(const std::vector<int>& perturbed_pred, int target_class) {
    if (perturbed_pred.empty()) throw ArgumentError("tsr: empty predictions");
    int64_t hit = 0;
    for (int p : perturbed_pred) hit += p == target_class;
    return static_cast<double>(hit) / static_cast<double>(perturbed_pred.size());
}

inline double uer(const SmallCnn& model, const Perturbation& p, const ImageBatch& batch,
                  uint64_t placement_seed = 1) {
    const ImageBatch adv = apply_perturbation(batch, p, placement_seed);
    return uer_from_labels(predict(model, adv).labels, batch.labels);
}

inline double tsr(const SmallCnn& model, const Perturbation& p, const ImageBatch& batch, int y_tgt,
                  uint64_t placement_seed = 1) {
    const ImageBatch adv = apply_perturbation(batch, p, placement_seed);
    return tsr_from_labels(predict(model, adv).labels, y_tgt);
}

struct AsrCp {
    double asr = 0.0;  // unflagged and misclassified, over all perturbed inputs
    double cp = 0.0;   // unflagged and correct, over all clean inputs
    int64_t asr_numerator = 0;
    int64_t cp_numerator = 0;
    int64_t n_perturbed = 0;
    int64_t n_clean = 0;
};

// Denominators are the full sets: with no detector (all flags 0) ASR reduces
// to UER and CP to plain accuracy.
inline AsrCp asr_cp(const std::vector<uint8_t>& perturbed_flags, const std::vector<int>& perturbed_pred,
                    const std::vector<int>& perturbed_truth, const std::vector<uint8_t>& clean_flags,
                    const std::vector<int>& clean_pred, const std::vector<int>& clean_truth) {
    if (perturbed_flags.size() != perturbed_pred.size() || perturbed_pred.size() != perturbed_truth.size())
        throw ArgumentError("asr_cp: perturbed vectors disagree in length");
    if (clean_flags.size() != clean_pred.size() || clean_pred.size() != clean_truth.size())
        throw ArgumentError("asr_cp: clean vectors disagree in length");
    if (perturbed_flags.empty() || clean_flags.empty()) throw ArgumentError("asr_cp: empty input");
    AsrCp out;
    out.n_perturbed = static_cast<int64_t>(perturbed_flags.size());
    out.n_clean = static_cast<int64_t>(clean_flags.size());
    for (size_t i = 0; i < perturbed_flags.size(); ++i)
        out.asr_numerator += !perturbed_flags[i] && perturbed_pred[i] != perturbed_truth[i];
    for (size_t i = 0; i < clean_flags.size(); ++i)
        out.cp_numerator += !clean_flags[i] && clean_pred[i] == clean_truth[i];
    out.asr = static_cast<double>(out.asr_numerator) / static_cast<double>(out.n_perturbed);
    out.cp = static_cast<double>(out.cp_numerator) / static_cast<double>(out.n_clean);
    return out;
}

struct LatencyReport {
    int batch_size = 0;
    int repetitions = 0;
    int warmup = 0;
    double plain_batch_ms_median = 0.0;
    double plain_batch_ms_mean = 0.0;
    std::map<std::string, double> defended_batch_ms_median;  // per detector configuration
    std::map<std::string, double> defended_batch_ms_mean;
    double combined_batch_ms_median = 0.0;
    double combined_batch_ms_mean = 0.0;

    double plain_image_ms() const { return plain_batch_ms_median / batch_size; }
    double combined_image_ms() const { return combined_batch_ms_median / batch_size; }
    double added_latency_image_ms() const { return combined_image_ms() - plain_image_ms(); }
};

struct EvalReport {
    std::string attack;  // provenance summary
    std::string kind;    // mask | patch
    float epsilon_or_area = 0.0f;
    double uer = 0.0;
    std::optional<double> tsr;
    std::map<std::string, double> auc;  // per detector config label
    std::optional<double> asr;
    std::optional<double> cp;
    int64_t flagged_perturbed = 0;
    int64_t flagged_clean = 0;
    int64_t n_perturbed = 0;
    int64_t n_clean = 0;
    std::optional<LatencyReport> latency;

    nlohmann::json to_json() const {
        nlohmann::json j{{"attack", attack},
                         {"kind", kind},
                         {"epsilon_or_area", epsilon_or_area},
                         {"uer", uer},
                         {"n_perturbed", n_perturbed},
                         {"n_clean", n_clean},
                         {"flagged_perturbed", flagged_perturbed},
                         {"flagged_clean", flagged_clean}};
        if (tsr) j["tsr"] = *tsr;
        if (!auc.empty()) j["auc"] = auc;
        if (asr) j["asr"] = *asr;
        if (cp) j["cp"] = *cp;
        if (latency) {
            j["latency"] = {{"batch_size", latency->batch_size},
                            {"repetitions", latency->repetitions},
                            {"warmup", latency->warmup},
                            {"plain_batch_ms_median", latency->plain_batch_ms_median},
                            {"plain_batch_ms_mean", latency->plain_batch_ms_mean},
                            {"combined_batch_ms_median", latency->combined_batch_ms_median},
                            {"combined_batch_ms_mean", latency->combined_batch_ms_mean},
                            {"defended_batch_ms_median", latency->defended_batch_ms_median},
                            {"defended_batch_ms_mean", latency->defended_batch_ms_mean},
                            {"plain_image_ms", latency->plain_image_ms()},
                            {"combined_image_ms", latency->combined_image_ms()},
                            {"added_latency_image_ms", latency->added_latency_image_ms()}};
        }
        return j;
    }
};

}  // namespace uapdet
