#include "uapdet/metrics.hpp"

#include <gtest/gtest.h>

#include <fstream>

#include "support/fixtures.hpp"

using namespace uapdet;

namespace {

// Brute-force pairwise oracle: P(perturbed > clean) + 1/2 P(equal).
double pairwise_auc(const std::vector<float>& pos, const std::vector<float>& neg) {
    int64_t wins2 = 0;  // doubled to stay in integers
    for (float p : pos)
        for (float n : neg) {
            if (p > n) wins2 += 2;
            else if (p == n) wins2 += 1;
        }
    return static_cast<double>(wins2) / (2.0 * static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

}  // namespace

TEST(Roc, PerfectSeparation) {
    RocCurve r = roc_auc({5.0f, 6.0f, 7.0f}, {1.0f, 2.0f, 3.0f});
    EXPECT_DOUBLE_EQ(r.auc, 1.0);
}

TEST(Roc, IdenticalMultisetsGiveHalf) {
    RocCurve r = roc_auc({1.0f, 2.0f, 3.0f}, {1.0f, 2.0f, 3.0f});
    EXPECT_DOUBLE_EQ(r.auc, 0.5);
}

TEST(Roc, HandComputedOverlap) {
    // clean {1,2,3}, perturbed {2,3,4} -> 7/9 by pairwise comparison
    RocCurve r = roc_auc({2.0f, 3.0f, 4.0f}, {1.0f, 2.0f, 3.0f});
    EXPECT_NEAR(r.auc, 7.0 / 9.0, 1e-15);
}

TEST(Roc, EndpointsAndMonotonicity) {
    Rng rng(99);
    std::vector<float> pos, neg;
    for (int i = 0; i < 57; ++i) pos.push_back(rng.normal() + 0.8f);
    for (int i = 0; i < 43; ++i) neg.push_back(rng.normal());
    RocCurve r = roc_auc(pos, neg);
    ASSERT_GE(r.points.size(), 2u);
    EXPECT_DOUBLE_EQ(r.points.front().fpr, 0.0);
    EXPECT_DOUBLE_EQ(r.points.front().tpr, 0.0);
    EXPECT_DOUBLE_EQ(r.points.back().fpr, 1.0);
    EXPECT_DOUBLE_EQ(r.points.back().tpr, 1.0);
    for (size_t i = 1; i < r.points.size(); ++i) {
        EXPECT_GE(r.points[i].fpr, r.points[i - 1].fpr);
        EXPECT_GE(r.points[i].tpr, r.points[i - 1].tpr);
    }
    EXPECT_GE(r.auc, 0.0);
    EXPECT_LE(r.auc, 1.0);
}

TEST(Roc, MatchesPairwiseOracleOnRandomSets) {
    // exact agreement with the brute-force pairwise computation, sets <= 200
    Rng rng(20250101);
    for (int rep = 0; rep < 300; ++rep) {
        const int np = 1 + static_cast<int>(rng.below(200));
        const int nn = 1 + static_cast<int>(rng.below(200));
        std::vector<float> pos, neg;
        const bool quantize = rng.uniform() < 0.5f;  // force ties half the time
        for (int i = 0; i < np; ++i) {
            float v = rng.uniform(-2.0f, 2.0f) + 0.3f;
            if (quantize) v = std::round(v * 4.0f) / 4.0f;
            pos.push_back(v);
        }
        for (int i = 0; i < nn; ++i) {
            float v = rng.uniform(-2.0f, 2.0f);
            if (quantize) v = std::round(v * 4.0f) / 4.0f;
            neg.push_back(v);
        }
        const double expect = pairwise_auc(pos, neg);
        const double got = roc_auc(pos, neg).auc;
        ASSERT_NEAR(got, expect, 1e-12);
    }
}

TEST(Roc, EmptySetRejected) {
    EXPECT_THROW(roc_auc({}, {1.0f}), ArgumentError);
    EXPECT_THROW(roc_auc({1.0f}, {}), ArgumentError);
}

TEST(Roc, CsvHasHeaderAndRows) {
    fixtures::TempDir dir("roccsv");
    RocCurve r = roc_auc({2.0f, 3.0f}, {1.0f});
    write_roc_csv(dir.file("roc.csv"), r);
    std::ifstream f(dir.file("roc.csv"));
    std::string line;
    std::getline(f, line);
    EXPECT_EQ(line, "fpr,tpr");
    int rows = 0;
    while (std::getline(f, line)) ++rows;
    EXPECT_EQ(rows, static_cast<int>(r.points.size()));
}

TEST(Rates, UerHandCase) {
    // 4 samples: 2 fooled, 1 already wrong, 1 correct -> 0.75
    const std::vector<int> truth{0, 1, 2, 3};
    const std::vector<int> pred{1, 0, 9, 3};
    EXPECT_DOUBLE_EQ(uer_from_labels(pred, truth), 0.75);
    EXPECT_DOUBLE_EQ(uer_from_labels(truth, truth), 0.0);
    const std::vector<int> all_wrong{1, 2, 3, 0};
    EXPECT_DOUBLE_EQ(uer_from_labels(all_wrong, truth), 1.0);
}

TEST(Rates, TsrHandCases) {
    const std::vector<int> pred{7, 7, 1, 7};
    EXPECT_DOUBLE_EQ(tsr_from_labels(pred, 7), 0.75);
    EXPECT_DOUBLE_EQ(tsr_from_labels(pred, 2), 0.0);
    EXPECT_DOUBLE_EQ(tsr_from_labels({3, 3, 3}, 3), 1.0);
}

TEST(Rates, ZeroMaskGivesCleanErrorRate) {
    fixtures::TempDir dir("uer0");
    fixtures::synth_idx_dataset(dir.file("img"), dir.file("lbl"), 120, 3, 16, 77);
    ImageBatch data = load_idx(dir.file("img"), dir.file("lbl"));
    data.num_classes = 3;
    SplitSpec spec;
    spec.seed = 5;
    spec.n_validation = 30;
    DatasetSplits s = make_splits(data, spec);
    Hyperparams hp;
    hp.epochs = 3;
    hp.batch_size = 16;
    hp.seed = 3;
    SmallCnn model = model_from_checkpoint(train(s.train, s.validation, hp, nullptr));

    MaskPerturbation zero;
    zero.delta = Tensor({1, 16, 16});
    zero.epsilon = 0.0f;
    const double clean_err = 1.0 - accuracy(predict(model, s.validation).labels, s.validation.labels);
    EXPECT_DOUBLE_EQ(uer(model, zero, s.validation), clean_err);

    // and TSR with delta = 0 equals the clean frequency of the target class
    const auto labels = predict(model, s.validation).labels;
    const double freq = tsr_from_labels(labels, 1);
    EXPECT_DOUBLE_EQ(tsr(model, Perturbation{zero}, s.validation, 1), freq);
}

TEST(Rates, AsrCpDefinitions) {
    const std::vector<int> p_truth{0, 1, 2, 3};
    const std::vector<int> p_pred{1, 0, 2, 3};   // first two misclassified
    const std::vector<int> c_truth{0, 1, 2, 3};
    const std::vector<int> c_pred{0, 1, 2, 9};   // last one wrong

    // all perturbed inputs flagged -> ASR = 0
    AsrCp all_flagged = asr_cp({1, 1, 1, 1}, p_pred, p_truth, {0, 0, 0, 0}, c_pred, c_truth);
    EXPECT_DOUBLE_EQ(all_flagged.asr, 0.0);

    // no detector -> ASR = UER and CP = accuracy
    AsrCp none = asr_cp({0, 0, 0, 0}, p_pred, p_truth, {0, 0, 0, 0}, c_pred, c_truth);
    EXPECT_DOUBLE_EQ(none.asr, uer_from_labels(p_pred, p_truth));
    EXPECT_DOUBLE_EQ(none.cp, 0.75);

    // mixed flags, counted by hand: perturbed unflagged+wrong = {0}, clean unflagged+correct = {1,2}
    AsrCp mixed = asr_cp({0, 1, 0, 1}, p_pred, p_truth, {1, 0, 0, 1}, c_pred, c_truth);
    EXPECT_DOUBLE_EQ(mixed.asr, 0.25);
    EXPECT_DOUBLE_EQ(mixed.cp, 0.5);
    EXPECT_EQ(mixed.asr_numerator, 1);
    EXPECT_EQ(mixed.cp_numerator, 2);

    EXPECT_THROW(asr_cp({}, {}, {}, {0}, {1}, {1}), ArgumentError);
    EXPECT_THROW(asr_cp({0, 0}, {1}, {1}, {0}, {1}, {1}), ArgumentError);
}

TEST(Report, JsonFieldPresence) {
    EvalReport r;
    r.attack = "sgd";
    r.kind = "mask";
    r.epsilon_or_area = 0.1f;
    r.uer = 0.8;
    r.n_perturbed = 100;
    r.n_clean = 100;
    nlohmann::json j = r.to_json();
    EXPECT_TRUE(j.contains("uer"));
    EXPECT_FALSE(j.contains("asr"));  // no detector configured
    EXPECT_FALSE(j.contains("tsr"));
    r.asr = 0.1;
    r.cp = 0.9;
    r.tsr = 0.5;
    j = r.to_json();
    EXPECT_TRUE(j.contains("asr"));
    EXPECT_TRUE(j.contains("cp"));
    EXPECT_DOUBLE_EQ(j["tsr"].get<double>(), 0.5);
}
