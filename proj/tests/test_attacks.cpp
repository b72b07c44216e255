#include "uapdet/attacks.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <numeric>

#include "support/fixtures.hpp"

using namespace uapdet;

namespace {

struct Fixture {
    ImageBatch train;
    ImageBatch val;
    SmallCnn model;
    double clean_error;
};

const Fixture& fx() {
    static const Fixture f = [] {
        fixtures::TempDir dir("atk");
        fixtures::synth_idx_dataset(dir.file("img"), dir.file("lbl"), 420, 3, 16, 505);
        ImageBatch data = load_idx(dir.file("img"), dir.file("lbl"));
        data.num_classes = 3;
        SplitSpec spec;
        spec.seed = 17;
        spec.n_validation = 90;
        DatasetSplits s = make_splits(data, spec);
        Hyperparams hp;
        hp.epochs = 8;
        hp.batch_size = 32;
        hp.lr = 0.02f;
        hp.seed = 11;
        Checkpoint ck = train(s.train, s.validation, hp, nullptr);
        SmallCnn model = model_from_checkpoint(ck);
        const double err = 1.0 - accuracy(predict(model, s.validation).labels, s.validation.labels);
        return Fixture{std::move(s.train), std::move(s.validation), std::move(model), err};
    }();
    return f;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<size_t>(a.numel())) == 0;
}

}  // namespace

TEST(SgdUap, EmptyBallGivesZeroDeltaAndCleanError) {
    AttackConfig cfg;
    cfg.epsilon = 0.0f;
    cfg.iterations = 10;
    cfg.seed = 3;
    MaskPerturbation m = sgd_uap(fx().model, fx().train, cfg);
    for (int64_t i = 0; i < m.delta.numel(); ++i) ASSERT_FLOAT_EQ(m.delta[i], 0.0f);
    EXPECT_DOUBLE_EQ(uer(fx().model, m, fx().val), fx().clean_error);
}

TEST(SgdUap, NegativeEpsilonRejected) {
    AttackConfig cfg;
    cfg.epsilon = -0.1f;
    EXPECT_THROW(sgd_uap(fx().model, fx().train, cfg), ArgumentError);
}

TEST(SgdUap, SingleStepIsSignOfBatchGradient) {
    AttackConfig cfg;
    cfg.epsilon = 0.1f;
    cfg.step_size = 0.1f;  // alpha = epsilon: one projected ascent step from zero
    cfg.iterations = 1;
    cfg.batch_size = 32;
    cfg.seed = 99;
    ImageBatch one_batch = fx().train.slice(0, 32);
    MaskPerturbation m = sgd_uap(fx().model, one_batch, cfg);

    // replicate the cursor's shuffled order, then the single gradient step
    std::vector<int64_t> idx(32);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(cfg.seed);
    rng.shuffle(idx);
    ImageBatch mb = one_batch.select(idx);
    Graph g;
    const int input = g.leaf(mb.images);
    const auto fwd = fx().model.forward(g, input, false);
    const int loss = g.softmax_xent(fwd.logits, mb.labels);
    g.backward(loss);
    const Tensor& din = g.grad(input);
    const int64_t pixels = m.delta.numel();
    for (int64_t k = 0; k < pixels; ++k) {
        float total = 0.0f;
        for (int64_t i = 0; i < mb.size(); ++i) total += din[i * pixels + k];
        const float expect = total > 0.0f ? 0.1f : (total < 0.0f ? -0.1f : 0.0f);
        ASSERT_FLOAT_EQ(m.delta[k], expect) << "pixel " << k;
    }
}

TEST(SgdUap, ProjectionExactAndApplicationClipped) {
    AttackConfig cfg;
    cfg.epsilon = 0.07f;
    cfg.step_size = 0.07f;  // deliberately overshooting steps
    cfg.iterations = 23;
    cfg.batch_size = 32;
    cfg.seed = 5;
    MaskPerturbation m = sgd_uap(fx().model, fx().train, cfg);
    for (int64_t i = 0; i < m.delta.numel(); ++i) ASSERT_LE(std::abs(m.delta[i]), cfg.epsilon);
    ImageBatch adv = apply_mask(fx().val, m);
    for (int64_t i = 0; i < adv.images.numel(); ++i) {
        ASSERT_GE(adv.images[i], 0.0f);
        ASSERT_LE(adv.images[i], 1.0f);
    }
}

TEST(SgdUap, DeterministicForSeedAndCheckpoint) {
    AttackConfig cfg;
    cfg.epsilon = 0.2f;
    cfg.iterations = 12;
    cfg.batch_size = 24;
    cfg.seed = 12345;
    MaskPerturbation a = sgd_uap(fx().model, fx().train, cfg);
    MaskPerturbation b = sgd_uap(fx().model, fx().train, cfg);
    EXPECT_TRUE(tensors_equal(a.delta, b.delta));

    fixtures::TempDir dir("det");
    save_perturbation(dir.file("a.uapp"), a);
    save_perturbation(dir.file("b.uapp"), b);
    EXPECT_EQ(read_file_bytes(dir.file("a.uapp")), read_file_bytes(dir.file("b.uapp")));
}

TEST(SgdUap, UntargetedRaisesEvasionAboveCleanError) {
    AttackConfig cfg;
    cfg.epsilon = 0.3f;
    cfg.iterations = 60;
    cfg.batch_size = 32;
    cfg.seed = 7;
    MaskPerturbation m = sgd_uap(fx().model, fx().train, cfg);
    const double u = uer(fx().model, m, fx().val);
    EXPECT_GT(u, fx().clean_error + 0.15) << "attack too weak: " << u;
}

TEST(SgdUap, TargetedRaisesTargetRate) {
    AttackConfig cfg;
    cfg.epsilon = 0.3f;
    cfg.iterations = 60;
    cfg.batch_size = 32;
    cfg.seed = 8;
    cfg.target_class = 2;
    MaskPerturbation m = sgd_uap(fx().model, fx().train, cfg);
    const double clean_freq = tsr_from_labels(predict(fx().model, fx().val).labels, 2);
    const double t = tsr(fx().model, m, fx().val, 2);
    EXPECT_GT(t, clean_freq + 0.2) << "targeted attack too weak: " << t;
    EXPECT_THROW(
        [&] {
            AttackConfig bad = cfg;
            bad.target_class = 99;
            sgd_uap(fx().model, fx().train, bad);
        }(),
        ArgumentError);
}

TEST(SgdLayer, EmptyBallAndUnknownTap) {
    AttackConfig cfg;
    cfg.epsilon = 0.0f;
    cfg.target_layer = "2.0";
    MaskPerturbation m = sgd_layer(fx().model, fx().train, cfg);
    for (int64_t i = 0; i < m.delta.numel(); ++i) ASSERT_FLOAT_EQ(m.delta[i], 0.0f);
    AttackConfig bad = cfg;
    bad.target_layer = "7.7";
    EXPECT_THROW(sgd_layer(fx().model, fx().train, bad), ArgumentError);
    bad.target_layer = "";
    EXPECT_THROW(sgd_layer(fx().model, fx().train, bad), ArgumentError);
}

TEST(SgdLayer, RaisesMeanActivationOnMostInputs) {
    AttackConfig cfg;
    cfg.epsilon = 0.25f;
    cfg.iterations = 60;
    cfg.batch_size = 32;
    cfg.seed = 9;
    cfg.target_layer = "2.0";
    MaskPerturbation m = sgd_layer(fx().model, fx().train, cfg);

    const Tensor clean_tap = tap_activations(fx().model, fx().val, "2.0");
    const Tensor adv_tap = tap_activations(fx().model, apply_mask(fx().val, m), "2.0");
    const Tensor clean_mean = aggregate_batch(clean_tap, Aggregation::mean);
    const Tensor adv_mean = aggregate_batch(adv_tap, Aggregation::mean);
    int64_t raised = 0;
    for (int64_t i = 0; i < clean_mean.dim(0); ++i) {
        float c = 0.0f, a = 0.0f;
        for (int64_t j = 0; j < clean_mean.dim(1); ++j) {
            c += clean_mean.at(i, j);
            a += adv_mean.at(i, j);
        }
        raised += a > c;
    }
    EXPECT_GE(static_cast<double>(raised) / static_cast<double>(clean_mean.dim(0)), 0.9);
}

TEST(BaselineFeature, LambdaZeroReducesExactlyToSgdUap) {
    ActivationBaseline baseline = fit_baseline(fx().model, fx().train.slice(0, 64), "2.0", Aggregation::mean);
    AttackConfig cfg;
    cfg.epsilon = 0.2f;
    cfg.iterations = 15;
    cfg.batch_size = 24;
    cfg.seed = 4242;
    cfg.lambda = 0.0f;
    MaskPerturbation bf = baseline_feature_uap(fx().model, fx().train, baseline, cfg);
    MaskPerturbation plain = sgd_uap(fx().model, fx().train, cfg);
    EXPECT_TRUE(tensors_equal(bf.delta, plain.delta));
}

TEST(BaselineFeature, PenaltyLowersScoresAtDefendedTap) {
    ActivationBaseline baseline = fit_baseline(fx().model, fx().train.slice(0, 200), "1.0", Aggregation::mean);
    AttackConfig cfg;
    cfg.epsilon = 0.3f;
    cfg.iterations = 100;
    cfg.batch_size = 32;
    cfg.seed = 77;
    cfg.lambda = 5.0f;
    MaskPerturbation bf = baseline_feature_uap(fx().model, fx().train, baseline, cfg);
    AttackConfig plain_cfg = cfg;
    plain_cfg.lambda = 0.0f;
    MaskPerturbation plain = sgd_uap(fx().model, fx().train, plain_cfg);

    DetectorConfig dcfg{"1.0", Aggregation::mean, 0.1f, 0.0f, 0.05f};
    const auto score_of = [&](const MaskPerturbation& m) {
        DetectionResult r = score(fx().model, apply_mask(fx().val, m), baseline, dcfg);
        double s = 0.0;
        for (float v : r.scores) s += v;
        return s / static_cast<double>(r.scores.size());
    };
    // the penalty suppresses hyper-activation where the defense is looking
    EXPECT_LT(score_of(bf), score_of(plain));
    // and the raw exceedance the penalty is written against drops too
    const auto exceedance = [&](const MaskPerturbation& m) {
        Tensor agg = aggregate_batch(tap_activations(fx().model, apply_mask(fx().val, m), "1.0"),
                                     Aggregation::mean);
        double total = 0.0;
        for (int64_t i = 0; i < agg.dim(0); ++i)
            for (int64_t j = 0; j < agg.dim(1); ++j)
                total += std::max(0.0f, agg.at(i, j) - baseline.mu[static_cast<size_t>(j)]);
        return total / static_cast<double>(agg.dim(0));
    };
    EXPECT_LT(exceedance(bf), exceedance(plain));
}

TEST(BaselineFeature, MissingOrWrongBaselineRejected) {
    AttackConfig cfg;
    cfg.epsilon = 0.1f;
    ActivationBaseline empty;
    EXPECT_THROW(baseline_feature_uap(fx().model, fx().train, empty, cfg), ArgumentError);
    ActivationBaseline std_base = fit_baseline(fx().model, fx().train.slice(0, 32), "2.0", Aggregation::std_dev);
    EXPECT_THROW(baseline_feature_uap(fx().model, fx().train, std_base, cfg), ArgumentError);
    ActivationBaseline ok = fit_baseline(fx().model, fx().train.slice(0, 32), "2.0", Aggregation::mean);
    AttackConfig mismatched = cfg;
    mismatched.target_layer = "1.0";
    EXPECT_THROW(baseline_feature_uap(fx().model, fx().train, ok, mismatched), ArgumentError);
}

TEST(Perlin, EmptyBallKeepsCleanError) {
    AttackConfig cfg;
    cfg.epsilon = 0.0f;
    cfg.seed = 5;
    MaskPerturbation m = perlin_uap(fx().model, fx().val, cfg);
    EXPECT_DOUBLE_EQ(uer(fx().model, m, fx().val), fx().clean_error);
    EXPECT_THROW(perlin_uap(fx().model, fx().val, cfg, {}), ArgumentError);
}

TEST(Perlin, DegenerateLatticeGivesConstantField) {
    // zero lattice gradients make the noise identically zero; sign(0) = +1
    LatticeGradient zero = [](int64_t, int64_t, float& gx, float& gy) { gx = gy = 0.0f; };
    Tensor mask = perlin_sine_mask(9, 9, 4.0f, 4.0f, 2.0f, 0.25f, zero);
    for (int64_t i = 0; i < mask.numel(); ++i) ASSERT_FLOAT_EQ(mask[i], 0.25f);
}

TEST(Perlin, MaskMagnitudeIsEpsilonEverywhere) {
    Tensor mask = perlin_sine_mask(16, 16, 8.0f, 4.0f, 4.0f, 0.1f, hashed_gradients(3));
    for (int64_t i = 0; i < mask.numel(); ++i) ASSERT_FLOAT_EQ(std::abs(mask[i]), 0.1f);
}

TEST(Perlin, PicksGridPointWithMaximalEvasion) {
    AttackConfig cfg;
    cfg.epsilon = 0.25f;
    cfg.seed = 21;
    const std::vector<PerlinParams> grid = {{4, 4, 2}, {16, 16, 8}, {8, 8, 4}};
    MaskPerturbation best = perlin_uap(fx().model, fx().val, cfg, grid);
    const double best_uer = uer(fx().model, best, fx().val);
    const LatticeGradient grad = hashed_gradients(cfg.seed);
    const Shape chw{1, 16, 16};
    for (const auto& p : grid) {
        MaskPerturbation cand;
        cand.delta = perlin_mask_tensor(p, chw, cfg.epsilon, grad);
        cand.epsilon = cfg.epsilon;
        EXPECT_LE(uer(fx().model, cand, fx().val), best_uer + 1e-12);
    }
    // provenance records the selected parameters
    EXPECT_NE(best.provenance.find("wavelength_x"), std::string::npos);
}

TEST(EotPatch, ValidationErrors) {
    AttackConfig cfg;
    cfg.area_fraction = 0.16f;
    EXPECT_THROW(eot_patch(fx().model, fx().train, cfg), ArgumentError);  // no target
    cfg.target_class = 1;
    cfg.area_fraction = 0.3f;
    EXPECT_THROW(eot_patch(fx().model, fx().train, cfg), ArgumentError);  // too large
    cfg.area_fraction = 0.0f;
    EXPECT_THROW(eot_patch(fx().model, fx().train, cfg), ArgumentError);
}

TEST(EotPatch, ZeroIterationsIsSeededRandomInit) {
    AttackConfig cfg;
    cfg.area_fraction = 0.16f;
    cfg.target_class = 0;
    cfg.iterations = 0;
    cfg.seed = 31;
    PatchPerturbation p = eot_patch(fx().model, fx().train, cfg);
    Rng rng(cfg.seed);
    for (int64_t i = 0; i < p.patch.numel(); ++i) ASSERT_FLOAT_EQ(p.patch[i], rng.uniform());
    // untrained patch performs at or below chance-ish target rates
    const double t = tsr(fx().model, p, fx().val, 0, /*placement_seed=*/5);
    EXPECT_LE(t, 0.67);
}

TEST(EotPatch, TrainingImprovesTargetedSuccess) {
    AttackConfig cfg;
    cfg.area_fraction = 0.16f;
    cfg.target_class = 2;
    cfg.iterations = 0;
    cfg.seed = 32;
    cfg.batch_size = 32;
    PatchPerturbation untrained = eot_patch(fx().model, fx().train, cfg);
    cfg.iterations = 80;
    PatchPerturbation trained = eot_patch(fx().model, fx().train, cfg);
    const double t0 = tsr(fx().model, untrained, fx().val, 2, 5);
    const double t1 = tsr(fx().model, trained, fx().val, 2, 5);
    EXPECT_GT(t1, t0 + 0.1) << "untrained " << t0 << " trained " << t1;
    for (int64_t i = 0; i < trained.patch.numel(); ++i) {
        ASSERT_GE(trained.patch[i], 0.0f);
        ASSERT_LE(trained.patch[i], 1.0f);
    }
    // deterministic for the same config
    PatchPerturbation again = eot_patch(fx().model, fx().train, cfg);
    EXPECT_TRUE(tensors_equal(trained.patch, again.patch));
}

TEST(EotPatch, FixedPlacementIsNoHarderThanTransformed) {
    AttackConfig cfg;
    cfg.area_fraction = 0.16f;
    cfg.target_class = 1;
    cfg.iterations = 80;
    cfg.seed = 33;
    cfg.batch_size = 32;
    PatchPerturbation moving = eot_patch(fx().model, fx().train, cfg);
    PatchTransformRanges fixed;
    fixed.max_rotation_deg = 0.0f;
    fixed.scale_min = fixed.scale_max = 1.0f;
    fixed.center_x = fixed.center_y = 8.0f;
    PatchPerturbation sticker = eot_patch(fx().model, fx().train, cfg, fixed);
    const double t_moving = tsr(fx().model, moving, fx().val, 1, 5);
    const double t_fixed = tsr(fx().model, sticker, fx().val, 1, 5);
    EXPECT_GE(t_fixed + 0.05, t_moving) << "fixed " << t_fixed << " vs moving " << t_moving;
}

TEST(PerturbationFile, MaskAndPatchRoundTrip) {
    fixtures::TempDir dir("pfile");
    AttackConfig cfg;
    cfg.epsilon = 0.15f;
    cfg.iterations = 3;
    cfg.batch_size = 16;
    cfg.seed = 2;
    MaskPerturbation m = sgd_uap(fx().model, fx().train, cfg);
    save_perturbation(dir.file("m.uapp"), m);
    Perturbation back = load_perturbation(dir.file("m.uapp"));
    ASSERT_TRUE(std::holds_alternative<MaskPerturbation>(back));
    EXPECT_TRUE(tensors_equal(std::get<MaskPerturbation>(back).delta, m.delta));
    EXPECT_FLOAT_EQ(std::get<MaskPerturbation>(back).epsilon, m.epsilon);
    EXPECT_EQ(std::get<MaskPerturbation>(back).provenance, m.provenance);

    AttackConfig pc;
    pc.area_fraction = 0.12f;
    pc.target_class = 0;
    pc.iterations = 2;
    pc.batch_size = 16;
    pc.seed = 3;
    PatchTransformRanges ranges;
    ranges.max_rotation_deg = 10.0f;
    ranges.scale_min = 0.9f;
    ranges.scale_max = 1.1f;
    PatchPerturbation p = eot_patch(fx().model, fx().train, pc, ranges);
    save_perturbation(dir.file("p.uapp"), p);
    Perturbation pback = load_perturbation(dir.file("p.uapp"));
    ASSERT_TRUE(std::holds_alternative<PatchPerturbation>(pback));
    const auto& q = std::get<PatchPerturbation>(pback);
    EXPECT_TRUE(tensors_equal(q.patch, p.patch));
    EXPECT_FLOAT_EQ(q.area_fraction, p.area_fraction);
    EXPECT_FLOAT_EQ(q.ranges.max_rotation_deg, 10.0f);
    EXPECT_FLOAT_EQ(q.ranges.scale_min, 0.9f);

    fixtures::write_bytes(dir.file("bad.uapp"), {'U', 'A', 'P', 'X', 1, 0});
    EXPECT_THROW(load_perturbation(dir.file("bad.uapp")), FormatError);
}

TEST(ApplyMask, ShapeMismatchRejected) {
    MaskPerturbation wrong;
    wrong.delta = Tensor({1, 8, 8});
    wrong.epsilon = 0.1f;
    EXPECT_THROW(apply_mask(fx().val, wrong), ShapeError);
}
