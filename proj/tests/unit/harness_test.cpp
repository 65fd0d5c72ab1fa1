// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "tva/harness.hpp"
#include "tva/rng.hpp"
#include "tva_test_support.hpp"

using namespace tva;

namespace {

// Default zoo and profile, cut down to a few seeds and attacks.
ExperimentPlan small_plan(std::vector<std::string> attacks = {"TVA+MI-FGSM"}, std::size_t seeds = 2) {
    ExperimentPlan plan = default_plan();
    std::vector<AttackConfig> keep;
    for (const auto& a : plan.attacks)
        if (std::find(attacks.begin(), attacks.end(), a.name) != attacks.end()) keep.push_back(a);
    plan.attacks = keep;
    plan.ablation.clear();
    plan.data.videos = 8;
    plan.train_videos = 96;
    plan.seeds.resize(seeds);
    return plan;
}

const CellResult& cell(const TransferReport& r, const std::string& attack, const std::string& victim,
                       std::uint64_t seed) {
    for (const auto& c : r.cells)
        if (c.attack == attack && c.victim == victim && c.seed == seed) return c;
    throw std::runtime_error("missing cell " + attack + "/" + victim);
}

}  // namespace

TEST(Synthetic, SameSeedIsBitIdentical) {
    DataSpec s;
    s.seed = 42;
    EXPECT_EQ(gen_synthetic(s).values, gen_synthetic(s).values);
    EXPECT_EQ(gen_synthetic(s).labels, gen_synthetic(s).labels);
    DataSpec t = s;
    t.seed = 43;
    EXPECT_NE(gen_synthetic(s).values, gen_synthetic(t).values);
}

TEST(Synthetic, PixelsInRangeAndLabelsValid) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        DataSpec s;
        s.seed = seed;
        s.noise = 0.5;
        const VideoBatch b = gen_synthetic(s);
        EXPECT_NO_THROW(b.validate());
        for (double v : b.values) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        for (int l : b.labels) {
            EXPECT_GE(l, 0);
            EXPECT_LT(l, 4);
        }
    }
}

TEST(Synthetic, RejectsBadSpec) {
    DataSpec s;
    s.classes = 5;
    EXPECT_THROW(s.validate(), std::invalid_argument);
    s = {};
    s.frames = 1;
    EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Heads, HeldOutAccuracyOfFormBHead) {
    const ExperimentPlan plan = default_plan();
    const Zoo zoo = build_zoo(plan);
    for (const auto& m : zoo.members) {
        if (!m.victim.is_form_b()) continue;
        double acc = 0.0;
        for (std::uint64_t seed : plan.seeds) {
            const VideoBatch held = attack_data(plan, seed);
            acc += accuracy(m.victim.head_forward(held.as_array()), held.labels);
        }
        acc /= static_cast<double>(plan.seeds.size());
        EXPECT_GE(acc, 0.9) << m.name;
    }
}

TEST(Heads, SeparableTwoClassToy) {
    const DiffArray f({6, 2}, {1.0, 0.1, 1.2, -0.2, 0.9, 0.0, -1.0, 0.2, -1.1, -0.1, -0.8, 0.0});
    const std::vector<int> labels{0, 0, 0, 1, 1, 1};
    const HeadFit fit = fit_linear_head(f, labels, 2);
    EXPECT_EQ(fit.train_accuracy, 1.0);
    EXPECT_FALSE(fit.ridge_fallback);
}

TEST(Heads, RidgePathIsNonDegenerate) {
    Rng rng(3);
    const DiffArray f = tva::testing::gaussian({20, 4}, 1.0, rng);
    std::vector<int> labels(20);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
    const HeadFit a = fit_linear_head(f, labels, 3, 1e-6), b = fit_linear_head(f, labels, 3, 1e-3);
    EXPECT_NE(a.weights.weight, b.weights.weight);
    EXPECT_EQ(fit_linear_head(f, labels, 3, 1e-6).weights.weight, a.weights.weight);
}

TEST(Heads, SingularSystemFallsBackToRidge) {
    // Constant feature duplicates the bias column.
    const DiffArray f({4, 2}, {1.0, 0.3, 1.0, -0.2, 1.0, 0.5, 1.0, -0.7});
    const HeadFit fit = fit_linear_head(f, std::vector<int>{0, 1, 0, 1}, 2);
    EXPECT_TRUE(fit.ridge_fallback);
    EXPECT_EQ(fit.ridge, 1e-6);
    for (double w : fit.weights.weight) EXPECT_TRUE(std::isfinite(w));
}

TEST(Heads, FormBKeepsBaseAndLearnsUpdate) {
    const ExperimentPlan plan = small_plan();
    const Zoo zoo = build_zoo(plan);
    const auto it = std::find_if(zoo.members.begin(), zoo.members.end(), [](const auto& m) { return m.name == "FormB"; });
    ASSERT_NE(it, zoo.members.end());
    const Victim fresh = derive_victim(zoo.surrogate, plan.victims[2].form, plan.victims[2].seed);
    EXPECT_EQ(it->victim.head().base.weight, fresh.head().base.weight);
    const VideoBatch x = attack_data(plan, 1);
    const DiffArray adapted = it->victim.head_forward(x.as_array());
    const DiffArray fitted = it->fit.weights.apply(it->victim.pooled_embeddings(x.as_array()));
    for (std::size_t i = 0; i < adapted.size(); ++i) EXPECT_NEAR(adapted[i], fitted[i], 1e-10);
}

TEST(Heads, AttackSuccessRate) {
    const DiffArray clean({3, 2}, {1.0, 0.0, 0.0, 1.0, 1.0, 0.0});
    const DiffArray adv({3, 2}, {0.0, 1.0, 0.0, 1.0, 1.0, 0.0});
    // Third sample is misclassified on clean input and does not count.
    EXPECT_DOUBLE_EQ(attack_success_rate(clean, adv, std::vector<int>{0, 1, 1}), 0.5);
}

TEST(Plan, Validation) {
    ExperimentPlan p = default_plan();
    EXPECT_NO_THROW(p.validate());
    p.victims.push_back(p.victims.front());
    EXPECT_THROW(p.validate(), std::invalid_argument);
    p = default_plan();
    p.victims.clear();
    EXPECT_THROW(p.validate(), std::invalid_argument);
    p = default_plan();
    p.attacks.push_back(p.attacks.front());
    EXPECT_THROW(p.validate(), std::invalid_argument);
    EXPECT_THROW(ablation_weights("L1+Foo"), std::invalid_argument);
    const LossWeights w = ablation_weights("L1+TC");
    EXPECT_EQ(w.l1, 1.0);
    EXPECT_EQ(w.bicon, 0.0);
    EXPECT_EQ(w.tc, 1.0);
}

TEST(Plan, ExpandedAttacksAppendAblation) {
    const ExperimentPlan p = default_plan();
    const auto all = p.expanded_attacks();
    ASSERT_EQ(all.size(), p.attacks.size() + 3);
    EXPECT_EQ(all.back().name, "ablation:L1+Bi-con+TC");
    EXPECT_EQ(all[all.size() - 3].weights.bicon, 0.0);
}

TEST(Transfer, ZeroEpsilonGivesZeroEffect) {
    ExperimentPlan plan = small_plan();
    for (auto& a : plan.attacks) a.epsilon = 1e-300;
    const TransferReport r = evaluate_transfer(plan);
    ASSERT_FALSE(r.cells.empty());
    for (const auto& c : r.cells) {
        EXPECT_FALSE(c.error);
        EXPECT_NEAR(c.deviation, 0.0, 1e-250);
        EXPECT_EQ(c.asr, 0.0);
    }
}

TEST(Transfer, UnadaptedVictimMatchesSurrogateColumn) {
    ExperimentPlan plan = small_plan({"TVA+MI-FGSM", "TVA+I-FGSM"});
    plan.victims.push_back({"FormA@0", FormA{0.0}, 999});
    const TransferReport r = evaluate_transfer(plan);
    for (const auto& c : r.cells) {
        if (c.victim != "FormA@0") continue;
        const CellResult& s = cell(r, c.attack, "surrogate", c.seed);
        EXPECT_EQ(c.deviation, s.deviation);
        EXPECT_EQ(c.asr, s.asr);
        EXPECT_NEAR(c.grad_cosine, 1.0, 1e-12);
    }
}

TEST(Transfer, ReportIsComplete) {
    const ExperimentPlan plan = small_plan({"I-FGSM", "SIM", "TVA+I-FGSM"});
    const TransferReport r = evaluate_transfer(plan);
    EXPECT_EQ(r.cells.size(), plan.attacks.size() * (plan.victims.size() + 1) * plan.seeds.size());
    for (const auto& c : r.cells) {
        EXPECT_GE(c.asr, 0.0);
        EXPECT_LE(c.asr, 1.0);
        EXPECT_GE(c.deviation, 0.0);
        EXPECT_GE(c.grad_cosine, -1.0);
        EXPECT_LE(c.grad_cosine, 1.0);
    }
    EXPECT_EQ(r.heads.size(), plan.victims.size() + 1);
}

TEST(Transfer, AttackFailureIsRecordedPerCell) {
    ExperimentPlan plan = small_plan();
    AttackConfig broken = plan.attacks.front();
    broken.name = "broken";
    broken.schedule = TemperatureSchedule::constant(5e-324);
    plan.attacks.push_back(broken);
    const TransferReport r = evaluate_transfer(plan);
    bool saw_error = false, saw_ok = false;
    for (const auto& c : r.cells) {
        if (c.attack == "broken") saw_error |= c.error.has_value();
        else saw_ok |= !c.error;
    }
    EXPECT_TRUE(saw_error);
    EXPECT_TRUE(saw_ok);
}

TEST(Transfer, WhiteBoxDominance) {
    ExperimentPlan plan = default_plan();
    plan.ablation.clear();
    const TransferReport r = evaluate_transfer(plan);
    for (const auto& a : plan.attacks) {
        const double white = *mean_deviation(r, a.name, "surrogate");
        EXPECT_GE(white, *mean_deviation(r, a.name, "FormA@0.1")) << a.name;
        EXPECT_GE(white, *mean_deviation(r, a.name, "FormA@0.5")) << a.name;
    }
}

TEST(Transfer, AsrGrowsWithEpsilon) {
    ExperimentPlan small = small_plan({"TVA+MI-FGSM"}, 10), large = small;
    for (auto& a : small.attacks) {
        a.epsilon = 2.0 / 255.0;
        a.alpha = 0.5 / 255.0;
    }
    const double lo = *mean_asr(evaluate_transfer(small), "TVA+MI-FGSM", "");
    const double hi = *mean_asr(evaluate_transfer(large), "TVA+MI-FGSM", "");
    EXPECT_GE(hi, lo);
}

TEST(Transfer, AttackBeatsRandomNoise) {
    const ExperimentPlan plan = small_plan({"TVA+MI-FGSM"}, 10);
    const TransferReport r = evaluate_transfer(plan);
    const Zoo zoo = build_zoo(plan);
    double noise_asr = 0.0;
    std::size_t count = 0;
    for (std::uint64_t seed : plan.seeds) {
        const VideoBatch x = attack_data(plan, seed);
        Rng rng(mix_seed(seed, 0x5eed));
        std::vector<double> noisy(x.values);
        for (auto& v : noisy) v = std::clamp(v + (rng.bernoulli(0.5) ? 1.0 : -1.0) * 8.0 / 255.0, 0.0, 1.0);
        for (const auto& m : zoo.members) {
            noise_asr += attack_success_rate(m.victim.head_forward(x.as_array()),
                                             m.victim.head_forward(DiffArray(x.shape(), noisy)), x.labels);
            ++count;
        }
    }
    EXPECT_GT(*mean_asr(r, "TVA+MI-FGSM", ""), noise_asr / static_cast<double>(count));
}

TEST(DeviationIdentity, LinearResidualsAndZeroDelta) {
    const VerificationReport v = run_verification({});
    EXPECT_TRUE(v.pass());
    for (const auto* group : {&v.form_a, &v.form_b}) {
        for (const auto& c : *group) {
            if (c.name == "linear_residual") EXPECT_LE(c.value, 1e-8);
            if (c.name == "zero_delta_deviation") EXPECT_EQ(c.value, 0.0);
        }
    }
}

TEST(DeviationIdentity, FormBAtCleanPointOnDefaultZoo) {
    const ExperimentPlan plan = small_plan();
    const Zoo zoo = build_zoo(plan);
    const VideoBatch x = attack_data(plan, 1);
    for (const auto& m : zoo.members) {
        if (!m.victim.is_form_b()) continue;
        const Theorem1Report r = verify_theorem1(m.victim, x);
        EXPECT_EQ(r.form, "b");
        EXPECT_LE(r.residual, 1e-4);
        EXPECT_GT(r.lhs_norm, 0.0);
    }
}

TEST(DeviationIdentity, ZeroHeadUpdateGivesZeroSides) {
    const ExperimentPlan plan = small_plan();
    const auto surrogate = std::make_shared<const Encoder>(plan.surrogate);
    const Victim v = derive_victim(surrogate, FormB{4, HeadInit::random, 0.0}, 5);
    const Theorem1Report r = verify_theorem1(v, attack_data(plan, 1));
    EXPECT_EQ(r.lhs_norm, 0.0);
    EXPECT_EQ(r.rhs_norm, 0.0);
    EXPECT_EQ(r.residual, 0.0);
}

TEST(GradientAsymmetry, RandomBatches) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const DiffArray z = tva::testing::gaussian({4, 8}, 1.0 / std::sqrt(8.0), rng);
        const DiffArray za = tva::testing::gaussian({4, 8}, 1.0 / std::sqrt(8.0), rng);
        const Theorem2Report r = verify_theorem2(z, za, 0.1);
        EXPECT_LE(r.adv_to_clean_error, 1e-8);
        EXPECT_LE(r.clean_to_adv_error, 1e-8);
        EXPECT_GT(r.min_asymmetry, 1e-3);
        EXPECT_LE(r.bicon_identity_error, 1e-12);
        EXPECT_LE(r.weight_sum_error, 1e-12);
        EXPECT_EQ(r.asymmetry.size(), 4u);
        EXPECT_GT(r.cross_anchor_norm, 0.0);
    }
}

TEST(GradientAsymmetry, ColinearRowsReduceAsymmetry) {
    Rng rng(5);
    std::vector<double> dir(8), col(32);
    for (auto& e : dir) e = rng.normal();
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t k = 0; k < 8; ++k) col[i * 8 + k] = (0.5 + 0.25 * double(i)) * dir[k] / 3.0;
    const DiffArray z({4, 8}, col);
    const Theorem2Report colinear = verify_theorem2(z, z, 0.1);
    EXPECT_LT(colinear.min_orthogonal_asymmetry, 1e-12);

    const DiffArray za = tva::testing::gaussian({4, 8}, 1.0 / std::sqrt(8.0), rng);
    const DiffArray zr = tva::testing::gaussian({4, 8}, 1.0 / std::sqrt(8.0), rng);
    EXPECT_GT(verify_theorem2(zr, za, 0.1).min_orthogonal_asymmetry, colinear.min_orthogonal_asymmetry);
}

TEST(GradientAsymmetry, NeedsTwoRows) {
    EXPECT_THROW(verify_theorem2(DiffArray::zeros({1, 3}), DiffArray::zeros({1, 3}), 0.1), std::invalid_argument);
}

TEST(GradientMismatch, IdenticalModelsGiveOne) {
    const ExperimentPlan plan = small_plan();
    const Zoo zoo = build_zoo(plan);
    const VideoBatch x = attack_data(plan, 1);
    const std::vector<double> delta(x.values.size(), 0.0);
    const EmbedFn s = embed_fn(*zoo.surrogate);
    EXPECT_NEAR(gradient_mismatch(s, s, x, delta, 0.1, {}), 1.0, 1e-12);
    const Victim same = derive_victim(zoo.surrogate, FormA{0.0}, 3);
    EXPECT_NEAR(gradient_mismatch(s, embed_fn(same), x, delta, 0.1, {}), 1.0, 1e-12);
}

TEST(GradientMismatch, GrowsWithAdaptation) {
    const ExperimentPlan plan = small_plan();
    const auto surrogate = std::make_shared<const Encoder>(plan.surrogate);
    const EmbedFn s = embed_fn(*surrogate);
    double near = 0.0, far = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const VideoBatch x = attack_data(plan, seed);
        Rng rng(seed);
        std::vector<double> delta(x.values.size());
        for (auto& d : delta) d = (rng.bernoulli(0.5) ? 1.0 : -1.0) * 4.0 / 255.0;
        const Perturbation p = clip_project({delta, 8.0 / 255.0}, x.values);
        const Victim a = derive_victim(surrogate, FormA{0.1}, seed), b = derive_victim(surrogate, FormA{1.0}, seed);
        near += gradient_mismatch(s, embed_fn(a), x, p.values, 0.1, {});
        far += gradient_mismatch(s, embed_fn(b), x, p.values, 0.1, {});
    }
    EXPECT_LT(far / 10.0, near / 10.0);
}

TEST(Sweep, ClassifyTrend) {
    EXPECT_EQ(classify_trend(std::vector<double>{0.5, 0.4, 0.1}), "monotone_decreasing");
    EXPECT_EQ(classify_trend(std::vector<double>{0.1, 0.4, 0.5}), "monotone_increasing");
    EXPECT_EQ(classify_trend(std::vector<double>{0.1, 0.4, 0.2, 0.1}), "unimodal");
    EXPECT_EQ(classify_trend(std::vector<double>{0.3, 0.1, 0.4, 0.2}), "irregular");
}

TEST(Sweep, ColumnsInInputOrderWithDecay) {
    const ExperimentPlan plan = small_plan({"TVA+MI-FGSM", "I-FGSM"});
    const std::vector<double> taus{1.0, 0.1, 0.01};
    const SweepResult s = temperature_sweep(plan, taus);
    ASSERT_EQ(s.columns.size(), 4u);
    for (std::size_t i = 0; i < taus.size(); ++i) EXPECT_EQ(s.columns[i].schedule.start, taus[i]);
    EXPECT_EQ(s.columns.back().schedule.mode, TemperatureSchedule::Mode::exponential);
    for (const auto& col : s.columns) {
        EXPECT_EQ(col.report.cells.size(), (plan.victims.size() + 1) * plan.seeds.size());
        for (const auto& c : col.report.cells) EXPECT_FALSE(c.error);
    }
}

TEST(Sweep, SingleTauMatchesEvaluateTransfer) {
    ExperimentPlan plan = small_plan();
    plan.sweep_decayed = false;
    const std::vector<double> taus{0.07};
    const SweepResult s = temperature_sweep(plan, taus);
    for (auto& a : plan.attacks) a.schedule = TemperatureSchedule::constant(0.07);
    const TransferReport direct = evaluate_transfer(plan);
    ASSERT_EQ(s.columns.size(), 1u);
    ASSERT_EQ(s.columns[0].report.cells.size(), direct.cells.size());
    for (std::size_t i = 0; i < direct.cells.size(); ++i) {
        EXPECT_EQ(s.columns[0].report.cells[i].deviation, direct.cells[i].deviation);
        EXPECT_EQ(s.columns[0].report.cells[i].asr, direct.cells[i].asr);
    }
}
