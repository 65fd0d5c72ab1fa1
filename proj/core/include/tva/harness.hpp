// SPDX-License-Identifier: Apache-2.0
//
// Experiment driver: synthetic moving-blob data, closed-form task heads,
// surrogate-to-victim transfer evaluation, gradient mismatch, numerical
// checks of the deviation and gradient-asymmetry identities, and sweeps.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tva/attacks.hpp"
#include "tva/diffarray.hpp"
#include "tva/encoders.hpp"
#include "tva/losses.hpp"

namespace tva {

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct DataSpec {
    std::size_t videos = 16;
    std::size_t frames = 8;
    FrameShape frame;
    /// Motion directions used as labels: right, left, down, up (first K).
    std::size_t classes = 4;
    std::size_t blob = 4;
    double noise = 0.05;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Seeded videos of a bright square translating one pixel per frame.
VideoBatch gen_synthetic(const DataSpec& spec);

// ---------------------------------------------------------------------------
// Task heads
// ---------------------------------------------------------------------------

struct HeadFit {
    Affine weights;
    double ridge = 0.0;
    /// The unregularized normal matrix was singular and 1e-6 was applied.
    bool ridge_fallback = false;
    double train_accuracy = 0.0;
};

/// Ridge least squares of one-hot targets on [features, 1] (n x D rows).
HeadFit fit_linear_head(const DiffArray& features, std::span<const int> labels, std::size_t classes,
                        double ridge = 0.0);

std::vector<int> argmax_rows(const DiffArray& logits);
double accuracy(const DiffArray& logits, std::span<const int> labels);

struct TrainedVictim {
    Victim victim;
    HeadFit fit;
};

/// Fits a head on the victim's time-averaged clean embeddings. For Form B the
/// existing head base g_psi is kept and the fit determines h^g = fit - g_psi;
/// otherwise the fit becomes the head base with a zero update.
TrainedVictim train_head(const Victim& victim, const VideoBatch& data, std::size_t classes, double ridge = 0.0);

/// Fraction of initially-correct predictions whose argmax changes.
double attack_success_rate(const DiffArray& clean_logits, const DiffArray& adv_logits, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Plans and reports
// ---------------------------------------------------------------------------

struct VictimSpec {
    std::string name;
    AdaptationForm form;
    std::uint64_t seed = 0;
};

struct ExperimentPlan {
    DataSpec data;
    std::size_t train_videos = 128;
    EncoderSpec surrogate;
    /// Adds a white-box column named "surrogate".
    bool include_surrogate = true;
    std::vector<VictimSpec> victims;
    std::vector<AttackConfig> attacks;
    /// Loss-term subsets such as "L1", "L1+Bi-con", "L1+Bi-con+TC"; each becomes
    /// an attack "ablation:<mask>" derived from ablation_base.
    std::vector<std::string> ablation;
    AttackConfig ablation_base;
    std::vector<double> sweep_taus;
    bool sweep_decayed = true;
    TemperatureSchedule sweep_decay = TemperatureSchedule::exponential(0.1, 0.01);
    std::vector<std::uint64_t> seeds;
    double head_ridge = 0.0;
    std::size_t ablation_min_seeds = 8;
    std::size_t momentum_min_seeds = 7;

    void validate() const;
    /// `attacks` followed by the expanded ablation attacks.
    std::vector<AttackConfig> expanded_attacks() const;
};

/// Default toy zoo and comparison set.
ExperimentPlan default_plan();

/// LossWeights for a mask like "L1+Bi-con"; throws on unknown terms.
LossWeights ablation_weights(const std::string& mask);

struct ZooMember {
    std::string name;
    Victim victim;
    HeadFit fit;
};

struct Zoo {
    std::shared_ptr<const Encoder> surrogate;
    std::vector<ZooMember> members;
};

Zoo build_zoo(const ExperimentPlan& plan);
/// Same, with heads fit on `train` instead of training_data(plan).
Zoo build_zoo(const ExperimentPlan& plan, const VideoBatch& train);
VideoBatch attack_data(const ExperimentPlan& plan, std::uint64_t seed);
VideoBatch training_data(const ExperimentPlan& plan);

struct AttackRun {
    std::string attack;
    std::uint64_t seed = 0;
    std::size_t samples_per_iteration = 1;
    AttackResult result;
    std::optional<std::string> error;
};

struct CellResult {
    std::string attack;
    std::string victim;
    std::uint64_t seed = 0;
    double deviation = 0.0;
    double asr = 0.0;
    double grad_cosine = 0.0;
    std::optional<std::string> error;
};

struct HeadSummary {
    std::string victim;
    double ridge = 0.0;
    bool ridge_fallback = false;
    double train_accuracy = 0.0;
};

struct Theorem1Report {
    std::string form;
    /// max |lhs - rhs| / max(max|lhs|, max|rhs|), 0 when both sides vanish.
    double residual = 0.0;
    double abs_residual = 0.0;
    double lhs_norm = 0.0;
    double rhs_norm = 0.0;
};

struct VictimResidual {
    std::string victim;
    Theorem1Report report;
};

struct TransferReport {
    std::vector<CellResult> cells;
    std::vector<AttackRun> runs;
    std::vector<HeadSummary> heads;
    std::vector<VictimResidual> theorem1;
    std::vector<std::string> notes;
};

/// Runs every attack on the surrogate for one seed.
std::vector<AttackRun> run_attacks(const ExperimentPlan& plan, const Zoo& zoo, const VideoBatch& data,
                                   std::uint64_t seed);
/// Evaluates given perturbations on every zoo member.
std::vector<CellResult> evaluate_cells(const ExperimentPlan& plan, const Zoo& zoo, const VideoBatch& data,
                                       std::uint64_t seed, const std::vector<AttackRun>& runs);
/// Report skeleton: head fits, ridge notes and a deviation-identity residual
/// per zoo member on `first_batch`.
TransferReport zoo_report(const Zoo& zoo, const VideoBatch& first_batch);
TransferReport evaluate_transfer(const ExperimentPlan& plan);

/// Mean of the cells matching attack and victim (empty string matches all);
/// nullopt when nothing matches.
std::optional<double> mean_deviation(const TransferReport& r, const std::string& attack, const std::string& victim,
                                     std::optional<std::uint64_t> seed = std::nullopt);
std::optional<double> mean_asr(const TransferReport& r, const std::string& attack, const std::string& victim,
                               std::optional<std::uint64_t> seed = std::nullopt);

/// Seeds (out of `total`) in which an ordering of attacks held on one victim.
struct OrderingCount {
    std::string victim;
    std::size_t deviation_seeds = 0;
    std::size_t asr_seeds = 0;
    std::size_t total = 0;
};

/// "ablation:L1+Bi-con+TC" >= "ablation:L1+Bi-con" >= "ablation:L1" per
/// victim (surrogate column excluded). Empty when the plan lacks those masks.
std::vector<OrderingCount> ablation_ordering(const TransferReport& report, const ExperimentPlan& plan);
/// "TVA+MI-FGSM" >= "TVA+I-FGSM" per victim, plus a final entry named "mean"
/// comparing the per-seed mean over victims.
std::vector<OrderingCount> momentum_ordering(const TransferReport& report, const ExperimentPlan& plan);

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// Scalar loss of a model output (embeddings or logits).
using OutputLoss = std::function<DiffArray(const DiffArray& output)>;

/// Form (a): lhs from autodiff of victim and surrogate with a shared output
/// cotangent, rhs from explicit products of block Jacobians evaluated at the
/// victim's features. `loss` receives rows x D victim embeddings.
Theorem1Report verify_theorem1_form_a(const Victim& victim, const VideoBatch& x, const OutputLoss& loss);
/// Form (b): adapted-head minus base-head input gradients against
/// cotangent . grad h^g . grad f. `loss` receives n x K logits.
Theorem1Report verify_theorem1_form_b(const Victim& victim, const VideoBatch& x, const OutputLoss& loss);
/// Default losses: embedding objective for Form (a), label cross-entropy for Form (b).
Theorem1Report verify_theorem1(const Victim& victim, const VideoBatch& x);

/// Softmax cross-entropy averaged over rows.
DiffArray cross_entropy(const DiffArray& logits, std::span<const int> labels);

struct Theorem2Report {
    /// Max over anchors of the relative error between closed form and oracle.
    double adv_to_clean_error = 0.0;
    double clean_to_adv_error = 0.0;
    /// ||v_c2a - v_a2c|| / max(||v_c2a||, 1e-12) per anchor, and its minimum.
    std::vector<double> asymmetry;
    double min_asymmetry = 0.0;
    /// Part of the asymmetry orthogonal to z_i (v_c2a is parallel to z_i).
    double min_orthogonal_asymmetry = 0.0;
    /// max |grad Bi-con - (grad c2a + grad a2c) / 2| over all coordinates.
    double bicon_identity_error = 0.0;
    /// Norm of the cross-anchor contribution left out of v_c2a, max over anchors.
    double cross_anchor_norm = 0.0;
    /// Max over anchors of |sum_j q_j - 1|.
    double weight_sum_error = 0.0;
};

Theorem2Report verify_theorem2(const DiffArray& z, const DiffArray& z_adv, double tau);

/// Cosine between flattened input gradients of the same embedding objective
/// (each model anchored on its own clean embeddings) at x + delta.
double gradient_mismatch(const EmbedFn& surrogate, const EmbedFn& victim, const VideoBatch& x,
                         std::span<const double> delta, double tau, const LossWeights& weights);

// ---------------------------------------------------------------------------
// Verification suite
// ---------------------------------------------------------------------------

struct VerifySettings {
    double linear_tolerance = 1e-8;
    double tanh_tolerance = 1e-4;
    double theorem2_tolerance = 1e-8;
    double bicon_tolerance = 1e-12;
    double weight_sum_tolerance = 1e-12;
    double min_asymmetry = 1e-3;
    std::size_t theorem1_trials = 10;
    std::size_t theorem2_trials = 100;
    std::uint64_t seed = 0;
};

struct CheckResult {
    std::string name;
    double value = 0.0;
    double tolerance = 0.0;
    /// "<=" (value must not exceed tolerance), ">" (must exceed) or "info".
    std::string relation = "<=";
    bool pass = true;
};

struct VerificationReport {
    std::vector<CheckResult> form_a;
    std::vector<CheckResult> form_b;
    std::vector<CheckResult> theorem2;

    bool pass() const;
    /// Failing check furthest from its tolerance, or nullptr.
    const CheckResult* worst() const;
};

/// Seeded toy encoders and batches for both identities.
VerificationReport run_verification(const VerifySettings& settings);

// ---------------------------------------------------------------------------
// Temperature sweep
// ---------------------------------------------------------------------------

struct SweepColumn {
    std::string label;
    TemperatureSchedule schedule;
    TransferReport report;
    double mean_asr = 0.0;
    double mean_deviation = 0.0;
};

struct SweepResult {
    std::vector<SweepColumn> columns;
    /// Shape of mean ASR against increasing constant tau: "monotone_decreasing",
    /// "unimodal", "monotone_increasing" or "irregular".
    std::string trend;
};

/// Classifies a sequence ordered by increasing tau.
std::string classify_trend(std::span<const double> values_by_increasing_tau);

/// Re-runs the plan's contrastive attacks with each constant tau (in input
/// order) and optionally the decayed schedule.
SweepResult temperature_sweep(const ExperimentPlan& plan, std::span<const double> taus);

}  // namespace tva
