// SPDX-License-Identifier: Apache-2.0
//
// Embedding-space attack objectives.
//
// Embeddings are frame-level rows: a batch of V videos with T frames each is
// an (V*T) x D matrix, row v*T + t holding frame t of video v. In the
// contrastive losses row i of the clean matrix and row i of the adversarial
// matrix form the positive pair; every other row is a negative.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tva/diffarray.hpp"

namespace tva {

struct TemperatureSchedule {
    enum class Mode { constant, exponential };

    Mode mode = Mode::constant;
    double start = 0.01;
    double end = 0.01;

    static TemperatureSchedule constant(double tau) { return {Mode::constant, tau, tau}; }
    static TemperatureSchedule exponential(double from, double to) { return {Mode::exponential, from, to}; }

    /// tau at iteration t of `iterations`; exponential mode interpolates
    /// geometrically so value(0) == start and value(I - 1) == end.
    double value(std::size_t t, std::size_t iterations) const;
    void validate() const;
};

struct LossWeights {
    double l1 = 1.0;
    double bicon = 1.0;
    double tc = 1.0;

    void validate() const;
};

/// Maps contrastive rows to (video, frame).
struct FrameGrouping {
    std::size_t videos = 1;
    std::size_t frames = 1;

    std::size_t rows() const { return videos * frames; }
};

struct ContrastiveOptions {
    /// L2-normalize rows before the dot products. Off by default: the
    /// similarities are raw dot products.
    bool normalize = false;
};

struct ContrastiveLoss {
    DiffArray loss;
    /// L^(i) for each anchor row.
    std::vector<double> per_anchor;
};

/// ||z_adv - z||_1
DiffArray l1_loss(const DiffArray& z, const DiffArray& z_adv);

/// Mean over anchors i of -log softmax_j(z_i . z_adv_j / tau)[i].
ContrastiveLoss contrastive_clean_to_adv(const DiffArray& z, const DiffArray& z_adv, double tau,
                                         ContrastiveOptions options = {});
/// Mean over anchors i of -log softmax_j(z_adv_i . z_j / tau)[i].
ContrastiveLoss contrastive_adv_to_clean(const DiffArray& z, const DiffArray& z_adv, double tau,
                                         ContrastiveOptions options = {});
/// Arithmetic mean of the two one-way losses.
DiffArray bicon_loss(const DiffArray& z, const DiffArray& z_adv, double tau,
                     ContrastiveOptions options = {});

/// Per-anchor term L^(i) as a recorded scalar (used as a gradient oracle).
DiffArray contrastive_anchor_term_clean_to_adv(const DiffArray& z, const DiffArray& z_adv, double tau,
                                               std::size_t i);
DiffArray contrastive_anchor_term_adv_to_clean(const DiffArray& z, const DiffArray& z_adv, double tau,
                                               std::size_t i);

/// Mean over videos of (1/(T-1)) sum_t (1 - cos(z_adv_t, z_adv_{t+1})).
/// A T x D matrix with grouping {1, T} is the single-video case.
DiffArray tc_loss(const DiffArray& z_adv, const FrameGrouping& grouping);

/// w_l1 * L_L1 + w_bicon * L_Bi-con + w_tc * L_TC. Terms with zero weight
/// are not evaluated.
DiffArray total_loss(const DiffArray& z, const DiffArray& z_adv, const FrameGrouping& grouping,
                     double tau, const LossWeights& weights, ContrastiveOptions options = {});

// ---------------------------------------------------------------------------
// Closed-form gradient prefactors for a single anchor i, evaluated in plain
// arithmetic (no tape). Both are gradients w.r.t. z_adv_i of (1/n) L^(i).
// ---------------------------------------------------------------------------

/// (1 / n tau) (exp(-L^(i)_{c->a}) - 1) z_i
std::vector<double> prefactor_clean_to_adv(const DiffArray& z, const DiffArray& z_adv, double tau,
                                           std::size_t i);

struct AdvToCleanPrefactor {
    std::vector<double> vector;
    /// Softmax weights q_j over clean rows, q_i included.
    std::vector<double> weights;
};

/// (1 / n tau) (exp(-L^(i)_{a->c}) z_i + sum_{j != i} q_j z_j - z_i)
AdvToCleanPrefactor prefactor_adv_to_clean(const DiffArray& z, const DiffArray& z_adv, double tau,
                                           std::size_t i);

}  // namespace tva
