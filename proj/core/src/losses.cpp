// SPDX-License-Identifier: Apache-2.0

#include "tva/losses.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>

namespace tva {

double TemperatureSchedule::value(std::size_t t, std::size_t iterations) const {
    if (mode == Mode::constant || iterations < 2) return start;
    if (t == 0) return start;
    if (t + 1 >= iterations) return end;
    const double frac = static_cast<double>(t) / static_cast<double>(iterations - 1);
    return start * std::pow(end / start, frac);
}

void TemperatureSchedule::validate() const {
    if (!(start > 0.0) || !(end > 0.0)) throw std::invalid_argument("temperature must be positive");
}

void LossWeights::validate() const {
    if (!(l1 >= 0.0) || !(bicon >= 0.0) || !(tc >= 0.0)) {
        throw std::invalid_argument("loss weights must be non-negative");
    }
    if (l1 + bicon + tc <= 0.0) throw std::invalid_argument("at least one loss weight must be positive");
}

namespace {

void require_pair(const DiffArray& z, const DiffArray& z_adv, const char* op) {
    if (z.rank() != 2 || z.shape() != z_adv.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(z.shape()) + " vs " +
                         shape_to_string(z_adv.shape()));
    }
}

void require_tau(double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive, got " + std::to_string(tau));
}

// log-softmax over rows of anchor . others^T / tau
DiffArray log_probs(const DiffArray& anchors, const DiffArray& others, double tau) {
    return log_softmax(scale(matmul(anchors, transpose(others)), 1.0 / tau), 1);
}

ContrastiveLoss one_way(const DiffArray& anchors, const DiffArray& others, double tau,
                        ContrastiveOptions options) {
    const DiffArray a = options.normalize ? row_normalize(anchors) : anchors;
    const DiffArray o = options.normalize ? row_normalize(others) : others;
    const DiffArray diag = diagonal(log_probs(a, o, tau));
    ContrastiveLoss result{scale(mean(diag), -1.0), {}};
    result.per_anchor.reserve(diag.size());
    for (double v : diag.values()) result.per_anchor.push_back(-v);
    return result;
}

double row_dot(const DiffArray& a, std::size_t i, const DiffArray& b, std::size_t j) {
    const std::size_t d = a.dim(1);
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * b[j * d + k];
    return s;
}

void require_anchor(const DiffArray& z, std::size_t i) {
    if (i >= z.dim(0)) {
        throw std::out_of_range("anchor index " + std::to_string(i) + " out of range for " +
                                std::to_string(z.dim(0)) + " rows");
    }
}

// Softmax over j of anchor_i . others_j / tau, in plain arithmetic.
std::vector<double> anchor_softmax(const DiffArray& anchors, const DiffArray& others, double tau,
                                   std::size_t i) {
    const std::size_t n = anchors.dim(0);
    std::vector<double> s(n);
    for (std::size_t j = 0; j < n; ++j) s[j] = row_dot(anchors, i, others, j) / tau;
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (auto& v : s) {
        v = std::exp(v - mx);
        z += v;
    }
    for (auto& v : s) v /= z;
    return s;
}

}  // namespace

DiffArray l1_loss(const DiffArray& z, const DiffArray& z_adv) {
    if (z.shape() != z_adv.shape()) {
        throw ShapeError("l1_loss: shape mismatch " + shape_to_string(z.shape()) + " vs " +
                         shape_to_string(z_adv.shape()));
    }
    return l1_norm(sub(z_adv, z));
}

ContrastiveLoss contrastive_clean_to_adv(const DiffArray& z, const DiffArray& z_adv, double tau,
                                         ContrastiveOptions options) {
    require_pair(z, z_adv, "contrastive_clean_to_adv");
    require_tau(tau);
    return one_way(z, z_adv, tau, options);
}

ContrastiveLoss contrastive_adv_to_clean(const DiffArray& z, const DiffArray& z_adv, double tau,
                                         ContrastiveOptions options) {
    require_pair(z, z_adv, "contrastive_adv_to_clean");
    require_tau(tau);
    return one_way(z_adv, z, tau, options);
}

DiffArray bicon_loss(const DiffArray& z, const DiffArray& z_adv, double tau, ContrastiveOptions options) {
    auto c2a = contrastive_clean_to_adv(z, z_adv, tau, options);
    auto a2c = contrastive_adv_to_clean(z, z_adv, tau, options);
    return scale(add(c2a.loss, a2c.loss), 0.5);
}

DiffArray contrastive_anchor_term_clean_to_adv(const DiffArray& z, const DiffArray& z_adv, double tau,
                                               std::size_t i) {
    require_pair(z, z_adv, "contrastive_anchor_term_clean_to_adv");
    require_tau(tau);
    require_anchor(z, i);
    const std::size_t n = z.dim(0);
    return scale(element(log_probs(z, z_adv, tau), i * n + i), -1.0);
}

DiffArray contrastive_anchor_term_adv_to_clean(const DiffArray& z, const DiffArray& z_adv, double tau,
                                               std::size_t i) {
    require_pair(z, z_adv, "contrastive_anchor_term_adv_to_clean");
    require_tau(tau);
    require_anchor(z, i);
    const std::size_t n = z.dim(0);
    return scale(element(log_probs(z_adv, z, tau), i * n + i), -1.0);
}

DiffArray tc_loss(const DiffArray& z_adv, const FrameGrouping& grouping) {
    if (grouping.frames < 2) throw std::invalid_argument("tc_loss needs at least 2 frames per video");
    if (z_adv.rank() != 2 || z_adv.dim(0) != grouping.rows()) {
        throw ShapeError("tc_loss: " + shape_to_string(z_adv.shape()) + " does not hold " +
                         std::to_string(grouping.videos) + " videos x " + std::to_string(grouping.frames) +
                         " frames");
    }
    const std::size_t t = grouping.frames;
    std::optional<DiffArray> acc;
    for (std::size_t v = 0; v < grouping.videos; ++v) {
        const std::size_t base = v * t;
        DiffArray cos = row_cosine(slice_rows(z_adv, base, base + t - 1), slice_rows(z_adv, base + 1, base + t));
        DiffArray m = mean(cos);
        acc = acc ? add(*acc, m) : m;
    }
    return add_scalar(scale(*acc, -1.0 / static_cast<double>(grouping.videos)), 1.0);
}

DiffArray total_loss(const DiffArray& z, const DiffArray& z_adv, const FrameGrouping& grouping,
                     double tau, const LossWeights& weights, ContrastiveOptions options) {
    weights.validate();
    require_pair(z, z_adv, "total_loss");
    if (z.dim(0) != grouping.rows()) {
        throw std::invalid_argument("total_loss: grouping of " + std::to_string(grouping.videos) + "x" +
                                    std::to_string(grouping.frames) + " does not cover " +
                                    std::to_string(z.dim(0)) + " rows");
    }
    std::optional<DiffArray> acc;
    auto push = [&acc](DiffArray term) { acc = acc ? add(*acc, term) : std::move(term); };
    if (weights.l1 > 0.0) push(scale(l1_loss(z, z_adv), weights.l1));
    if (weights.bicon > 0.0) push(scale(bicon_loss(z, z_adv, tau, options), weights.bicon));
    if (weights.tc > 0.0) push(scale(tc_loss(z_adv, grouping), weights.tc));
    return *acc;
}

std::vector<double> prefactor_clean_to_adv(const DiffArray& z, const DiffArray& z_adv, double tau,
                                           std::size_t i) {
    require_pair(z, z_adv, "prefactor_clean_to_adv");
    require_tau(tau);
    require_anchor(z, i);
    const std::size_t n = z.dim(0), d = z.dim(1);
    const auto p = anchor_softmax(z, z_adv, tau, i);
    const double loss = -std::log(p[i]);
    const double coeff = (std::exp(-loss) - 1.0) / (static_cast<double>(n) * tau);
    std::vector<double> v(d);
    for (std::size_t k = 0; k < d; ++k) v[k] = coeff * z[i * d + k];
    return v;
}

AdvToCleanPrefactor prefactor_adv_to_clean(const DiffArray& z, const DiffArray& z_adv, double tau,
                                           std::size_t i) {
    require_pair(z, z_adv, "prefactor_adv_to_clean");
    require_tau(tau);
    require_anchor(z, i);
    const std::size_t n = z.dim(0), d = z.dim(1);
    AdvToCleanPrefactor out;
    out.weights = anchor_softmax(z_adv, z, tau, i);
    const double loss = -std::log(out.weights[i]);
    const double scale_factor = 1.0 / (static_cast<double>(n) * tau);
    out.vector.assign(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) {
        double acc = std::exp(-loss) * z[i * d + k];
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) acc += out.weights[j] * z[j * d + k];
        }
        out.vector[k] = scale_factor * (acc - z[i * d + k]);
    }
    return out;
}

}  // namespace tva
