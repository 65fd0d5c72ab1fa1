// SPDX-License-Identifier: Apache-2.0
//
// l_inf-bounded iterative sign-gradient attacks (I-FGSM, MI-FGSM) with the
// DI / TI / SI input and gradient transforms, maximizing an embedding-space
// objective on a surrogate encoder.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tva/diffarray.hpp"
#include "tva/encoders.hpp"
#include "tva/losses.hpp"

namespace tva {

class Rng;

enum class BaseOptimizer { i_fgsm, mi_fgsm };

struct AttackConfig {
    std::string name = "TVA+MI-FGSM";
    BaseOptimizer base = BaseOptimizer::mi_fgsm;
    bool di = false;
    bool ti = false;
    bool si = false;
    double epsilon = 8.0 / 255.0;
    double alpha = 1.0 / 255.0;
    std::size_t iterations = 20;
    double momentum = 1.0;
    double di_probability = 0.5;
    double di_min_scale = 0.85;
    std::size_t ti_kernel = 7;
    std::size_t si_copies = 5;
    TemperatureSchedule schedule = TemperatureSchedule::exponential(0.1, 0.005);
    LossWeights weights;
    bool normalize_embeddings = false;
    std::uint64_t seed = 0;

    void validate() const;
    /// Surrogate forward/backward evaluations per iteration.
    std::size_t samples_per_iteration() const { return si ? si_copies : 1; }
};

/// Values shaped like the video batch with |delta| <= epsilon.
struct Perturbation {
    std::vector<double> values;
    double epsilon = 8.0 / 255.0;
};

struct MomentumState {
    std::vector<double> accumulated;
};

/// Clamp to [-eps, eps], then to [-x, 1 - x]. Idempotent.
Perturbation clip_project(const Perturbation& delta, std::span<const double> x);

/// delta + alpha * sign(grad), projected. sign(0) = 0. Throws
/// std::runtime_error naming `iteration` on a non-finite gradient.
Perturbation i_fgsm_step(const Perturbation& delta, std::span<const double> grad, double alpha,
                         std::span<const double> x, std::size_t iteration = 0);

/// g <- mu g + grad / max(||grad||_1, 1e-12); delta + alpha * sign(g), projected.
Perturbation mi_fgsm_step(const Perturbation& delta, std::span<const double> grad, MomentumState& state,
                          double mu, double alpha, std::span<const double> x, std::size_t iteration = 0);

/// One random resize-and-pad draw, shared by every frame and channel of a batch.
class DiTransform {
public:
    static DiTransform identity(const Shape& video_shape);
    /// Active with probability p: nearest-neighbour resize by a factor in
    /// [min_scale, 1] and zero-pad back at a random offset.
    static DiTransform draw(const Shape& video_shape, double p, double min_scale, Rng& rng);

    bool active() const { return active_; }
    std::vector<double> apply(std::span<const double> values) const;
    /// Transpose of apply (scatter-add), for chaining gradients.
    std::vector<double> pullback(std::span<const double> grad) const;

private:
    Shape shape_;
    bool active_ = false;
    // For each output pixel of a frame plane: source pixel, or -1 for padding.
    std::vector<std::int64_t> source_;
};

VideoBatch di_transform(const VideoBatch& x, double p, std::uint64_t seed, double min_scale = 0.85);

/// Normalized triangle kernel of odd size k (sums to 1).
std::vector<double> triangle_kernel(std::size_t k);

/// Per-plane 2-D convolution of an n x T x C x H x W gradient with the
/// triangle kernel, half-sample symmetric (reflect) padding.
std::vector<double> ti_smooth(std::span<const double> grad, const Shape& video_shape, std::size_t kernel);

using EmbedFn = std::function<DiffArray(const DiffArray& video)>;
/// Scalar objective of the adversarial input (recorded on the input's tape).
using InputLoss = std::function<DiffArray(const DiffArray& input)>;

EmbedFn embed_fn(const Encoder& encoder);
EmbedFn embed_fn(const Victim& victim);

struct ScaledGradient {
    std::vector<double> grad;
    std::size_t evaluations = 0;
    double loss_at_identity = 0.0;
};

/// Average over k = 0..copies-1 of d/d(delta) loss((x + delta) / 2^k).
ScaledGradient si_gradients(std::span<const double> x, std::span<const double> delta, const Shape& shape,
                            const InputLoss& loss, std::size_t copies);

struct AttackResult {
    Perturbation delta;
    std::vector<double> loss_trace;
    std::vector<double> tau_trace;
    std::vector<std::size_t> forward_passes;
    std::size_t di_applied = 0;
};

using IterationObserver = std::function<void(std::size_t iteration, const Perturbation& delta)>;

/// Maximizes the configured objective between cached clean embeddings and
/// the embeddings of x + delta, starting from delta = 0.
AttackResult run_attack(const AttackConfig& config, const EmbedFn& surrogate, const VideoBatch& x,
                        const IterationObserver& observer = {});
AttackResult run_attack(const AttackConfig& config, const Encoder& surrogate, const VideoBatch& x,
                        const IterationObserver& observer = {});

/// Loss between fixed clean embeddings and model(input), for reuse by the harness.
InputLoss embedding_objective(const EmbedFn& model, const DiffArray& clean_rows, const FrameGrouping& grouping,
                              double tau, const LossWeights& weights, ContrastiveOptions options = {});

}  // namespace tva
