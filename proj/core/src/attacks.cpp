// SPDX-License-Identifier: Apache-2.0

#include "tva/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tva/rng.hpp"

namespace tva {

void AttackConfig::validate() const {
    if (!(epsilon > 0.0)) throw std::invalid_argument("attack '" + name + "': epsilon must be positive");
    if (!(alpha > 0.0)) throw std::invalid_argument("attack '" + name + "': alpha must be positive");
    if (!(momentum >= 0.0)) throw std::invalid_argument("attack '" + name + "': momentum must be >= 0");
    if (!(di_probability >= 0.0 && di_probability <= 1.0)) {
        throw std::invalid_argument("attack '" + name + "': di_probability must lie in [0, 1]");
    }
    if (!(di_min_scale > 0.0 && di_min_scale <= 1.0)) {
        throw std::invalid_argument("attack '" + name + "': di_min_scale must lie in (0, 1]");
    }
    if (ti_kernel % 2 == 0) throw std::invalid_argument("attack '" + name + "': ti_kernel must be odd");
    if (si_copies < 1) throw std::invalid_argument("attack '" + name + "': si_copies must be >= 1");
    schedule.validate();
    weights.validate();
}

namespace {

void require_same_size(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw ShapeError(std::string(what) + ": size mismatch " + std::to_string(a) + " vs " + std::to_string(b));
    }
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void require_finite(std::span<const double> grad, std::size_t iteration) {
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!std::isfinite(grad[i])) {
            throw std::runtime_error("non-finite gradient at iteration " + std::to_string(iteration) +
                                     " (coordinate " + std::to_string(i) + ")");
        }
    }
}

std::size_t reflect(std::int64_t i, std::size_t n) {
    const auto period = static_cast<std::int64_t>(2 * n);
    std::int64_t m = i % period;
    if (m < 0) m += period;
    return static_cast<std::size_t>(m < static_cast<std::int64_t>(n) ? m : period - 1 - m);
}

}  // namespace

Perturbation clip_project(const Perturbation& delta, std::span<const double> x) {
    require_same_size(delta.values.size(), x.size(), "clip_project");
    Perturbation out{std::vector<double>(delta.values.size()), delta.epsilon};
    for (std::size_t i = 0; i < x.size(); ++i) {
        double d = std::clamp(delta.values[i], -delta.epsilon, delta.epsilon);
        d = std::clamp(d, -x[i], 1.0 - x[i]);
        out.values[i] = d;
    }
    return out;
}

Perturbation i_fgsm_step(const Perturbation& delta, std::span<const double> grad, double alpha,
                         std::span<const double> x, std::size_t iteration) {
    require_same_size(delta.values.size(), grad.size(), "i_fgsm_step");
    require_finite(grad, iteration);
    Perturbation next = delta;
    for (std::size_t i = 0; i < grad.size(); ++i) next.values[i] += alpha * sign(grad[i]);
    return clip_project(next, x);
}

Perturbation mi_fgsm_step(const Perturbation& delta, std::span<const double> grad, MomentumState& state,
                          double mu, double alpha, std::span<const double> x, std::size_t iteration) {
    require_same_size(delta.values.size(), grad.size(), "mi_fgsm_step");
    require_finite(grad, iteration);
    if (state.accumulated.empty()) state.accumulated.assign(grad.size(), 0.0);
    require_same_size(state.accumulated.size(), grad.size(), "mi_fgsm_step momentum");
    double l1 = 0.0;
    for (double g : grad) l1 += std::abs(g);
    l1 = std::max(l1, 1e-12);
    Perturbation next = delta;
    for (std::size_t i = 0; i < grad.size(); ++i) {
        state.accumulated[i] = mu * state.accumulated[i] + grad[i] / l1;
        next.values[i] += alpha * sign(state.accumulated[i]);
    }
    return clip_project(next, x);
}

// ---------------------------------------------------------------------------

DiTransform DiTransform::identity(const Shape& video_shape) {
    DiTransform t;
    t.shape_ = video_shape;
    return t;
}

DiTransform DiTransform::draw(const Shape& video_shape, double p, double min_scale, Rng& rng) {
    if (video_shape.size() != 5) throw ShapeError("DI expects n x T x C x H x W, got " + shape_to_string(video_shape));
    DiTransform t = identity(video_shape);
    const double gate = rng.uniform();
    const double scale = rng.uniform(min_scale, 1.0);
    const double oy_u = rng.uniform();
    const double ox_u = rng.uniform();
    if (!(gate < p)) return t;

    const std::size_t h = video_shape[3], w = video_shape[4];
    const auto rh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scale * static_cast<double>(h))));
    const auto rw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(scale * static_cast<double>(w))));
    const auto oy = static_cast<std::size_t>(oy_u * static_cast<double>(h - rh + 1));
    const auto ox = static_cast<std::size_t>(ox_u * static_cast<double>(w - rw + 1));
    t.active_ = true;
    t.source_.assign(h * w, -1);
    for (std::size_t y = oy; y < oy + rh; ++y)
        for (std::size_t x = ox; x < ox + rw; ++x) {
            const std::size_t sy = (y - oy) * h / rh;
            const std::size_t sx = (x - ox) * w / rw;
            t.source_[y * w + x] = static_cast<std::int64_t>(sy * w + sx);
        }
    return t;
}

std::vector<double> DiTransform::apply(std::span<const double> values) const {
    require_same_size(values.size(), shape_size(shape_), "DiTransform::apply");
    if (!active_) return {values.begin(), values.end()};
    const std::size_t plane = shape_[3] * shape_[4];
    const std::size_t planes = values.size() / plane;
    std::vector<double> out(values.size(), 0.0);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < plane; ++i) {
            const auto s = source_[i];
            if (s >= 0) out[p * plane + i] = values[p * plane + static_cast<std::size_t>(s)];
        }
    return out;
}

std::vector<double> DiTransform::pullback(std::span<const double> grad) const {
    require_same_size(grad.size(), shape_size(shape_), "DiTransform::pullback");
    if (!active_) return {grad.begin(), grad.end()};
    const std::size_t plane = shape_[3] * shape_[4];
    const std::size_t planes = grad.size() / plane;
    std::vector<double> out(grad.size(), 0.0);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < plane; ++i) {
            const auto s = source_[i];
            if (s >= 0) out[p * plane + static_cast<std::size_t>(s)] += grad[p * plane + i];
        }
    return out;
}

VideoBatch di_transform(const VideoBatch& x, double p, std::uint64_t seed, double min_scale) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("DI probability must lie in [0, 1]");
    Rng rng(seed);
    const DiTransform t = DiTransform::draw(x.shape(), p, min_scale, rng);
    VideoBatch out = x;
    out.values = t.apply(x.values);
    return out;
}

std::vector<double> triangle_kernel(std::size_t k) {
    if (k % 2 == 0) throw std::invalid_argument("TI kernel size must be odd, got " + std::to_string(k));
    const auto r = static_cast<std::int64_t>(k / 2);
    std::vector<double> line(k);
    double total = 0.0;
    for (std::int64_t j = -r; j <= r; ++j) {
        line[static_cast<std::size_t>(j + r)] = static_cast<double>(r + 1 - std::abs(j));
        total += line[static_cast<std::size_t>(j + r)];
    }
    std::vector<double> kernel(k * k);
    for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b = 0; b < k; ++b) kernel[a * k + b] = line[a] * line[b] / (total * total);
    return kernel;
}

std::vector<double> ti_smooth(std::span<const double> grad, const Shape& video_shape, std::size_t kernel) {
    const auto weights = triangle_kernel(kernel);
    require_same_size(grad.size(), shape_size(video_shape), "ti_smooth");
    if (video_shape.size() != 5) throw ShapeError("TI expects n x T x C x H x W, got " + shape_to_string(video_shape));
    if (kernel == 1) return {grad.begin(), grad.end()};
    const std::size_t h = video_shape[3], w = video_shape[4];
    const std::size_t plane = h * w;
    const std::size_t planes = grad.size() / plane;
    const auto r = static_cast<std::int64_t>(kernel / 2);
    std::vector<double> out(grad.size(), 0.0);
    for (std::size_t p = 0; p < planes; ++p) {
        const double* src = grad.data() + p * plane;
        double* dst = out.data() + p * plane;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0.0;
                for (std::int64_t dy = -r; dy <= r; ++dy) {
                    const std::size_t sy = reflect(static_cast<std::int64_t>(y) + dy, h);
                    for (std::int64_t dx = -r; dx <= r; ++dx) {
                        const std::size_t sx = reflect(static_cast<std::int64_t>(x) + dx, w);
                        acc += weights[static_cast<std::size_t>((dy + r) * static_cast<std::int64_t>(kernel) + dx + r)] *
                               src[sy * w + sx];
                    }
                }
                dst[y * w + x] = acc;
            }
    }
    return out;
}

// ---------------------------------------------------------------------------

EmbedFn embed_fn(const Encoder& encoder) {
    return [&encoder](const DiffArray& video) { return encoder.encode(video); };
}

EmbedFn embed_fn(const Victim& victim) {
    return [&victim](const DiffArray& video) { return victim.encode(video); };
}

namespace {

DiffArray as_rows(const DiffArray& z) {
    return reshape(z, {z.dim(0) * z.dim(1), z.dim(2)});
}

}  // namespace

InputLoss embedding_objective(const EmbedFn& model, const DiffArray& clean_rows, const FrameGrouping& grouping,
                              double tau, const LossWeights& weights, ContrastiveOptions options) {
    return [model, clean_rows, grouping, tau, weights, options](const DiffArray& input) {
        return total_loss(clean_rows, as_rows(model(input)), grouping, tau, weights, options);
    };
}

ScaledGradient si_gradients(std::span<const double> x, std::span<const double> delta, const Shape& shape,
                            const InputLoss& loss, std::size_t copies) {
    if (copies < 1) throw std::invalid_argument("si_gradients needs at least one copy");
    require_same_size(x.size(), delta.size(), "si_gradients");
    require_same_size(x.size(), shape_size(shape), "si_gradients");
    std::vector<double> adv(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) adv[i] = x[i] + delta[i];

    ScaledGradient out;
    out.grad.assign(x.size(), 0.0);
    for (std::size_t k = 0; k < copies; ++k) {
        Tape tape;
        const DiffArray leaf = tape.leaf(shape, adv);
        const DiffArray input = k == 0 ? leaf : scale(leaf, std::ldexp(1.0, -static_cast<int>(k)));
        const DiffArray value = loss(input);
        if (!std::isfinite(value.item())) {
            throw std::runtime_error("non-finite loss in scale copy " + std::to_string(k));
        }
        if (k == 0) out.loss_at_identity = value.item();
        const DiffArray g = tape.backward(value).wrt(leaf);
        for (std::size_t i = 0; i < g.size(); ++i) out.grad[i] += g[i];
        ++out.evaluations;
    }
    const double inv = 1.0 / static_cast<double>(copies);
    for (auto& v : out.grad) v *= inv;
    return out;
}

AttackResult run_attack(const AttackConfig& config, const EmbedFn& surrogate, const VideoBatch& x,
                        const IterationObserver& observer) {
    config.validate();
    x.validate();
    const Shape shape = x.shape();
    const FrameGrouping grouping{x.videos, x.frames};
    const DiffArray clean = as_rows(surrogate(x.as_array())).detached();

    AttackResult result;
    result.delta = Perturbation{std::vector<double>(x.values.size(), 0.0), config.epsilon};
    MomentumState momentum;
    Rng rng(mix_seed(config.seed, 0xd1));
    const ContrastiveOptions options{config.normalize_embeddings};

    for (std::size_t t = 0; t < config.iterations; ++t) {
        const double tau = config.schedule.value(t, config.iterations);
        const DiTransform di = config.di ? DiTransform::draw(shape, config.di_probability, config.di_min_scale, rng)
                                         : DiTransform::identity(shape);
        if (di.active()) ++result.di_applied;

        // The transformed adversarial input is the differentiation point; its
        // gradient is pulled back through the (linear) DI map onto delta.
        std::vector<double> adv(x.values.size());
        for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = x.values[i] + result.delta.values[i];
        const std::vector<double> transformed = di.apply(adv);
        const std::vector<double> zero(adv.size(), 0.0);

        const InputLoss objective = embedding_objective(surrogate, clean, grouping, tau, config.weights, options);
        ScaledGradient sg;
        try {
            sg = si_gradients(transformed, zero, shape, objective, config.samples_per_iteration());
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("attack '" + config.name + "' iteration " + std::to_string(t) + ": " + e.what());
        }

        std::vector<double> grad = di.pullback(sg.grad);
        if (config.ti) grad = ti_smooth(grad, shape, config.ti_kernel);

        result.delta = config.base == BaseOptimizer::mi_fgsm
                           ? mi_fgsm_step(result.delta, grad, momentum, config.momentum, config.alpha, x.values, t)
                           : i_fgsm_step(result.delta, grad, config.alpha, x.values, t);
        result.loss_trace.push_back(sg.loss_at_identity);
        result.tau_trace.push_back(tau);
        result.forward_passes.push_back(sg.evaluations);
        if (observer) observer(t, result.delta);
    }
    return result;
}

AttackResult run_attack(const AttackConfig& config, const Encoder& surrogate, const VideoBatch& x,
                        const IterationObserver& observer) {
    return run_attack(config, embed_fn(surrogate), x, observer);
}

}  // namespace tva
