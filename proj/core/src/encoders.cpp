// SPDX-License-Identifier: Apache-2.0

#include "tva/encoders.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "tva/rng.hpp"

namespace tva {

void VideoBatch::validate() const {
    if (videos == 0 || frames == 0 || frame.size() == 0) {
        throw std::invalid_argument("video batch has an empty dimension " + shape_to_string(shape()));
    }
    if (frames < 2) throw std::invalid_argument("video batch needs at least 2 frames per video");
    if (values.size() != shape_size(shape())) {
        throw std::invalid_argument("video batch holds " + std::to_string(values.size()) +
                                    " values for shape " + shape_to_string(shape()));
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!(values[i] >= 0.0 && values[i] <= 1.0)) {
            throw std::invalid_argument("pixel " + std::to_string(i) + " outside [0, 1]");
        }
    }
    if (!labels.empty() && labels.size() != videos) {
        throw std::invalid_argument("expected " + std::to_string(videos) + " labels, got " +
                                    std::to_string(labels.size()));
    }
}

void EncoderSpec::validate() const {
    if (blocks < 1) throw std::invalid_argument("encoder needs at least one block");
    if (embed_dim < 2) throw std::invalid_argument("embedding dimension must be at least 2");
    if (hidden < 1) throw std::invalid_argument("hidden width must be positive");
    if (patch_height == 0 || patch_width == 0) throw std::invalid_argument("patch size must be positive");
    if (frame.size() == 0) throw std::invalid_argument("frame shape must be non-empty");
    if (frame.height % patch_height != 0 || frame.width % patch_width != 0) {
        throw std::invalid_argument("frame " + std::to_string(frame.height) + "x" +
                                    std::to_string(frame.width) + " not divisible by patch " +
                                    std::to_string(patch_height) + "x" + std::to_string(patch_width));
    }
}

std::size_t EncoderSpec::pooled_size() const {
    return frame.channels * (frame.height / patch_height) * (frame.width / patch_width);
}

Affine Affine::random(std::size_t in, std::size_t out, Rng& rng, bool zero_bias, double scale) {
    Affine a = zeros(in, out);
    const double bound = scale / std::sqrt(static_cast<double>(in));
    for (auto& w : a.weight) w = rng.uniform(-bound, bound);
    if (!zero_bias) {
        for (auto& b : a.bias) b = rng.uniform(-bound, bound);
    }
    return a;
}

Affine Affine::zeros(std::size_t in, std::size_t out) {
    Affine a;
    a.in = in;
    a.out = out;
    a.weight.assign(in * out, 0.0);
    a.bias.assign(out, 0.0);
    return a;
}

DiffArray Affine::apply(const DiffArray& x) const {
    return add_row(matmul(x, DiffArray({in, out}, weight)), DiffArray({out}, bias));
}

namespace {

DiffArray build_pooling(const EncoderSpec& spec) {
    const auto& f = spec.frame;
    const std::size_t ph = spec.patch_height, pw = spec.patch_width;
    const std::size_t oh = f.height / ph, ow = f.width / pw;
    const std::size_t pooled = spec.pooled_size();
    std::vector<double> m(f.size() * pooled, 0.0);
    const double w = 1.0 / static_cast<double>(ph * pw);
    for (std::size_t c = 0; c < f.channels; ++c)
        for (std::size_t y = 0; y < f.height; ++y)
            for (std::size_t x = 0; x < f.width; ++x) {
                const std::size_t pixel = (c * f.height + y) * f.width + x;
                const std::size_t cell = (c * oh + y / ph) * ow + x / pw;
                m[pixel * pooled + cell] = w;
            }
    return DiffArray({f.size(), pooled}, std::move(m));
}

}  // namespace

Encoder::Encoder(EncoderSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(spec_.seed);
    std::size_t in = spec_.pooled_size();
    for (std::size_t i = 0; i < spec_.blocks; ++i) {
        blocks_.push_back(Affine::random(in, spec_.hidden, rng, spec_.zero_bias));
        in = spec_.hidden;
    }
    projection_ = Affine::random(spec_.hidden, spec_.embed_dim, rng, spec_.zero_bias);
    pooling_ = build_pooling(spec_);
}

void Encoder::check_input(const Shape& s) const {
    const auto& f = spec_.frame;
    if (s.size() != 5 || s[2] != f.channels || s[3] != f.height || s[4] != f.width) {
        throw ShapeError("encoder expects n x T x " + std::to_string(f.channels) + " x " +
                         std::to_string(f.height) + " x " + std::to_string(f.width) + ", got " +
                         shape_to_string(s));
    }
}

DiffArray Encoder::pool(const DiffArray& frames) const { return matmul(frames, pooling_); }

DiffArray Encoder::activate(const DiffArray& pre) const {
    return spec_.activation == Activation::tanh ? tanh(pre) : pre;
}

DiffArray Encoder::block_forward(std::size_t i, const DiffArray& v) const {
    return activate(blocks_.at(i).apply(v));
}

DiffArray Encoder::project(const DiffArray& v) const { return projection_.apply(v); }

DiffArray Encoder::encode_frames(const DiffArray& frames) const {
    DiffArray v = pool(frames);
    for (std::size_t i = 0; i < blocks_.size(); ++i) v = block_forward(i, v);
    return project(v);
}

DiffArray Encoder::encode(const DiffArray& video) const {
    check_input(video.shape());
    const std::size_t n = video.dim(0), t = video.dim(1);
    DiffArray frames = reshape(video, {n * t, spec_.frame.size()});
    return reshape(encode_frames(frames), {n, t, spec_.embed_dim});
}

// ---------------------------------------------------------------------------

DiffArray TaskHead::forward(const DiffArray& pooled) const {
    return add(base.apply(pooled), delta.apply(pooled));
}

DiffArray TaskHead::forward_base(const DiffArray& pooled) const { return base.apply(pooled); }

DiffArray mean_over_frames(const DiffArray& rows, std::size_t videos, std::size_t frames) {
    if (rows.rank() != 2 || rows.dim(0) != videos * frames) {
        throw ShapeError("mean_over_frames: " + shape_to_string(rows.shape()) + " is not " +
                         std::to_string(videos * frames) + " rows");
    }
    std::vector<double> avg(videos * videos * frames, 0.0);
    const double w = 1.0 / static_cast<double>(frames);
    for (std::size_t v = 0; v < videos; ++v)
        for (std::size_t t = 0; t < frames; ++t) avg[v * videos * frames + v * frames + t] = w;
    return matmul(DiffArray({videos, videos * frames}, std::move(avg)), rows);
}

Victim::Victim(std::shared_ptr<const Encoder> backbone, AdaptationForm form, std::uint64_t seed)
    : backbone_(std::move(backbone)), form_(std::move(form)) {
    if (!backbone_) throw std::invalid_argument("victim needs a backbone");
    const auto& spec = backbone_->spec();
    Rng rng(mix_seed(seed, 0xa11ce));
    if (const auto* a = std::get_if<FormA>(&form_)) {
        if (!(a->delta_scale >= 0.0)) throw std::invalid_argument("Form A delta_scale must be >= 0");
        for (const auto& block : backbone_->blocks()) {
            residuals_.push_back(Affine::random(block.in, block.out, rng, spec.zero_bias, a->delta_scale));
        }
    } else {
        const auto& b = std::get<FormB>(form_);
        if (b.classes < 2) throw std::invalid_argument("Form B needs at least 2 classes");
        if (!(b.delta_scale >= 0.0)) throw std::invalid_argument("Form B delta_scale must be >= 0");
        const std::size_t d = spec.embed_dim;
        TaskHead head;
        if (b.init == HeadInit::identity) {
            if (d != b.classes) {
                throw std::invalid_argument("identity head needs embed_dim == classes");
            }
            head.base = Affine::zeros(d, d);
            for (std::size_t i = 0; i < d; ++i) head.base.weight[i * d + i] = 1.0;
        } else {
            head.base = Affine::random(d, b.classes, rng, spec.zero_bias);
        }
        head.delta = b.delta_scale > 0.0 ? Affine::random(d, b.classes, rng, spec.zero_bias, b.delta_scale)
                                         : Affine::zeros(d, b.classes);
        head_ = std::move(head);
    }
}

DiffArray Victim::residual_forward(std::size_t i, const DiffArray& v) const {
    if (!is_form_a()) throw std::logic_error("residual maps exist only for Form A victims");
    const Affine& r = residuals_.at(i);
    return r.apply(v);
}

DiffArray Victim::adapted_block_forward(std::size_t i, const DiffArray& v) const {
    if (!is_form_a()) return backbone_->block_forward(i, v);
    return add(backbone_->block_forward(i, v), residual_forward(i, v));
}

DiffArray Victim::encode_frames(const DiffArray& frames) const {
    if (!is_form_a()) return backbone_->encode_frames(frames);
    DiffArray v = backbone_->pool(frames);
    for (std::size_t i = 0; i < residuals_.size(); ++i) v = adapted_block_forward(i, v);
    return backbone_->project(v);
}

DiffArray Victim::encode(const DiffArray& video) const {
    if (!is_form_a()) return backbone_->encode(video);
    backbone_->check_input(video.shape());
    const std::size_t n = video.dim(0), t = video.dim(1);
    const auto& spec = backbone_->spec();
    DiffArray frames = reshape(video, {n * t, spec.frame.size()});
    return reshape(encode_frames(frames), {n, t, spec.embed_dim});
}

const TaskHead& Victim::head() const {
    if (!head_) throw std::logic_error("victim has no task head");
    return *head_;
}

Victim Victim::with_head(TaskHead head) const {
    Victim copy = *this;
    copy.head_ = std::move(head);
    return copy;
}

DiffArray Victim::pooled_embeddings(const DiffArray& video) const {
    DiffArray z = encode(video);
    const std::size_t n = z.dim(0), t = z.dim(1), d = z.dim(2);
    return mean_over_frames(reshape(z, {n * t, d}), n, t);
}

DiffArray Victim::head_forward(const DiffArray& video) const {
    if (!head_) {
        throw std::logic_error(is_form_a() ? "head_forward called on a Form A victim without a trained head"
                                           : "victim has no task head");
    }
    return head_->forward(pooled_embeddings(video));
}

DiffArray Victim::head_forward_base(const DiffArray& video) const {
    return head().forward_base(pooled_embeddings(video));
}

Victim derive_victim(std::shared_ptr<const Encoder> backbone, const AdaptationForm& form,
                     std::uint64_t seed) {
    return Victim(std::move(backbone), form, seed);
}

}  // namespace tva
