// SPDX-License-Identifier: Apache-2.0
//
// Toy frame-wise video encoders and their downstream-adapted victims.
//
// An encoder maps every frame independently: patch average pooling, then m
// affine+activation blocks, then a linear projection to the embedding
// dimension. Victims come in two adaptation forms:
//
//   Form A  each block gains an additive affine residual h^i scaled by
//           delta_scale, so v^i = f^i(v^{i-1}) + h^i(v^{i-1});
//   Form B  the backbone is frozen and a task head g_psi + h^g_dpsi reads the
//           time-averaged embedding.

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <variant>
#include <vector>

#include "tva/diffarray.hpp"

namespace tva {

class Rng;

struct FrameShape {
    std::size_t channels = 1;
    std::size_t height = 16;
    std::size_t width = 16;

    std::size_t size() const { return channels * height * width; }
    bool operator==(const FrameShape&) const = default;
};

/// n x T x C x H x W pixel values in [0, 1], optional per-video labels.
struct VideoBatch {
    std::size_t videos = 0;
    std::size_t frames = 0;
    FrameShape frame;
    std::vector<double> values;
    std::vector<int> labels;

    Shape shape() const { return {videos, frames, frame.channels, frame.height, frame.width}; }
    std::size_t rows() const { return videos * frames; }
    DiffArray as_array() const { return DiffArray(shape(), values); }

    /// Throws std::invalid_argument on size, range, T < 2 or label-count violations.
    void validate() const;
};

enum class Activation { tanh, identity };

struct EncoderSpec {
    std::size_t blocks = 2;
    std::size_t patch_height = 2;
    std::size_t patch_width = 2;
    std::size_t hidden = 32;
    std::size_t embed_dim = 16;
    Activation activation = Activation::tanh;
    bool zero_bias = false;
    FrameShape frame;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t pooled_size() const;
};

/// y = x W + b for row-major x (rows x in), W (in x out).
struct Affine {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weight;
    std::vector<double> bias;

    /// Entries uniform in [-scale/sqrt(in), scale/sqrt(in)].
    static Affine random(std::size_t in, std::size_t out, Rng& rng, bool zero_bias, double scale = 1.0);
    static Affine zeros(std::size_t in, std::size_t out);

    DiffArray apply(const DiffArray& x) const;
};

class Encoder {
public:
    explicit Encoder(EncoderSpec spec);

    const EncoderSpec& spec() const { return spec_; }
    const std::vector<Affine>& blocks() const { return blocks_; }
    const Affine& projection() const { return projection_; }
    /// Constant (C*H*W) x pooled matrix realizing patch average pooling.
    const DiffArray& pooling() const { return pooling_; }

    DiffArray pool(const DiffArray& frames) const;
    DiffArray activate(const DiffArray& pre) const;
    /// f^i(v) = act(v W_i + b_i), rows of v are frames.
    DiffArray block_forward(std::size_t i, const DiffArray& v) const;
    DiffArray project(const DiffArray& v) const;

    /// rows x (C*H*W) -> rows x D
    DiffArray encode_frames(const DiffArray& frames) const;
    /// n x T x C x H x W -> n x T x D
    DiffArray encode(const DiffArray& video) const;

    /// Rejects videos whose frame geometry differs from the spec.
    void check_input(const Shape& video_shape) const;

private:
    EncoderSpec spec_;
    std::vector<Affine> blocks_;
    Affine projection_;
    DiffArray pooling_;
};

struct FormA {
    double delta_scale = 0.1;
};

enum class HeadInit { random, identity };

struct FormB {
    std::size_t classes = 4;
    HeadInit init = HeadInit::random;
    /// Magnitude of the random head update h^g; 0 leaves the head at g_psi.
    double delta_scale = 0.0;
};

using AdaptationForm = std::variant<FormA, FormB>;

/// Linear classifier on mean-pooled embeddings: logits = g_psi(p) + h^g(p).
struct TaskHead {
    Affine base;
    Affine delta;

    std::size_t classes() const { return base.out; }
    DiffArray forward(const DiffArray& pooled) const;
    DiffArray forward_base(const DiffArray& pooled) const;
};

class Victim {
public:
    Victim(std::shared_ptr<const Encoder> backbone, AdaptationForm form, std::uint64_t seed);

    bool is_form_a() const { return std::holds_alternative<FormA>(form_); }
    bool is_form_b() const { return std::holds_alternative<FormB>(form_); }
    const AdaptationForm& form() const { return form_; }
    const Encoder& backbone() const { return *backbone_; }
    std::shared_ptr<const Encoder> backbone_ptr() const { return backbone_; }

    /// Form A residual maps h^i (empty for Form B).
    const std::vector<Affine>& residuals() const { return residuals_; }
    DiffArray residual_forward(std::size_t i, const DiffArray& v) const;
    DiffArray adapted_block_forward(std::size_t i, const DiffArray& v) const;

    /// Per-frame embeddings of the victim's (possibly adapted) backbone.
    DiffArray encode(const DiffArray& video) const;
    DiffArray encode_frames(const DiffArray& frames) const;
    /// Output of the unmodified surrogate backbone.
    DiffArray backbone_encode(const DiffArray& video) const { return backbone_->encode(video); }

    bool has_head() const { return head_.has_value(); }
    const TaskHead& head() const;
    /// Copy of this victim carrying `head`.
    Victim with_head(TaskHead head) const;

    /// n x D time-averaged embeddings.
    DiffArray pooled_embeddings(const DiffArray& video) const;
    /// n x K logits. Throws std::logic_error when no head is attached (Form A
    /// victims only get one through train_head).
    DiffArray head_forward(const DiffArray& video) const;
    DiffArray head_forward_base(const DiffArray& video) const;

private:
    std::shared_ptr<const Encoder> backbone_;
    AdaptationForm form_;
    std::vector<Affine> residuals_;
    std::optional<TaskHead> head_;
};

Victim derive_victim(std::shared_ptr<const Encoder> backbone, const AdaptationForm& form,
                     std::uint64_t seed);

/// Averages T consecutive rows: (n*T) x D -> n x D.
DiffArray mean_over_frames(const DiffArray& rows, std::size_t videos, std::size_t frames);

}  // namespace tva
