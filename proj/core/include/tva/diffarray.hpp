// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense double arrays.
//
// A DiffArray is a value (shape + row-major buffer). When it was produced by
// an operation that involved a recorded operand, it also carries a handle into
// the Tape that recorded it. Constants carry no handle and never receive
// gradients. The tape must outlive every array that references it.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tva {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class Tape;

class DiffArray {
public:
    DiffArray() = default;
    DiffArray(Shape shape, std::vector<double> values);

    static DiffArray scalar(double value);
    static DiffArray zeros(Shape shape);
    static DiffArray filled(Shape shape, double value);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return values_.size(); }
    std::size_t dim(std::size_t axis) const;

    std::span<const double> values() const& { return values_; }
    const std::vector<double>& data() const& { return values_; }
    /// Rvalue overloads: views into a temporary would dangle.
    std::span<const double> values() const&& = delete;
    std::vector<double> data() && { return std::move(values_); }
    double operator[](std::size_t i) const { return values_[i]; }
    /// Value of a single-element array.
    double item() const;

    bool recorded() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    std::size_t node() const { return node_; }

    /// Same values, detached from any tape.
    DiffArray detached() const { return DiffArray(shape_, values_); }

private:
    friend class Tape;

    Shape shape_;
    std::vector<double> values_;
    Tape* tape_ = nullptr;
    std::size_t node_ = 0;
};

enum class OpKind : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    scale,
    add_scalar,
    matmul,
    transpose,
    add_row,
    tanh,
    exp,
    log,
    sum,
    mean,
    dot,
    l2_norm,
    l1_norm,
    cosine,
    row_cosine,
    row_normalize,
    softmax,
    log_softmax,
    diagonal,
    element,
    slice_rows,
    reshape,
};

/// Gradients of one scalar output with respect to every node of a tape.
class Gradients {
public:
    /// Gradient with respect to `array`, shaped like it. Arrays that did not
    /// influence the output (or constants) get zeros.
    DiffArray wrt(const DiffArray& array) const;

private:
    friend class Tape;
    std::vector<std::vector<double>> grads_;
    const Tape* tape_ = nullptr;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Registers `value` as a differentiable leaf.
    DiffArray leaf(const DiffArray& value);
    DiffArray leaf(Shape shape, std::vector<double> values);

    /// Reverse sweep from a scalar output recorded on this tape.
    Gradients backward(const DiffArray& output) const;

    std::size_t size() const { return nodes_.size(); }
    OpKind kind(std::size_t node) const { return nodes_.at(node).kind; }

    struct Node {
        OpKind kind = OpKind::leaf;
        // Parent node handles; -1 marks a constant operand.
        std::int64_t lhs = -1;
        std::int64_t rhs = -1;
        Shape shape;
        Shape lhs_shape;
        Shape rhs_shape;
        // Forward values the backward rule needs.
        std::vector<double> saved_lhs;
        std::vector<double> saved_rhs;
        std::vector<double> saved_out;
        double param = 0.0;
        std::size_t index = 0;
        std::size_t extent = 0;
    };

    /// Internal: append a node and bind `result` to it.
    void record(Node node, DiffArray& result);

private:
    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Forward operations. Every op records itself when any operand is recorded;
// operands recorded on different tapes are rejected.
// ---------------------------------------------------------------------------

/// Elementwise; either operand may be a rank-0 scalar.
DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray scale(const DiffArray& a, double factor);
DiffArray add_scalar(const DiffArray& a, double offset);

/// (m x k) * (k x n)
DiffArray matmul(const DiffArray& a, const DiffArray& b);
DiffArray transpose(const DiffArray& a);
/// Adds a length-n vector to every row of an (m x n) matrix.
DiffArray add_row(const DiffArray& a, const DiffArray& row);

DiffArray tanh(const DiffArray& a);
DiffArray exp(const DiffArray& a);
/// Throws std::domain_error on any non-positive entry.
DiffArray log(const DiffArray& a);

DiffArray sum(const DiffArray& a);
DiffArray mean(const DiffArray& a);
DiffArray dot(const DiffArray& a, const DiffArray& b);
DiffArray l2_norm(const DiffArray& a);
/// Subgradient 0 at exact zeros.
DiffArray l1_norm(const DiffArray& a);

inline constexpr double kCosineFloor = 1e-12;

/// Cosine of two same-shaped arrays viewed as flat vectors. The denominator
/// is floored at kCosineFloor and treated as a constant while floored.
DiffArray cosine_similarity(const DiffArray& a, const DiffArray& b);
/// Per-row cosine of two (m x n) matrices; result has length m.
DiffArray row_cosine(const DiffArray& a, const DiffArray& b);
/// Scales each row of an (m x n) matrix to unit L2 norm (floored).
DiffArray row_normalize(const DiffArray& a);

/// Max-subtracted softmax over `axis` (0 or 1) of a matrix, or over a vector.
DiffArray softmax(const DiffArray& a, std::size_t axis);
DiffArray log_softmax(const DiffArray& a, std::size_t axis);

/// Main diagonal of a square matrix.
DiffArray diagonal(const DiffArray& a);
/// Single element by flat index, as a scalar.
DiffArray element(const DiffArray& a, std::size_t flat_index);
/// Rows [begin, end) of a matrix.
DiffArray slice_rows(const DiffArray& a, std::size_t begin, std::size_t end);
DiffArray reshape(const DiffArray& a, Shape shape);

// ---------------------------------------------------------------------------

using ScalarFunction = std::function<double(const DiffArray&)>;

/// Central differences (f(x + h e_k) - f(x - h e_k)) / 2h for every k.
/// Evaluation failures are rethrown as std::runtime_error naming k.
DiffArray finite_difference(const ScalarFunction& f, const DiffArray& x, double h);

}  // namespace tva
