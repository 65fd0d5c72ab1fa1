// SPDX-License-Identifier: Apache-2.0

#include "tva/diffarray.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace tva {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

DiffArray::DiffArray(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_to_string(shape_));
    }
    if (shape_size(shape_) != values_.size()) {
        throw ShapeError("shape " + shape_to_string(shape_) + " does not match " +
                         std::to_string(values_.size()) + " values");
    }
}

DiffArray DiffArray::scalar(double value) { return DiffArray({}, {value}); }

DiffArray DiffArray::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

DiffArray DiffArray::filled(Shape shape, double value) {
    const std::size_t n = shape_size(shape);
    return DiffArray(std::move(shape), std::vector<double>(n, value));
}

std::size_t DiffArray::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape_));
    }
    return shape_[axis];
}

double DiffArray::item() const {
    if (values_.size() != 1) {
        throw ShapeError("item() on non-scalar shape " + shape_to_string(shape_));
    }
    return values_[0];
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

DiffArray Tape::leaf(const DiffArray& value) {
    DiffArray out = value.detached();
    Node node;
    node.kind = OpKind::leaf;
    record(std::move(node), out);
    return out;
}

DiffArray Tape::leaf(Shape shape, std::vector<double> values) {
    return leaf(DiffArray(std::move(shape), std::move(values)));
}

void Tape::record(Node node, DiffArray& result) {
    node.shape = result.shape();
    nodes_.push_back(std::move(node));
    result.tape_ = this;
    result.node_ = nodes_.size() - 1;
}

DiffArray Gradients::wrt(const DiffArray& array) const {
    if (array.tape() != tape_ || array.node() >= grads_.size() || grads_[array.node()].empty()) {
        return DiffArray::zeros(array.shape());
    }
    return DiffArray(array.shape(), grads_[array.node()]);
}

namespace {

bool is_scalar(const Shape& s) { return shape_size(s) == 1 && s.empty(); }

Tape* common_tape(const DiffArray& a) { return a.tape(); }

Tape* common_tape(const DiffArray& a, const DiffArray& b) {
    if (a.tape() && b.tape() && a.tape() != b.tape()) {
        throw std::invalid_argument("operands are recorded on different tapes");
    }
    return a.tape() ? a.tape() : b.tape();
}

std::int64_t handle(const DiffArray& a) {
    return a.recorded() ? static_cast<std::int64_t>(a.node()) : -1;
}

void require_matrix(const DiffArray& a, const char* op) {
    if (a.rank() != 2) {
        throw ShapeError(std::string(op) + " expects a matrix, got " + shape_to_string(a.shape()));
    }
}

// Output shape for elementwise binary ops with scalar broadcasting.
Shape broadcast_shape(const DiffArray& a, const DiffArray& b, const char* op) {
    if (a.shape() == b.shape()) return a.shape();
    if (is_scalar(a.shape())) return b.shape();
    if (is_scalar(b.shape())) return a.shape();
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
}

inline double at(const std::vector<double>& v, std::size_t i) { return v.size() == 1 ? v[0] : v[i]; }

template <typename F>
DiffArray elementwise(const DiffArray& a, const DiffArray& b, const char* op, F f) {
    Shape shape = broadcast_shape(a, b, op);
    const std::size_t n = shape_size(shape);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(at(a.data(), i), at(b.data(), i));
    return DiffArray(std::move(shape), std::move(out));
}

template <typename F>
DiffArray unary(const DiffArray& a, F f) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return DiffArray(a.shape(), std::move(out));
}

Tape::Node make_node(OpKind kind, const DiffArray& a) {
    Tape::Node node;
    node.kind = kind;
    node.lhs = handle(a);
    node.lhs_shape = a.shape();
    return node;
}

Tape::Node make_node(OpKind kind, const DiffArray& a, const DiffArray& b) {
    Tape::Node node = make_node(kind, a);
    node.rhs = handle(b);
    node.rhs_shape = b.shape();
    return node;
}

// Iteration over the lanes of a softmax axis.
struct Lanes {
    std::size_t count;
    std::size_t length;
    std::size_t stride;
    std::size_t lane_step;
};

Lanes lanes_for(const Shape& shape, std::size_t axis, const char* op) {
    if (shape.size() == 1 && axis == 0) return {1, shape[0], 1, 0};
    if (shape.size() == 2 && axis == 1) return {shape[0], shape[1], 1, shape[1]};
    if (shape.size() == 2 && axis == 0) return {shape[1], shape[0], shape[1], 1};
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                     shape_to_string(shape));
}

double row_dot(const std::vector<double>& a, const std::vector<double>& b, std::size_t row,
               std::size_t cols) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += a[row * cols + j] * b[row * cols + j];
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

DiffArray add(const DiffArray& a, const DiffArray& b) {
    Tape* tape = common_tape(a, b);
    DiffArray out = elementwise(a, b, "add", [](double x, double y) { return x + y; });
    if (tape) tape->record(make_node(OpKind::add, a, b), out);
    return out;
}

DiffArray sub(const DiffArray& a, const DiffArray& b) {
    Tape* tape = common_tape(a, b);
    DiffArray out = elementwise(a, b, "sub", [](double x, double y) { return x - y; });
    if (tape) tape->record(make_node(OpKind::sub, a, b), out);
    return out;
}

DiffArray mul(const DiffArray& a, const DiffArray& b) {
    Tape* tape = common_tape(a, b);
    DiffArray out = elementwise(a, b, "mul", [](double x, double y) { return x * y; });
    if (tape) {
        auto node = make_node(OpKind::mul, a, b);
        node.saved_lhs = a.data();
        node.saved_rhs = b.data();
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray scale(const DiffArray& a, double factor) {
    DiffArray out = unary(a, [factor](double x) { return x * factor; });
    if (Tape* tape = common_tape(a)) {
        auto node = make_node(OpKind::scale, a);
        node.param = factor;
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray add_scalar(const DiffArray& a, double offset) {
    DiffArray out = unary(a, [offset](double x) { return x + offset; });
    if (Tape* tape = common_tape(a)) tape->record(make_node(OpKind::add_scalar, a), out);
    return out;
}

DiffArray matmul(const DiffArray& a, const DiffArray& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    }
    Tape* tape = common_tape(a, b);
    std::vector<double> c(m * n, 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = &bv[p * n];
            double* crow = &c[i * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    DiffArray out({m, n}, std::move(c));
    if (tape) {
        auto node = make_node(OpKind::matmul, a, b);
        if (b.recorded()) node.saved_lhs = a.data();
        if (a.recorded()) node.saved_rhs = b.data();
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray transpose(const DiffArray& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> t(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    DiffArray out({n, m}, std::move(t));
    if (Tape* tape = common_tape(a)) tape->record(make_node(OpKind::transpose, a), out);
    return out;
}

DiffArray add_row(const DiffArray& a, const DiffArray& row) {
    require_matrix(a, "add_row");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (row.rank() != 1 || row.dim(0) != n) {
        throw ShapeError("add_row: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(row.shape()));
    }
    Tape* tape = common_tape(a, row);
    std::vector<double> out_v(a.data());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out_v[i * n + j] += row[j];
    DiffArray out(a.shape(), std::move(out_v));
    if (tape) tape->record(make_node(OpKind::add_row, a, row), out);
    return out;
}

DiffArray tanh(const DiffArray& a) {
    DiffArray out = unary(a, [](double x) { return std::tanh(x); });
    if (Tape* tape = common_tape(a)) {
        auto node = make_node(OpKind::tanh, a);
        node.saved_out = out.data();
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray exp(const DiffArray& a) {
    DiffArray out = unary(a, [](double x) { return std::exp(x); });
    for (double v : out.values()) {
        if (!std::isfinite(v)) throw std::overflow_error("exp: result overflows double precision");
    }
    if (Tape* tape = common_tape(a)) {
        auto node = make_node(OpKind::exp, a);
        node.saved_out = out.data();
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray log(const DiffArray& a) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!(a[i] > 0.0)) {
            throw std::domain_error("log: non-positive argument " + std::to_string(a[i]) +
                                    " at index " + std::to_string(i));
        }
    }
    DiffArray out = unary(a, [](double x) { return std::log(x); });
    if (Tape* tape = common_tape(a)) {
        auto node = make_node(OpKind::log, a);
        node.saved_lhs = a.data();
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray sum(const DiffArray& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    DiffArray out = DiffArray::scalar(s);
    if (Tape* tape = common_tape(a)) tape->record(make_node(OpKind::sum, a), out);
    return out;
}

DiffArray mean(const DiffArray& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    DiffArray out = DiffArray::scalar(s / static_cast<double>(a.size()));
    if (Tape* tape = common_tape(a)) tape->record(make_node(OpKind::mean, a), out);
    return out;
}

DiffArray dot(const DiffArray& a, const DiffArray& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("dot: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    }
    Tape* tape = common_tape(a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    DiffArray out = DiffArray::scalar(s);
    if (tape) {
        auto node = make_node(OpKind::dot, a, b);
        node.saved_lhs = a.data();
        node.saved_rhs = b.data();
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray l2_norm(const DiffArray& a) {
    double s = 0.0;
    for (double v : a.values()) s += v * v;
    DiffArray out = DiffArray::scalar(std::sqrt(s));
    if (Tape* tape = common_tape(a)) {
        auto node = make_node(OpKind::l2_norm, a);
        node.saved_lhs = a.data();
        node.param = out.item();
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray l1_norm(const DiffArray& a) {
    double s = 0.0;
    for (double v : a.values()) s += std::abs(v);
    DiffArray out = DiffArray::scalar(s);
    if (Tape* tape = common_tape(a)) {
        auto node = make_node(OpKind::l1_norm, a);
        node.saved_lhs = a.data();
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray cosine_similarity(const DiffArray& a, const DiffArray& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("cosine_similarity: shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
    Tape* tape = common_tape(a, b);
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const double den = std::max(std::sqrt(aa) * std::sqrt(bb), kCosineFloor);
    DiffArray out = DiffArray::scalar(ab / den);
    if (tape) {
        auto node = make_node(OpKind::cosine, a, b);
        node.saved_lhs = a.data();
        node.saved_rhs = b.data();
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray row_cosine(const DiffArray& a, const DiffArray& b) {
    require_matrix(a, "row_cosine");
    if (a.shape() != b.shape()) {
        throw ShapeError("row_cosine: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
    }
    Tape* tape = common_tape(a, b);
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> c(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double ab = row_dot(a.data(), b.data(), i, n);
        const double na = std::sqrt(row_dot(a.data(), a.data(), i, n));
        const double nb = std::sqrt(row_dot(b.data(), b.data(), i, n));
        c[i] = ab / std::max(na * nb, kCosineFloor);
    }
    DiffArray out({m}, std::move(c));
    if (tape) {
        auto node = make_node(OpKind::row_cosine, a, b);
        node.saved_lhs = a.data();
        node.saved_rhs = b.data();
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray row_normalize(const DiffArray& a) {
    require_matrix(a, "row_normalize");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> y(a.data());
    for (std::size_t i = 0; i < m; ++i) {
        const double norm = std::max(std::sqrt(row_dot(a.data(), a.data(), i, n)), kCosineFloor);
        for (std::size_t j = 0; j < n; ++j) y[i * n + j] /= norm;
    }
    DiffArray out(a.shape(), std::move(y));
    if (Tape* tape = common_tape(a)) {
        auto node = make_node(OpKind::row_normalize, a);
        node.saved_lhs = a.data();
        node.saved_out = out.data();
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray softmax(const DiffArray& a, std::size_t axis) {
    const Lanes lanes = lanes_for(a.shape(), axis, "softmax");
    std::vector<double> y(a.size());
    for (std::size_t l = 0; l < lanes.count; ++l) {
        const std::size_t base = l * lanes.lane_step;
        double mx = a[base];
        for (std::size_t t = 1; t < lanes.length; ++t) mx = std::max(mx, a[base + t * lanes.stride]);
        double z = 0.0;
        for (std::size_t t = 0; t < lanes.length; ++t) {
            const std::size_t idx = base + t * lanes.stride;
            y[idx] = std::exp(a[idx] - mx);
            z += y[idx];
        }
        for (std::size_t t = 0; t < lanes.length; ++t) y[base + t * lanes.stride] /= z;
    }
    DiffArray out(a.shape(), std::move(y));
    if (Tape* tape = common_tape(a)) {
        auto node = make_node(OpKind::softmax, a);
        node.saved_out = out.data();
        node.index = axis;
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray log_softmax(const DiffArray& a, std::size_t axis) {
    const Lanes lanes = lanes_for(a.shape(), axis, "log_softmax");
    std::vector<double> y(a.size());
    for (std::size_t l = 0; l < lanes.count; ++l) {
        const std::size_t base = l * lanes.lane_step;
        std::size_t arg = 0;
        for (std::size_t t = 1; t < lanes.length; ++t)
            if (a[base + t * lanes.stride] > a[base + arg * lanes.stride]) arg = t;
        const double mx = a[base + arg * lanes.stride];
        // log1p of the non-max mass keeps near-zero outputs accurate.
        double rest = 0.0;
        for (std::size_t t = 0; t < lanes.length; ++t)
            if (t != arg) rest += std::exp(a[base + t * lanes.stride] - mx);
        const double log_z = std::log1p(rest);
        for (std::size_t t = 0; t < lanes.length; ++t) {
            const std::size_t idx = base + t * lanes.stride;
            y[idx] = (a[idx] - mx) - log_z;
        }
    }
    DiffArray out(a.shape(), std::move(y));
    if (Tape* tape = common_tape(a)) {
        auto node = make_node(OpKind::log_softmax, a);
        node.saved_out = out.data();
        node.index = axis;
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray diagonal(const DiffArray& a) {
    require_matrix(a, "diagonal");
    const std::size_t n = a.dim(0);
    if (a.dim(1) != n) throw ShapeError("diagonal: matrix not square " + shape_to_string(a.shape()));
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i * n + i];
    DiffArray out({n}, std::move(d));
    if (Tape* tape = common_tape(a)) tape->record(make_node(OpKind::diagonal, a), out);
    return out;
}

DiffArray element(const DiffArray& a, std::size_t flat_index) {
    if (flat_index >= a.size()) {
        throw std::out_of_range("element: index " + std::to_string(flat_index) +
                                " out of range for shape " + shape_to_string(a.shape()));
    }
    DiffArray out = DiffArray::scalar(a[flat_index]);
    if (Tape* tape = common_tape(a)) {
        auto node = make_node(OpKind::element, a);
        node.index = flat_index;
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray slice_rows(const DiffArray& a, std::size_t begin, std::size_t end) {
    require_matrix(a, "slice_rows");
    if (begin >= end || end > a.dim(0)) {
        throw std::out_of_range("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                                ") invalid for shape " + shape_to_string(a.shape()));
    }
    const std::size_t n = a.dim(1);
    std::vector<double> v(a.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                          a.data().begin() + static_cast<std::ptrdiff_t>(end * n));
    DiffArray out({end - begin, n}, std::move(v));
    if (Tape* tape = common_tape(a)) {
        auto node = make_node(OpKind::slice_rows, a);
        node.index = begin;
        node.extent = end - begin;
        tape->record(std::move(node), out);
    }
    return out;
}

DiffArray reshape(const DiffArray& a, Shape shape) {
    if (shape_size(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                         shape_to_string(shape));
    }
    DiffArray out(std::move(shape), a.data());
    if (Tape* tape = common_tape(a)) tape->record(make_node(OpKind::reshape, a), out);
    return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

void accumulate(std::vector<std::vector<double>>& grads, std::int64_t parent, std::size_t size,
                const std::vector<double>& contribution) {
    if (parent < 0) return;
    auto& g = grads[static_cast<std::size_t>(parent)];
    if (g.empty()) g.assign(size, 0.0);
    for (std::size_t i = 0; i < size; ++i) g[i] += contribution[i];
}

// Reduces a broadcast gradient back onto an operand of `shape`.
std::vector<double> reduce_to(const std::vector<double>& g, const Shape& shape) {
    if (shape_size(shape) == g.size()) return g;
    double s = 0.0;
    for (double v : g) s += v;
    return {s};
}

}  // namespace

Gradients Tape::backward(const DiffArray& output) const {
    if (output.tape() != this) throw std::invalid_argument("backward: output not recorded on this tape");
    if (output.size() != 1) {
        throw ShapeError("backward: output must be scalar, got " + shape_to_string(output.shape()));
    }
    Gradients result;
    result.tape_ = this;
    auto& grads = result.grads_;
    grads.assign(nodes_.size(), {});
    grads[output.node()] = {1.0};

    for (std::size_t idx = output.node() + 1; idx-- > 0;) {
        if (grads[idx].empty()) continue;
        const Node& node = nodes_[idx];
        const std::vector<double> g = grads[idx];
        const std::size_t nl = shape_size(node.lhs_shape);
        const std::size_t nr = shape_size(node.rhs_shape);
        const std::size_t nout = g.size();

        switch (node.kind) {
            case OpKind::leaf:
                break;
            case OpKind::add:
                accumulate(grads, node.lhs, nl, reduce_to(g, node.lhs_shape));
                accumulate(grads, node.rhs, nr, reduce_to(g, node.rhs_shape));
                break;
            case OpKind::sub: {
                accumulate(grads, node.lhs, nl, reduce_to(g, node.lhs_shape));
                auto neg = reduce_to(g, node.rhs_shape);
                for (auto& v : neg) v = -v;
                accumulate(grads, node.rhs, nr, neg);
                break;
            }
            case OpKind::mul: {
                std::vector<double> ga(nout), gb(nout);
                for (std::size_t i = 0; i < nout; ++i) {
                    ga[i] = g[i] * at(node.saved_rhs, i);
                    gb[i] = g[i] * at(node.saved_lhs, i);
                }
                accumulate(grads, node.lhs, nl, reduce_to(ga, node.lhs_shape));
                accumulate(grads, node.rhs, nr, reduce_to(gb, node.rhs_shape));
                break;
            }
            case OpKind::scale: {
                std::vector<double> ga(g);
                for (auto& v : ga) v *= node.param;
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
            case OpKind::add_scalar:
            case OpKind::reshape:
                accumulate(grads, node.lhs, nl, g);
                break;
            case OpKind::matmul: {
                const std::size_t m = node.lhs_shape[0], k = node.lhs_shape[1], n = node.rhs_shape[1];
                if (node.lhs >= 0) {
                    // dA = G B^T
                    std::vector<double> ga(m * k, 0.0);
                    const auto& b = node.saved_rhs;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            double s = 0.0;
                            for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * b[p * n + j];
                            ga[i * k + p] = s;
                        }
                    accumulate(grads, node.lhs, nl, ga);
                }
                if (node.rhs >= 0) {
                    // dB = A^T G
                    std::vector<double> gb(k * n, 0.0);
                    const auto& a = node.saved_lhs;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            const double aip = a[i * k + p];
                            if (aip == 0.0) continue;
                            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                        }
                    accumulate(grads, node.rhs, nr, gb);
                }
                break;
            }
            case OpKind::transpose: {
                const std::size_t m = node.lhs_shape[0], n = node.lhs_shape[1];
                std::vector<double> ga(m * n);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[j * m + i];
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
            case OpKind::add_row: {
                accumulate(grads, node.lhs, nl, g);
                const std::size_t m = node.lhs_shape[0], n = node.lhs_shape[1];
                std::vector<double> gr(n, 0.0);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
                accumulate(grads, node.rhs, nr, gr);
                break;
            }
            case OpKind::tanh: {
                std::vector<double> ga(nout);
                for (std::size_t i = 0; i < nout; ++i) {
                    const double y = node.saved_out[i];
                    ga[i] = g[i] * (1.0 - y * y);
                }
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
            case OpKind::exp: {
                std::vector<double> ga(nout);
                for (std::size_t i = 0; i < nout; ++i) ga[i] = g[i] * node.saved_out[i];
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
            case OpKind::log: {
                std::vector<double> ga(nout);
                for (std::size_t i = 0; i < nout; ++i) ga[i] = g[i] / node.saved_lhs[i];
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
            case OpKind::sum:
                accumulate(grads, node.lhs, nl, std::vector<double>(nl, g[0]));
                break;
            case OpKind::mean:
                accumulate(grads, node.lhs, nl, std::vector<double>(nl, g[0] / static_cast<double>(nl)));
                break;
            case OpKind::dot: {
                std::vector<double> ga(nl), gb(nl);
                for (std::size_t i = 0; i < nl; ++i) {
                    ga[i] = g[0] * node.saved_rhs[i];
                    gb[i] = g[0] * node.saved_lhs[i];
                }
                accumulate(grads, node.lhs, nl, ga);
                accumulate(grads, node.rhs, nr, gb);
                break;
            }
            case OpKind::l2_norm: {
                std::vector<double> ga(nl, 0.0);
                if (node.param > 0.0) {
                    for (std::size_t i = 0; i < nl; ++i) ga[i] = g[0] * node.saved_lhs[i] / node.param;
                }
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
            case OpKind::l1_norm: {
                std::vector<double> ga(nl);
                for (std::size_t i = 0; i < nl; ++i) {
                    const double x = node.saved_lhs[i];
                    ga[i] = x > 0.0 ? g[0] : (x < 0.0 ? -g[0] : 0.0);
                }
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
            case OpKind::cosine:
            case OpKind::row_cosine: {
                const auto& a = node.saved_lhs;
                const auto& b = node.saved_rhs;
                const bool rows = node.kind == OpKind::row_cosine;
                const std::size_t m = rows ? node.lhs_shape[0] : 1;
                const std::size_t n = rows ? node.lhs_shape[1] : nl;
                std::vector<double> ga(nl), gb(nl);
                for (std::size_t r = 0; r < m; ++r) {
                    const double ab = row_dot(a, b, r, n);
                    const double aa = row_dot(a, a, r, n);
                    const double bb = row_dot(b, b, r, n);
                    const double na = std::sqrt(aa), nb = std::sqrt(bb);
                    const double den = na * nb;
                    const double gr = g[rows ? r : 0];
                    for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t i = r * n + j;
                        if (den > kCosineFloor) {
                            const double c = ab / den;
                            ga[i] = gr * (b[i] / den - c * a[i] / aa);
                            gb[i] = gr * (a[i] / den - c * b[i] / bb);
                        } else {
                            ga[i] = gr * b[i] / kCosineFloor;
                            gb[i] = gr * a[i] / kCosineFloor;
                        }
                    }
                }
                accumulate(grads, node.lhs, nl, ga);
                accumulate(grads, node.rhs, nr, gb);
                break;
            }
            case OpKind::row_normalize: {
                const std::size_t m = node.lhs_shape[0], n = node.lhs_shape[1];
                const auto& a = node.saved_lhs;
                const auto& y = node.saved_out;
                std::vector<double> ga(nl);
                for (std::size_t r = 0; r < m; ++r) {
                    const double norm = std::sqrt(row_dot(a, a, r, n));
                    if (norm > kCosineFloor) {
                        double yg = 0.0;
                        for (std::size_t j = 0; j < n; ++j) yg += y[r * n + j] * g[r * n + j];
                        for (std::size_t j = 0; j < n; ++j) {
                            ga[r * n + j] = (g[r * n + j] - y[r * n + j] * yg) / norm;
                        }
                    } else {
                        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] = g[r * n + j] / kCosineFloor;
                    }
                }
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
            case OpKind::softmax:
            case OpKind::log_softmax: {
                const Lanes lanes = lanes_for(node.shape, node.index, "softmax");
                const auto& y = node.saved_out;
                std::vector<double> ga(nl);
                for (std::size_t l = 0; l < lanes.count; ++l) {
                    const std::size_t base = l * lanes.lane_step;
                    double s = 0.0;
                    for (std::size_t t = 0; t < lanes.length; ++t) {
                        const std::size_t i = base + t * lanes.stride;
                        s += node.kind == OpKind::softmax ? g[i] * y[i] : g[i];
                    }
                    for (std::size_t t = 0; t < lanes.length; ++t) {
                        const std::size_t i = base + t * lanes.stride;
                        ga[i] = node.kind == OpKind::softmax ? y[i] * (g[i] - s)
                                                             : g[i] - std::exp(y[i]) * s;
                    }
                }
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
            case OpKind::diagonal: {
                const std::size_t n = node.lhs_shape[0];
                std::vector<double> ga(nl, 0.0);
                for (std::size_t i = 0; i < n; ++i) ga[i * n + i] = g[i];
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
            case OpKind::element: {
                std::vector<double> ga(nl, 0.0);
                ga[node.index] = g[0];
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
            case OpKind::slice_rows: {
                const std::size_t n = node.lhs_shape[1];
                std::vector<double> ga(nl, 0.0);
                std::copy(g.begin(), g.end(), ga.begin() + static_cast<std::ptrdiff_t>(node.index * n));
                accumulate(grads, node.lhs, nl, ga);
                break;
            }
        }
    }
    return result;
}

// ---------------------------------------------------------------------------

DiffArray finite_difference(const ScalarFunction& f, const DiffArray& x, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_difference: step must be positive");
    std::vector<double> probe(x.data());
    std::vector<double> grad(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double orig = probe[k];
        try {
            probe[k] = orig + h;
            const double up = f(DiffArray(x.shape(), probe));
            probe[k] = orig - h;
            const double down = f(DiffArray(x.shape(), probe));
            grad[k] = (up - down) / (2.0 * h);
        } catch (const std::exception& e) {
            throw std::runtime_error("finite_difference: evaluation failed at coordinate " +
                                     std::to_string(k) + ": " + e.what());
        }
        probe[k] = orig;
    }
    return DiffArray(x.shape(), std::move(grad));
}

}  // namespace tva
