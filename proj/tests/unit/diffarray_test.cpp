// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "tva/diffarray.hpp"
#include "tva/rng.hpp"
#include "tva_test_support.hpp"

using namespace tva;
using tva::testing::check_gradient;
using tva::testing::gaussian;

namespace {

using UnaryFn = std::function<DiffArray(const DiffArray&)>;

// Contracts a non-scalar output with fixed random weights so the check covers
// the whole Jacobian.
UnaryFn contract(UnaryFn op, std::uint64_t seed) {
    return [op, seed](const DiffArray& x) {
        const DiffArray y = op(x);
        Rng rng(seed);
        return sum(mul(y, gaussian(y.shape(), 1.0, rng)));
    };
}

struct OpCase {
    std::string name;
    // Builds the function under test and its evaluation point for one trial.
    std::function<std::pair<UnaryFn, DiffArray>(Rng&)> make;
};

std::vector<OpCase> op_cases() {
    using tva::testing::between;
    std::vector<OpCase> cases;
    auto matrix = [](Rng& rng) { return Shape{between(1, 16, rng), between(1, 16, rng)}; };
    auto binary = [&](std::string name, DiffArray (*op)(const DiffArray&, const DiffArray&)) {
        cases.push_back({name, [op, matrix](Rng& rng) {
                             const Shape s = matrix(rng);
                             const DiffArray other = gaussian(s, 1.0, rng);
                             return std::pair{contract([op, other](const DiffArray& x) { return op(x, other); },
                                                       rng.next()),
                                              gaussian(s, 1.0, rng)};
                         }});
        cases.push_back({name + "_rhs", [op, matrix](Rng& rng) {
                             const Shape s = matrix(rng);
                             const DiffArray other = gaussian(s, 1.0, rng);
                             return std::pair{contract([op, other](const DiffArray& x) { return op(other, x); },
                                                       rng.next()),
                                              gaussian(s, 1.0, rng)};
                         }});
        cases.push_back({name + "_self", [op, matrix](Rng& rng) {
                             return std::pair{contract([op](const DiffArray& x) { return op(x, x); }, rng.next()),
                                              gaussian(matrix(rng), 1.0, rng)};
                         }});
    };
    binary("add", add);
    binary("sub", sub);
    binary("mul", mul);
    binary("dot", dot);
    binary("cosine_similarity", cosine_similarity);
    binary("row_cosine", row_cosine);

    auto unary = [&](std::string name, UnaryFn op, double lo = 0.0) {
        cases.push_back({name, [op, matrix, lo](Rng& rng) {
                             DiffArray x = gaussian(matrix(rng), 1.0, rng);
                             if (lo > 0.0) x = tva::testing::away_from_ties(DiffArray::zeros(x.shape()), lo, 1.0, rng);
                             return std::pair{contract(op, rng.next()), x};
                         }});
    };
    unary("scale", [](const DiffArray& x) { return scale(x, -2.5); });
    unary("add_scalar", [](const DiffArray& x) { return add_scalar(x, 0.75); });
    unary("transpose", [](const DiffArray& x) { return transpose(x); });
    unary("tanh", [](const DiffArray& x) { return tanh(x); });
    unary("exp", [](const DiffArray& x) { return exp(x); });
    unary("sum", [](const DiffArray& x) { return sum(x); });
    unary("mean", [](const DiffArray& x) { return mean(x); });
    unary("l2_norm", [](const DiffArray& x) { return l2_norm(x); });
    unary("l1_norm", [](const DiffArray& x) { return l1_norm(x); }, 0.05);
    unary("row_normalize", [](const DiffArray& x) { return row_normalize(x); });
    unary("softmax_axis0", [](const DiffArray& x) { return softmax(x, 0); });
    unary("softmax_axis1", [](const DiffArray& x) { return softmax(x, 1); });
    unary("log_softmax_axis0", [](const DiffArray& x) { return log_softmax(x, 0); });
    unary("log_softmax_axis1", [](const DiffArray& x) { return log_softmax(x, 1); });
    unary("element", [](const DiffArray& x) { return element(x, x.size() / 2); });
    unary("reshape", [](const DiffArray& x) { return reshape(x, {x.size()}); });
    unary("slice_rows", [](const DiffArray& x) { return slice_rows(x, x.dim(0) / 2, x.dim(0)); });

    cases.push_back({"log", [matrix](Rng& rng) {
                         return std::pair{contract([](const DiffArray& x) { return log(x); }, rng.next()),
                                          tva::testing::uniform(matrix(rng), 0.2, 3.0, rng)};
                     }});
    cases.push_back({"diagonal", [](Rng& rng) {
                         const std::size_t n = tva::testing::between(1, 16, rng);
                         return std::pair{contract([](const DiffArray& x) { return diagonal(x); }, rng.next()),
                                          gaussian({n, n}, 1.0, rng)};
                     }});
    cases.push_back({"matmul_lhs", [](Rng& rng) {
                         const std::size_t m = tva::testing::between(1, 16, rng), k = tva::testing::between(1, 16, rng),
                                           n = tva::testing::between(1, 16, rng);
                         const DiffArray b = gaussian({k, n}, 1.0, rng);
                         return std::pair{contract([b](const DiffArray& x) { return matmul(x, b); }, rng.next()),
                                          gaussian({m, k}, 1.0, rng)};
                     }});
    cases.push_back({"matmul_rhs", [](Rng& rng) {
                         const std::size_t m = tva::testing::between(1, 16, rng), k = tva::testing::between(1, 16, rng),
                                           n = tva::testing::between(1, 16, rng);
                         const DiffArray a = gaussian({m, k}, 1.0, rng);
                         return std::pair{contract([a](const DiffArray& x) { return matmul(a, x); }, rng.next()),
                                          gaussian({k, n}, 1.0, rng)};
                     }});
    cases.push_back({"matmul_gram", [matrix](Rng& rng) {
                         return std::pair{
                             contract([](const DiffArray& x) { return matmul(x, transpose(x)); }, rng.next()),
                             gaussian(matrix(rng), 1.0, rng)};
                     }});
    cases.push_back({"add_row", [matrix](Rng& rng) {
                         const Shape s = matrix(rng);
                         const DiffArray row = gaussian({s[1]}, 1.0, rng);
                         return std::pair{contract([row](const DiffArray& x) { return add_row(x, row); }, rng.next()),
                                          gaussian(s, 1.0, rng)};
                     }});
    cases.push_back({"add_row_vector", [matrix](Rng& rng) {
                         const Shape s = matrix(rng);
                         const DiffArray m = gaussian(s, 1.0, rng);
                         return std::pair{contract([m](const DiffArray& x) { return add_row(m, x); }, rng.next()),
                                          gaussian({s[1]}, 1.0, rng)};
                     }});
    cases.push_back({"scalar_broadcast", [matrix](Rng& rng) {
                         const DiffArray m = gaussian(matrix(rng), 1.0, rng);
                         return std::pair{contract([m](const DiffArray& x) { return mul(m, x); }, rng.next()),
                                          gaussian({}, 1.0, rng)};
                     }});
    return cases;
}

}  // namespace

TEST(DiffArray, ShapeContract) {
    const DiffArray a({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(a.size(), 6u);
    EXPECT_EQ(a.dim(1), 3u);
    EXPECT_THROW(DiffArray({2, 2}, {1, 2, 3}), ShapeError);
    EXPECT_THROW(a.item(), ShapeError);
}

TEST(DiffArray, ShapeMismatchNamesBothShapes) {
    const DiffArray a = DiffArray::zeros({2, 3});
    const DiffArray b = DiffArray::zeros({3, 2});
    try {
        add(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string what = e.what();
        EXPECT_NE(what.find("[2x3]"), std::string::npos) << what;
        EXPECT_NE(what.find("[3x2]"), std::string::npos) << what;
    }
    EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(DiffArray, LogRejectsNonPositive) {
    EXPECT_THROW(log(DiffArray({3}, {1.0, 0.0, 2.0})), std::domain_error);
    EXPECT_THROW(log(DiffArray({1}, {-1.0})), std::domain_error);
}

TEST(DiffArray, SelfCosineIsOne) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const DiffArray u = gaussian({7}, 1.0 + trial, rng);
        EXPECT_NEAR(cosine_similarity(u, u).item(), 1.0, 1e-15);
    }
}

TEST(DiffArray, SoftmaxOfZerosIsUniform) {
    const DiffArray s = softmax(DiffArray({3}, {0.0, 0.0, 0.0}), 0);
    for (double v : s.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(DiffArray, SoftmaxStableForLargeLogits) {
    const DiffArray s = softmax(DiffArray({1, 3}, {1000.0, 999.0, -1000.0}), 1);
    double total = 0.0;
    for (double v : s.values()) {
        EXPECT_TRUE(std::isfinite(v));
        total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-15);
    EXPECT_NEAR(s[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(DiffArray, LogSoftmaxKeepsTinyOutputsAccurate) {
    const DiffArray y = log_softmax(DiffArray({2}, {40.0, 0.0}), 0);
    EXPECT_DOUBLE_EQ(y[0], -std::log1p(std::exp(-40.0)));
    EXPECT_NE(y[0], 0.0);
    EXPECT_DOUBLE_EQ(y[1], -40.0 - std::log1p(std::exp(-40.0)));
    EXPECT_EQ(log_softmax(DiffArray({1}, {3.0}), 0)[0], 0.0);
}

TEST(DiffArray, L1NormOfExample) { EXPECT_DOUBLE_EQ(l1_norm(DiffArray({3}, {1.0, -2.0, 3.0})).item(), 6.0); }

TEST(DiffArray, CosineFloorKeepsZeroVectorFinite) {
    Tape tape;
    const DiffArray z = tape.leaf(DiffArray::zeros({4}));
    const DiffArray c = cosine_similarity(z, DiffArray({4}, {1, 2, 3, 4}));
    EXPECT_EQ(c.item(), 0.0);
    const DiffArray g = tape.backward(c).wrt(z);
    for (double v : g.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Backward, SumGivesOnes) {
    Tape tape;
    const DiffArray x = tape.leaf({2, 3, 2}, std::vector<double>(12, 0.5));
    const DiffArray g = tape.backward(sum(x)).wrt(x);
    for (double v : g.values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, HalfSquaredNorm) {
    Tape tape;
    const DiffArray x = tape.leaf({2}, {3.0, 4.0});
    const DiffArray g = tape.backward(scale(dot(x, x), 0.5)).wrt(x);
    EXPECT_EQ(g[0], 3.0);
    EXPECT_EQ(g[1], 4.0);
}

TEST(Backward, RejectsNonScalarOutput) {
    Tape tape;
    const DiffArray x = tape.leaf({2}, {1.0, 2.0});
    EXPECT_THROW(tape.backward(tanh(x)), ShapeError);
}

TEST(Backward, RejectsOutputFromOtherTape) {
    Tape a, b;
    const DiffArray x = a.leaf({1}, {1.0});
    EXPECT_THROW(b.backward(sum(x)), std::invalid_argument);
}

TEST(Backward, MixingTapesIsRejected) {
    Tape a, b;
    const DiffArray x = a.leaf({2}, {1.0, 2.0});
    const DiffArray y = b.leaf({2}, {1.0, 2.0});
    EXPECT_ANY_THROW(add(x, y));
}

TEST(Backward, UnusedLeafAndConstantsGetZeros) {
    Tape tape;
    const DiffArray x = tape.leaf({2}, {1.0, 2.0});
    const DiffArray unused = tape.leaf({3}, {1.0, 2.0, 3.0});
    const DiffArray c({2}, {5.0, 6.0});
    const Gradients g = tape.backward(dot(x, c));
    const DiffArray gu = g.wrt(unused), gc = g.wrt(c);
    for (double v : gu.values()) EXPECT_EQ(v, 0.0);
    for (double v : gc.values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(g.wrt(x)[0], 5.0);
}

TEST(Backward, FanOutAccumulates) {
    Rng rng(11);
    const DiffArray x0 = gaussian({3, 4}, 1.0, rng);
    Tape t1, t2;
    const DiffArray x1 = t1.leaf(x0), x2 = t2.leaf(x0);
    const DiffArray once = t1.backward(sum(x1)).wrt(x1);
    const DiffArray twice = t2.backward(add(sum(x2), sum(x2))).wrt(x2);
    for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_EQ(twice[i], 2.0 * once[i]);
}

TEST(Backward, ReplayIsBitIdentical) {
    Rng rng(5);
    Tape tape;
    const DiffArray x = tape.leaf(gaussian({6, 5}, 1.0, rng));
    const DiffArray out = sum(log_softmax(matmul(tanh(x), transpose(x)), 1));
    const DiffArray g1 = tape.backward(out).wrt(x);
    const DiffArray g2 = tape.backward(out).wrt(x);
    EXPECT_EQ(g1.data(), g2.data());
}

TEST(Backward, TapeIsTopologicallyOrdered) {
    Tape tape;
    const DiffArray x = tape.leaf({2}, {1.0, 2.0});
    const DiffArray y = mul(tanh(x), exp(x));
    EXPECT_LT(x.node(), y.node());
    EXPECT_EQ(tape.kind(y.node()), OpKind::mul);
    EXPECT_EQ(tape.kind(x.node()), OpKind::leaf);
}

TEST(FiniteDifference, SumIsOnes) {
    Rng rng(1);
    const DiffArray x = gaussian({4, 3}, 1.0, rng);
    const DiffArray g = finite_difference([](const DiffArray& p) { return sum(p).item(); }, x, 1e-5);
    for (double v : g.values()) EXPECT_NEAR(v, 1.0, 1e-10);
}

TEST(FiniteDifference, NormIsUnitDirection) {
    const DiffArray g =
        finite_difference([](const DiffArray& p) { return l2_norm(p).item(); }, DiffArray({2}, {3.0, 4.0}), 1e-5);
    EXPECT_NEAR(g[0], 0.6, 1e-8);
    EXPECT_NEAR(g[1], 0.8, 1e-8);
}

TEST(FiniteDifference, NamesFailingCoordinate) {
    const DiffArray x({3}, {1.0, 2.0, 1e-6});
    try {
        finite_difference([](const DiffArray& p) { return sum(log(p)).item(); }, x, 1e-5);
        FAIL() << "expected failure";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("2"), std::string::npos) << e.what();
    }
}

TEST(Gradients, EveryOpMatchesFiniteDifferences) {
    const auto cases = op_cases();
    for (std::size_t k = 0; k < cases.size(); ++k) {
        const auto& c = cases[k];
        Rng rng(mix_seed(0xd1ff, k));
        for (int trial = 0; trial < 100; ++trial) {
            const auto [f, x] = c.make(rng);
            const auto r = check_gradient(f, x);
            ASSERT_TRUE(tva::testing::grad_ok(r))
                << c.name << " trial " << trial << " shape " << shape_to_string(x.shape()) << " error " << r.error
                << (r.absolute ? " (absolute)" : " (relative)");
        }
    }
}

TEST(Gradients, ForwardValuesAreDeterministic) {
    Rng a(9), b(9);
    const DiffArray x = gaussian({5, 5}, 1.0, a), y = gaussian({5, 5}, 1.0, b);
    EXPECT_EQ(softmax(matmul(x, x), 1).data(), softmax(matmul(y, y), 1).data());
}
