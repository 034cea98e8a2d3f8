#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "slvit/grad_check.hpp"
#include "slvit/loss.hpp"
#include "slvit/ops.hpp"
#include "slvit/optim.hpp"

using namespace slvit;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Shape shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
    const std::size_t n = numel(shape);
    return T64(std::move(shape), oracle::random_vec(n, gen, lo, hi));
}

double max_abs_diff(std::span<const double> a, const oracle::Vec& b) {
    EXPECT_EQ(a.size(), b.size());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST(Affine, IdentityWeights) {
    const T64 x = T64::from({1, 2}, {1, 2});
    const T64 w = T64::from({2, 2}, {1, 0, 0, 1});
    const T64 b = T64::from({2}, {0, 0});
    const T64 y = affine(x, w, b);
    EXPECT_EQ(y.shape(), (Shape{1, 2}));
    EXPECT_EQ(y[0], 1.0);
    EXPECT_EQ(y[1], 2.0);
}

TEST(Affine, HandSum) {
    const T64 y = affine(T64::from({1, 2}, {1, 1}), T64::from({2, 1}, {2, 3}), T64::from({1}, {1}));
    EXPECT_EQ(y.item(), 6.0);
}

TEST(Affine, MatchesTripleLoop) {
    std::mt19937_64 gen(1);
    const T64 x = random_tensor({3, 4}, gen), w = random_tensor({4, 2}, gen), b = random_tensor({2}, gen);
    const auto expected = oracle::affine(x.storage(), w.storage(), b.storage(), 3, 4, 2);
    EXPECT_LT(max_abs_diff(affine(x, w, b).data(), expected), 1e-10);
}

TEST(Affine, ShapeMismatchIsDescriptive) {
    try {
        affine(T64({2, 3}), T64({4, 2}), T64({2}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
    }
}

TEST(Conv2d, OnesValid) {
    const T64 y = conv2d(T64({1, 1, 3, 3}, 1.0), T64({1, 1, 3, 3}, 1.0), std::optional<T64>(T64({1})),
                         Padding::valid);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(y.item(), 9.0);
}

TEST(Conv2d, ImpulseResponseIsFlippedFilter) {
    std::mt19937_64 gen(2);
    T64 x({1, 1, 5, 5});
    x[2 * 5 + 2] = 1.0;
    const T64 w = random_tensor({1, 1, 3, 3}, gen);
    const T64 y = conv2d(x, w, std::nullopt, Padding::same);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c)
            EXPECT_DOUBLE_EQ(y[(1 + r) * 5 + 1 + c], w[(2 - r) * 3 + (2 - c)]);
    EXPECT_EQ(y[0], 0.0);
}

TEST(Conv2d, MatchesNestedLoops) {
    std::mt19937_64 gen(3);
    const T64 x = random_tensor({2, 3, 8, 8}, gen);
    const T64 w = random_tensor({4, 3, 3, 3}, gen);
    const T64 b = random_tensor({4}, gen);
    struct Case {
        Padding pad;
        std::size_t dil, pad_px;
    };
    for (const Case c : {Case{Padding::same, 1, 1}, Case{Padding::valid, 1, 0}, Case{Padding::same, 2, 2}}) {
        std::size_t ho, wo;
        const auto expected =
            oracle::conv2d(x.storage(), w.storage(), b.storage(), 2, 3, 8, 8, 4, 3, c.pad_px, c.dil, ho, wo);
        const T64 y = conv2d(x, w, std::optional<T64>(b), c.pad, c.dil);
        EXPECT_EQ(y.shape(), (Shape{2, 4, ho, wo}));
        EXPECT_LT(max_abs_diff(y.data(), expected), 1e-10);
    }
}

TEST(Conv2d, Errors) {
    EXPECT_THROW(conv2d(T64({1, 2, 4, 4}), T64({1, 3, 3, 3}), std::nullopt, Padding::same), ShapeError);
    EXPECT_THROW(conv2d(T64({1, 1, 4, 4}), T64({1, 1, 2, 2}), std::nullopt, Padding::same), ShapeError);
    EXPECT_THROW(conv2d(T64({1, 1, 2, 2}), T64({1, 1, 3, 3}), std::nullopt, Padding::valid), ShapeError);
}

TEST(MaxPool, Basic) {
    EXPECT_EQ(maxpool2d(T64::from({1, 1, 2, 2}, {1, 2, 3, 4}), 2).item(), 4.0);
}

TEST(MaxPool, TiesRouteToLowestIndex) {
    T64 x({1, 1, 4, 4}, 7.0);
    x.set_requires_grad();
    const T64 y = maxpool2d(x, 2);
    for (double v : y.data()) EXPECT_EQ(v, 7.0);
    sum(y).backward();
    const std::vector<double> expected{1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(x.grad()[i], expected[i]) << i;
}

TEST(MaxPool, MatchesWindowScan) {
    std::mt19937_64 gen(4);
    const T64 x = random_tensor({2, 2, 8, 8}, gen);
    EXPECT_LT(max_abs_diff(maxpool2d(x, 2).data(), oracle::maxpool(x.storage(), 4, 8, 8, 2)), 1e-10);
    EXPECT_LT(max_abs_diff(maxpool2d(x, 4).data(), oracle::maxpool(x.storage(), 4, 8, 8, 4)), 1e-10);
}

TEST(MaxPool, RequiresDivisibility) { EXPECT_THROW(maxpool2d(T64({1, 1, 5, 4}), 2), ShapeError); }

TEST(LayerNorm, ConstantVectorGivesZero) {
    const T64 y = layer_norm(T64({2, 4}, 3.0), T64({4}, 1.0), T64({4}));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoPointSymmetry) {
    const T64 y = layer_norm(T64::from({1, 2}, {1, 3}), T64({2}, 1.0), T64({2}));
    EXPECT_NEAR(y[0], -1.0, 1e-4);
    EXPECT_NEAR(y[1], 1.0, 1e-4);
}

TEST(LayerNorm, MatchesDirectFormula) {
    std::mt19937_64 gen(5);
    const T64 x = random_tensor({3, 5, 6}, gen, -3, 3);
    const T64 g = random_tensor({6}, gen), b = random_tensor({6}, gen);
    EXPECT_LT(max_abs_diff(layer_norm(x, g, b).data(), oracle::layer_norm(x.storage(), g.storage(), b.storage(), 6)),
              1e-10);
}

TEST(Softmax, Examples) {
    const T64 a = softmax(T64::from({2}, {0, 0}), 0);
    EXPECT_DOUBLE_EQ(a[0], 0.5);
    const T64 b = softmax(T64::from({2}, {1, 2}), 0);
    const double e1 = std::exp(1.0), e2 = std::exp(2.0);
    EXPECT_NEAR(b[0], e1 / (e1 + e2), 1e-12);
    EXPECT_NEAR(b[0], 0.26894, 1e-5);
    EXPECT_NEAR(b[1], 0.73106, 1e-5);
    const T64 c = softmax(T64::from({2}, {1000, 0}), 0);
    EXPECT_TRUE(std::isfinite(c[0]));
    EXPECT_NEAR(c[0], 1.0, 1e-12);
    EXPECT_NEAR(c[1], 0.0, 1e-12);
}

TEST(Softmax, SlicesSumToOneProperty) {
    std::mt19937_64 gen(6);
    std::uniform_int_distribution<std::size_t> dim(1, 6), rank(1, 4);
    for (int trial = 0; trial < 200; ++trial) {
        Shape shape(rank(gen));
        for (auto& d : shape) d = dim(gen);
        const std::size_t axis = std::uniform_int_distribution<std::size_t>(0, shape.size() - 1)(gen);
        const T64 y = softmax(random_tensor(shape, gen, -20, 20), axis);
        std::size_t inner = 1;
        for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
        const std::size_t len = shape[axis], outer = y.size() / (len * inner);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                double s = 0;
                for (std::size_t j = 0; j < len; ++j) {
                    const double v = y[(o * len + j) * inner + in];
                    EXPECT_GT(v, 0.0);
                    s += v;
                }
                ASSERT_NEAR(s, 1.0, 1e-6);
            }
    }
}

TEST(Dropout, InferenceAndZeroRateAreIdentity) {
    std::mt19937_64 gen(7);
    Rng rng(1);
    const T64 x = random_tensor({64}, gen);
    const T64 a = dropout(x, 0.5, false, rng);
    const T64 b = dropout(x, 0.0, true, rng);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_EQ(a[i], x[i]);
        EXPECT_EQ(b[i], x[i]);
    }
}

TEST(Dropout, SurvivorFractionAndScaling) {
    Rng rng(2);
    const T64 y = dropout(T64({100000}, 1.0), 0.5, true, rng);
    std::size_t kept = 0;
    for (double v : y.data()) {
        if (v != 0.0) {
            ++kept;
            EXPECT_DOUBLE_EQ(v, 2.0);
        }
    }
    EXPECT_NEAR(static_cast<double>(kept) / 1e5, 0.5, 0.01);
}

TEST(Dropout, SeedReproducibleAndRateChecked) {
    Rng a(9), b(9);
    const T64 x({1000}, 1.0);
    const T64 ya = dropout(x, 0.3, true, a), yb = dropout(x, 0.3, true, b);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(ya[i], yb[i]);
    EXPECT_THROW(dropout(x, 1.0, true, a), std::invalid_argument);
    EXPECT_THROW(dropout(x, -0.1, true, a), std::invalid_argument);
}

TEST(CrossEntropy, Examples) {
    const std::vector<int> labels{3, 7};
    EXPECT_NEAR(cross_entropy_loss(T64({2, 10}), labels).item(), std::log(10.0), 1e-12);
    T64 confident({1, 10});
    confident[4] = 1000;
    const std::vector<int> four{4};
    EXPECT_NEAR(cross_entropy_loss(confident, four).item(), 0.0, 1e-12);
    EXPECT_THROW(cross_entropy_loss(T64({1, 10}), std::vector<int>{10}), std::out_of_range);
}

TEST(CrossEntropy, MatchesDirectFormula) {
    std::mt19937_64 gen(8);
    const T64 logits = random_tensor({5, 4}, gen, -3, 3);
    const std::vector<int> labels{0, 3, 2, 1, 3};
    const auto p = oracle::softmax_rows(logits.storage(), 4);
    double expected = 0;
    for (std::size_t s = 0; s < 5; ++s) expected -= std::log(p[s * 4 + labels[s]]) / 5;
    EXPECT_NEAR(cross_entropy_loss(logits, labels).item(), expected, 1e-12);
}

TEST(Mae, Examples) {
    const T64 p = T64::from({2}, {1, 3});
    EXPECT_EQ(mae_loss(p, p.clone()).item(), 0.0);
    EXPECT_EQ(mae_loss(p, T64::from({2}, {2, 2})).item(), 1.0);
    std::mt19937_64 gen(9);
    const T64 a = random_tensor({17}, gen), b = random_tensor({17}, gen);
    double expected = 0;
    for (std::size_t i = 0; i < 17; ++i) expected += std::abs(a[i] - b[i]) / 17;
    EXPECT_NEAR(mae_loss(a, b).item(), expected, 1e-14);
}

TEST(Mae, SubgradientZeroAtEquality) {
    T64 p = T64::from({3}, {1, 2, 3});
    p.set_requires_grad();
    mae_loss(p, T64::from({3}, {1, 0, 5})).backward();
    EXPECT_EQ(p.grad()[0], 0.0);
    EXPECT_DOUBLE_EQ(p.grad()[1], 1.0 / 3);
    EXPECT_DOUBLE_EQ(p.grad()[2], -1.0 / 3);
}

TEST(Adam, ZeroGradientLeavesParameters) {
    ParamSet<double> ps;
    T64& w = ps.add("w", T64::from({3}, {1, -2, 3}));
    w.mutable_grad();
    OptimizerState<double> st;
    adam_step(ps, st);
    EXPECT_EQ(w[0], 1.0);
    EXPECT_EQ(w[1], -2.0);
    EXPECT_EQ(st.step_count, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ParamSet<double> ps;
    T64& w = ps.add("w", T64::scalar(0.5));
    w.mutable_grad()[0] = 1.0;
    OptimizerState<double> st;
    st.learning_rate = 1e-3;
    adam_step(ps, st);
    // m_hat = v_hat = 1, so the step is lr / (1 + eps).
    EXPECT_NEAR(0.5 - w[0], 1e-3 / (1 + st.epsilon), 1e-15);
}

TEST(Adam, FrozenEntryIsBitExact) {
    ParamSet<double> ps;
    T64& a = ps.add("a", T64::from({2}, {0.1, 0.2}), false);
    T64& b = ps.add("b", T64::from({2}, {0.3, 0.4}));
    a.mutable_grad()[0] = 5.0;
    b.mutable_grad()[0] = 5.0;
    OptimizerState<double> st;
    for (int i = 0; i < 10; ++i) adam_step(ps, st);
    EXPECT_EQ(a[0], 0.1);
    EXPECT_EQ(a[1], 0.2);
    EXPECT_NE(b[0], 0.3);
}

TEST(Adam, MissingGradientThrows) {
    ParamSet<double> ps;
    ps.add("w", T64({2}));
    OptimizerState<double> st;
    EXPECT_THROW(adam_step(ps, st), MissingGradientError);
}

TEST(Optimizer, PlateauAndStopTracking) {
    OptimizerState<double> st;
    st.learning_rate = 1.0;
    st.plateau = {false, 2};
    st.stop = {false, 5};
    EXPECT_FALSE(st.on_epoch_metric(1.0));
    EXPECT_FALSE(st.on_epoch_metric(1.0));
    EXPECT_TRUE(st.on_epoch_metric(1.0));  // two epochs without improvement
    EXPECT_DOUBLE_EQ(st.learning_rate, 0.6);
    EXPECT_FALSE(st.should_stop());
    st.on_epoch_metric(2.0);
    st.on_epoch_metric(2.0);
    st.on_epoch_metric(2.0);
    EXPECT_TRUE(st.should_stop());
    EXPECT_LT(st.learning_rate, 0.6);
}

TEST(GradCheck, SumOfSquaresAndAffine) {
    std::mt19937_64 gen(10);
    const T64 x = random_tensor({3, 4}, gen);
    EXPECT_LT(grad_check([](const T64& v) { return sum(mul(v, v)); }, x), 1e-7);
    const T64 w = random_tensor({4, 2}, gen), b = random_tensor({2}, gen);
    EXPECT_LT(grad_check([&](const T64& v) { return sum(affine(v, w, b)); }, x), 1e-7);
}

// Every primitive, through a weighted sum so each output element contributes
// a distinct sensitivity.
TEST(GradCheck, EveryPrimitive) {
    std::mt19937_64 gen(11);
    auto check = [&](const char* name, Shape shape, auto fn) {
        const T64 x = random_tensor(shape, gen);
        const T64 probe = fn(x);
        const T64 coef = random_tensor(probe.shape(), gen);
        const double err = grad_check([&](const T64& v) { return sum(mul(fn(v), coef)); }, x);
        EXPECT_LT(err, 1e-4) << name;
    };
    const T64 w = random_tensor({3, 5}, gen), b = random_tensor({5}, gen);
    check("affine.x", {2, 4, 3}, [&](const T64& v) { return affine(v, w, b); });
    const T64 ax = random_tensor({2, 3}, gen);
    check("affine.w", {3, 5}, [&](const T64& v) { return affine(ax, v, b); });
    const T64 cw = random_tensor({4, 2, 3, 3}, gen), cb = random_tensor({4}, gen);
    check("conv.x", {2, 2, 6, 6}, [&](const T64& v) { return conv2d(v, cw, std::optional<T64>(cb), Padding::same); });
    check("conv.dilated", {1, 2, 7, 7}, [&](const T64& v) { return conv2d(v, cw, std::optional<T64>(cb), Padding::same, 2); });
    const T64 cx = random_tensor({2, 2, 6, 6}, gen);
    check("conv.w", {4, 2, 3, 3}, [&](const T64& v) { return conv2d(cx, v, std::nullopt, Padding::valid); });
    check("maxpool", {2, 3, 4, 4}, [](const T64& v) { return maxpool2d(v, 2); });
    const T64 g = random_tensor({6}, gen), be = random_tensor({6}, gen);
    check("layer_norm.x", {3, 6}, [&](const T64& v) { return layer_norm(v, g, be); });
    const T64 lx = random_tensor({3, 6}, gen);
    check("layer_norm.gamma", {6}, [&](const T64& v) { return layer_norm(lx, v, be); });
    check("softmax.axis1", {3, 4, 2}, [](const T64& v) { return softmax(v, 1); });
    check("softmax.last", {3, 5}, [](const T64& v) { return softmax(v, 1); });
    check("gelu", {10}, [](const T64& v) { return gelu(v); });
    check("relu", {10}, [](const T64& v) { return relu(v); });
    check("bmm", {2, 3, 4}, [&](const T64& v) { return bmm(v, v, true); });
    const T64 bb = random_tensor({2, 4, 5}, gen);
    check("bmm.plain", {2, 3, 4}, [&](const T64& v) { return bmm(v, bb); });
    check("patchify", {2, 3, 4, 4}, [](const T64& v) { return patchify(v, 2); });
    check("concat_slice", {2, 3, 4}, [](const T64& v) { return slice_rows(concat_rows(v, v), 1, 4); });
    check("concat_last", {2, 3}, [](const T64& v) { return concat_last(std::vector<T64>{v, scale(v, 2.0)}); });
    check("tile", {2, 3}, [](const T64& v) { return tile_channels(v, 2, 3); });
    check("gap", {2, 3, 4, 4}, [](const T64& v) { return global_avg_pool(v); });
    const T64 pos = random_tensor({3, 4}, gen);
    check("add_broadcast", {2, 3, 4}, [&](const T64& v) { return add_broadcast(v, pos); });
    const T64 gm = random_tensor({3}, gen), bt = random_tensor({3}, gen);
    check("batch_norm.train", {4, 3, 2, 2}, [&](const T64& v) {
        T64 rm({3}), rv({3}, 1.0);
        return batch_norm2d(v, gm, bt, rm, rv, true);
    });
    check("batch_norm.infer", {2, 3, 2, 2}, [&](const T64& v) {
        T64 rm = T64::from({3}, {0.1, -0.2, 0.3}), rv = T64::from({3}, {1.5, 0.5, 2.0});
        return batch_norm2d(v, gm, bt, rm, rv, false);
    });
    const std::vector<int> labels{1, 0, 4};
    EXPECT_LT(grad_check([&](const T64& v) { return cross_entropy_loss(v, labels); }, random_tensor({3, 5}, gen)), 1e-4);
    const T64 target = random_tensor({6}, gen);
    EXPECT_LT(grad_check([&](const T64& v) { return mae_loss(v, target); }, random_tensor({6}, gen)), 1e-4);
    EXPECT_LT(grad_check([&](const T64& v) { return mse_loss(v, target); }, random_tensor({6}, gen)), 1e-4);
}

TEST(Tensor, ConstructionInvariants) {
    EXPECT_THROW(T64({2, 3}, std::vector<double>(5)), ShapeError);
    T64 t({2, 3});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_FALSE(t.has_grad());
    EXPECT_THROW(t.backward(), ShapeError);
    EXPECT_EQ(Tensor<float>::dtype(), DType::f32);
    EXPECT_EQ(T64::dtype(), DType::f64);
}

TEST(Tensor, GradShapesMatchDataAfterBackward) {
    std::mt19937_64 gen(12);
    T64 w = random_tensor({4, 3}, gen);
    T64 b = random_tensor({3}, gen);
    w.set_requires_grad();
    b.set_requires_grad();
    const T64 x = random_tensor({5, 4}, gen);
    sum(relu(affine(x, w, b))).backward();
    ASSERT_TRUE(w.has_grad());
    ASSERT_TRUE(b.has_grad());
    EXPECT_EQ(w.grad().size(), w.size());
    EXPECT_EQ(b.grad().size(), b.size());
}

TEST(Tensor, NoGradGuardSkipsTape) {
    T64 w({2}, 1.0);
    w.set_requires_grad();
    NoGradGuard guard;
    const T64 y = sum(mul(w, w));
    EXPECT_FALSE(y.requires_grad());
}

TEST(Init, SeededInitIsBitIdentical) {
    Rng a(42), b(42);
    const auto x = init_fan_in_uniform<float>({8, 8}, 8, a);
    const auto y = init_fan_in_uniform<float>({8, 8}, 8, b);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], y[i]);
    Rng c(3);
    const auto z = init_truncated_normal<double>({1000}, 0.02, c);
    for (double v : z.data()) EXPECT_LE(std::abs(v), 0.04);
    const double bound = std::sqrt(6.0 / 8);
    for (float v : x.data()) EXPECT_LE(std::abs(v), bound);
}
