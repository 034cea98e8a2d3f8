#include <gtest/gtest.h>

#include "oracles.hpp"
#include "slvit/branches.hpp"
#include "slvit/grad_check.hpp"
#include "slvit/loss.hpp"

using namespace slvit;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Shape shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
    const std::size_t n = numel(shape);
    return T64(std::move(shape), oracle::random_vec(n, gen, lo, hi));
}

BranchConfig slvit_config(FeatureShape in, std::size_t patch, std::size_t d, std::size_t h,
                          std::size_t hidden = 16, std::size_t out = 3) {
    BranchConfig c;
    c.location = "tap";
    c.kind = BranchKind::slvit;
    c.input = in;
    c.out_dim = out;
    c.slvit.patch = patch;
    c.slvit.encoder = EncoderConfig::full_width(d, h);
    c.head.hidden = hidden;
    return c;
}

BranchConfig cnn_config(FeatureShape in, std::size_t filters, std::size_t pool = 2, std::size_t hidden = 16,
                        std::size_t out = 3) {
    BranchConfig c;
    c.location = "tap";
    c.kind = BranchKind::cnn;
    c.input = in;
    c.out_dim = out;
    c.cnn.filters = filters;
    c.cnn.pool = pool;
    c.head.hidden = hidden;
    return c;
}

void randomize(ParamSet<double>& ps, std::mt19937_64& gen, double scale = 0.5) {
    for (auto& [path, e] : ps.entries()) {
        for (auto& v : e.value.data()) v = oracle::random_vec(1, gen, -scale, scale)[0];
    }
}

// Sum of element counts, walking the parameter set one tensor at a time.
std::uint64_t enumerate_params(const ParamSet<double>& ps) {
    std::uint64_t n = 0;
    for (const auto& [path, e] : ps.entries()) {
        if (e.buffer) continue;
        std::uint64_t k = 1;
        for (std::size_t d : e.value.shape()) k *= d;
        n += k;
    }
    return n;
}

}  // namespace

TEST(PatchEmbed, TokenCounts) {
    std::mt19937_64 gen(1);
    struct Case {
        std::size_t h, w, p, n;
    };
    for (const Case c : {Case{28, 28, 4, 49}, Case{72, 128, 8, 144}, Case{6, 6, 6, 1}}) {
        const BranchConfig cfg = slvit_config({1, c.h, c.w, 0}, c.p, 4, 1);
        EXPECT_EQ(cfg.tokens(), c.n);
        Branch<double> br(cfg, 1);
        const T64 tokens = patchify_embed(random_tensor({1, 1, c.h, c.w}, gen), c.p, br.params());
        EXPECT_EQ(tokens.shape(), (Shape{1, c.n, 4}));
    }
    EXPECT_EQ(slvit_config({1, 72, 128, 0}, 8, 4, 1).grid_h(), 9u);
    EXPECT_EQ(slvit_config({1, 72, 128, 0}, 8, 4, 1).grid_w(), 16u);
}

TEST(PatchEmbed, RowMajorGridChannelMajorPatch) {
    // C=2, 4x4, P=2: element (c, y, x) carries value 100c + 10y + x.
    T64 x({1, 2, 4, 4});
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t xx = 0; xx < 4; ++xx) x[(c * 4 + y) * 4 + xx] = 100.0 * c + 10.0 * y + xx;
    const T64 p = patchify(x, 2);
    ASSERT_EQ(p.shape(), (Shape{1, 4, 8}));
    // Patch 1 is the top-right block, patch 2 bottom-left.
    const std::vector<double> patch1{2, 3, 12, 13, 102, 103, 112, 113};
    const std::vector<double> patch2{20, 21, 30, 31, 120, 121, 130, 131};
    for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_EQ(p[8 + i], patch1[i]);
        EXPECT_EQ(p[16 + i], patch2[i]);
    }
}

TEST(PatchEmbed, NonDivisibleRejected) {
    EXPECT_THROW(slvit_config({1, 10, 10, 0}, 4, 4, 1).validate(), ShapeError);
    EXPECT_THROW(patchify(T64({1, 1, 10, 10}), 4), ShapeError);
}

TEST(PatchEmbed, HeuristicCandidatesProperty) {
    for (std::size_t h = 1; h <= 160; h += 3) {
        for (std::size_t w = 1; w <= 160; w += 7) {
            for (std::size_t p : patch_size_candidates(h, w)) {
                ASSERT_EQ(h % p, 0u);
                ASSERT_EQ(w % p, 0u);
                ASSERT_GE(static_cast<double>(p), std::floor(std::sqrt(double(std::min(h, w)))) - 2);
                ASSERT_LE(static_cast<double>(p), std::ceil(std::sqrt(double(std::max(h, w)))) + 2);
            }
        }
    }
    const auto c28 = patch_size_candidates(28, 28);
    EXPECT_NE(std::find(c28.begin(), c28.end(), 4u), c28.end());
}

TEST(SlvitBranch, OutputShapesAndHeadWidth) {
    std::mt19937_64 gen(2);
    Rng rng(0);
    BranchConfig cls = slvit_config({4, 8, 8, 0}, 4, 8, 2, 16, 10);
    Branch<double> a(cls, 1);
    EXPECT_EQ(a.forward({random_tensor({3, 4, 8, 8}, gen), std::nullopt}, false, rng).shape(), (Shape{3, 10}));
    BranchConfig reg = cls;
    reg.out_kind = OutKind::scalar_count;
    reg.out_dim = 1;
    Branch<double> b(reg, 1);
    EXPECT_EQ(b.forward({random_tensor({2, 4, 8, 8}, gen), std::nullopt}, false, rng).shape(), (Shape{2, 1}));
    // No class token: the head sees exactly n * d values.
    EXPECT_EQ(a.params().at("head.fc1.w").dim(0), cls.tokens() * 8);
    EXPECT_EQ(slvit_config({128, 28, 28, 0}, 4, 32, 12).head_input(), 1568u);
}

TEST(SlvitBranch, ToyConfigParamCount) {
    BranchConfig toy = slvit_config({8, 8, 8, 0}, 4, 16, 2, 32, 10);
    EXPECT_EQ(count_params(toy), 7834u);
    Branch<double> br(toy, 3);
    EXPECT_EQ(br.params().count(), 7834u);
    EXPECT_EQ(enumerate_params(br.params()), 7834u);
}

TEST(SlvitBranch, ClosedFormMatchesEnumerationOnGrid) {
    for (std::size_t p : {4, 5, 8}) {
        for (std::size_t d : {16, 32, 36}) {
            for (std::size_t h : {2, 4, 8, 12, 16, 24}) {
                const BranchConfig c = slvit_config({3, 40, 40, 0}, p, d, h, 32, 10);
                Branch<float> br(c, 1);
                ParamSet<double> shapes;
                for (const auto& [path, e] : br.params().entries()) shapes.add(path, T64(e.value.shape()));
                ASSERT_EQ(count_params(c), enumerate_params(shapes)) << p << " " << d << " " << h;
            }
        }
    }
}

TEST(SlvitBranch, InferenceIsDeterministic) {
    std::mt19937_64 gen(3);
    Branch<double> br(slvit_config({2, 4, 4, 0}, 2, 4, 2), 5);
    const TapFeatures<double> in{random_tensor({2, 2, 4, 4}, gen), std::nullopt};
    Rng r1(1), r2(2);
    const T64 y1 = br.forward(in, false, r1), y2 = br.forward(in, false, r2);
    for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_EQ(y1[i], y2[i]);
}

TEST(SlvitBranch, GradientCheck) {
    std::mt19937_64 gen(4);
    Branch<double> br(slvit_config({2, 4, 4, 0}, 2, 4, 2, 8, 3), 7);
    randomize(br.params(), gen);
    const TapFeatures<double> in{random_tensor({3, 2, 4, 4}, gen), std::nullopt};
    const std::vector<int> labels{0, 2, 1};
    Rng rng(0);
    const double err = grad_check_params(
        [&] { return cross_entropy_loss(br.forward(in, false, rng), labels); }, br.params());
    EXPECT_LT(err, 1e-4);
}

TEST(CnnBranch, HeadWidthArithmetic) {
    EXPECT_EQ(cnn_config({8, 28, 28, 0}, 32, 2).head_input(), 6272u);
    EXPECT_EQ(cnn_config({8, 28, 28, 0}, 32, 4).head_input(), 32u * 7 * 7);
}

TEST(CnnBranch, ZeroConvLeavesHeadBiasPath) {
    std::mt19937_64 gen(5);
    Branch<double> br(cnn_config({2, 4, 4, 0}, 3), 1);
    randomize(br.params(), gen);
    for (auto& v : br.params().at("conv.w").data()) v = 0;
    for (auto& v : br.params().at("conv.b").data()) v = 0;
    Rng rng(0);
    const T64 y = br.forward({random_tensor({2, 2, 4, 4}, gen), std::nullopt}, false, rng);
    auto& p = br.params();
    const auto hidden = p.at("head.fc1.b").storage();
    oracle::Vec act(hidden.size());
    for (std::size_t i = 0; i < act.size(); ++i) act[i] = std::max(0.0, hidden[i]);
    const auto expected = oracle::affine(act, p.at("head.fc2.w").storage(), p.at("head.fc2.b").storage(), 1,
                                         act.size(), 3);
    for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(y[s * 3 + k], expected[k], 1e-14);
}

TEST(CnnBranch, MatchesLoopComposition) {
    std::mt19937_64 gen(6);
    Branch<double> br(cnn_config({2, 4, 4, 0}, 3, 2, 5, 2), 2);
    randomize(br.params(), gen);
    const T64 x = random_tensor({1, 2, 4, 4}, gen);
    Rng rng(0);
    const T64 y = br.forward({x, std::nullopt}, false, rng);
    auto& p = br.params();
    std::size_t ho, wo;
    auto conv = oracle::conv2d(x.storage(), p.at("conv.w").storage(), p.at("conv.b").storage(), 1, 2, 4, 4, 3, 3,
                               1, 1, ho, wo);
    for (auto& v : conv) v = std::max(0.0, v);
    const auto pooled = oracle::maxpool(conv, 3, 4, 4, 2);
    auto hid = oracle::affine(pooled, p.at("head.fc1.w").storage(), p.at("head.fc1.b").storage(), 1, 12, 5);
    for (auto& v : hid) v = std::max(0.0, v);
    const auto out = oracle::affine(hid, p.at("head.fc2.w").storage(), p.at("head.fc2.b").storage(), 1, 5, 2);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(y[i], out[i], 1e-12);
}

TEST(CnnBranch, GradientCheck) {
    std::mt19937_64 gen(7);
    Branch<double> br(cnn_config({2, 4, 4, 0}, 3, 2, 6, 3), 3);
    randomize(br.params(), gen);
    const TapFeatures<double> in{random_tensor({2, 2, 4, 4}, gen), std::nullopt};
    const std::vector<int> labels{2, 0};
    Rng rng(0);
    EXPECT_LT(grad_check_params([&] { return cross_entropy_loss(br.forward(in, false, rng), labels); },
                                br.params()),
              1e-4);
}

TEST(CnnBranch, FilmVariantGradientCheck) {
    std::mt19937_64 gen(8);
    BranchConfig cfg = cnn_config({2, 4, 4, 3}, 3, 2, 6, 1);
    cfg.out_kind = OutKind::scalar_count;
    cfg.cnn.film = true;
    Branch<double> br(cfg, 4);
    randomize(br.params(), gen);
    const TapFeatures<double> in{random_tensor({2, 2, 4, 4}, gen), random_tensor({2, 3}, gen)};
    const T64 target = T64::from({2, 1}, {3, 7});
    Rng rng(0);
    EXPECT_LT(grad_check_params([&] { return mae_loss(br.forward(in, false, rng), target); }, br.params()), 1e-4);
    EXPECT_EQ(count_params(cfg), br.params().count());
}

TEST(CnnBranch, TapShapeChecked) {
    Branch<double> br(cnn_config({2, 4, 4, 0}, 3), 1);
    Rng rng(0);
    EXPECT_THROW(br.forward({T64({1, 3, 4, 4}), std::nullopt}, false, rng), ShapeError);
}

TEST(Heads, SameStructureAcrossKinds) {
    const FeatureShape in{4, 8, 8, 0};
    Branch<double> cnn(cnn_config(in, 8, 2, 16, 10), 1);
    Branch<double> vit(slvit_config(in, 4, 8, 2, 16, 10), 1);
    EXPECT_EQ(cnn.config().head, vit.config().head);
    EXPECT_EQ(cnn.params().at("head.fc2.w").shape(), vit.params().at("head.fc2.w").shape());
    EXPECT_EQ(cnn.params().at("head.fc1.w").dim(1), vit.params().at("head.fc1.w").dim(1));
}

TEST(Budget, Validation) {
    const FeatureShape in{32, 8, 8, 0};
    const BranchConfig cnn = cnn_config(in, 32, 2, 128, 10);
    EXPECT_TRUE(budget_validate(cnn, cnn).feasible);  // equality allowed
    const BranchConfig small = slvit_config(in, 4, 16, 2, 128, 10);
    const BudgetReport ok = budget_validate(small, cnn);
    EXPECT_TRUE(ok.feasible);
    EXPECT_LT(ok.slvit_params, ok.cnn_params);
    BranchConfig big = slvit_config(in, 4, 36, 2, 128, 10);
    big.slvit.encoder = EncoderConfig::full_width(256, 8);
    EXPECT_FALSE(budget_validate(big, cnn).feasible);
    BranchConfig elsewhere = small;
    elsewhere.location = "other";
    EXPECT_THROW(budget_validate(elsewhere, cnn), std::invalid_argument);
}

TEST(Budget, GridSearchReturnsOnlyFeasible) {
    const FeatureShape in{32, 8, 8, 0};
    const BranchConfig cnn = cnn_config(in, 32, 2, 128, 10);
    const auto found = budget_grid_search(slvit_config(in, 4, 16, 2, 128, 10), cnn);
    ASSERT_FALSE(found.empty());
    for (const auto& c : found) {
        EXPECT_TRUE(c.budget.feasible);
        EXPECT_LE(c.budget.slvit_params, c.budget.cnn_params);
        EXPECT_EQ(c.budget.slvit_params, count_params(c.config));
        EXPECT_EQ(c.config.slvit.patch, 4u);
    }
}
