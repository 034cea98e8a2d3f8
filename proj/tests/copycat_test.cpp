#include <gtest/gtest.h>

#include "slvit/copycat.hpp"
#include "toy_fixture.hpp"

using namespace slvit;
using namespace slvit::toy;

namespace {

ModelInput<float> noise_inputs(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    ModelInput<float> in;
    in.image = Tensor<float>({n, 3, 16, 16});
    for (std::size_t i = 0; i < in.image.size(); ++i) in.image[i] = static_cast<float>(rng.uniform(-1.0, 2.0));
    return in;
}

// Marks every image so the mix can be audited: first pixel = tag.
Dataset<float> tagged(std::size_t n, float tag) {
    Dataset<float> d;
    d.inputs.image = Tensor<float>({n, 1, 2, 2});
    for (std::size_t s = 0; s < n; ++s) {
        d.inputs.image[s * 4] = tag;
        d.inputs.image[s * 4 + 1] = static_cast<float>(s);
        d.labels.push_back(static_cast<int>(s % 3));
    }
    d.provenance = tag == 0 ? "real" : "fake";
    return d;
}

std::size_t count_tag(const Dataset<float>& d, float tag) {
    std::size_t c = 0;
    for (std::size_t s = 0; s < d.size(); ++s) c += d.inputs.image[s * 4] == tag;
    return c;
}

}  // namespace

TEST(FakeLabels, MatchPerSampleArgmaxOracle) {
    Fixture f;
    const ModelInput<float> src = noise_inputs(100, 9);
    const Dataset<float> fake = generate_fake<float>(*f.bb, src, "noise");
    ASSERT_EQ(fake.labels.size(), 100u);
    Rng rng(0);
    for (std::size_t s = 0; s < 100; ++s) {
        const Tensor<float> y = f.bb->forward(gather(src, std::vector<std::size_t>{s}), false, rng).output;
        int best = 0;
        for (int k = 1; k < 3; ++k)
            if (y[k] > y[best]) best = k;
        EXPECT_EQ(fake.labels[s], best);
        EXPECT_GE(fake.labels[s], 0);
        EXPECT_LT(fake.labels[s], 3);
    }
    EXPECT_EQ(generate_fake<float>(*f.bb, src, "noise").labels, fake.labels);
    EXPECT_EQ(generate_fake<float>(*f.bb, src, "noise", 7).labels, fake.labels);
    EXPECT_EQ(fake.provenance, "copycat:noise");
}

TEST(FakeLabels, NeedFrozenBackbone) {
    ConvBackbone<float> bb(ConvBackboneConfig{3, 16, {4, 6, 8}, 3}, 1);
    EXPECT_THROW(generate_fake<float>(bb, noise_inputs(2, 1), "x"), UnfrozenBackboneError);
}

TEST(Mix, TwoToOne) {
    const auto m = mix_datasets(tagged(300, 0), tagged(1000, 1), MixSpec{2, 1, 4});
    EXPECT_EQ(m.size(), 900u);
    EXPECT_EQ(count_tag(m, 0), 300u);
    EXPECT_EQ(count_tag(m, 1), 600u);
    m.validate();
}

TEST(Mix, ZeroFakeIsRealUnchanged) {
    const auto real = tagged(50, 0);
    const auto m = mix_datasets(real, tagged(10, 1), MixSpec{0, 1, 3});
    EXPECT_TRUE(same_bits(m.inputs.image.data(), real.inputs.image.data()));
    EXPECT_EQ(m.labels, real.labels);
}

TEST(Mix, RatioExactForRandomSizes) {
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        const MixSpec spec{rng.below(6), 1 + rng.below(4), rng.next_u64()};
        const std::size_t nr = 1 + rng.below(80), nf = rng.below(200);
        const auto m = mix_datasets(tagged(nr, 0), tagged(nf, 1), spec);
        const std::size_t r = count_tag(m, 0), fk = count_tag(m, 1);
        EXPECT_EQ(r + fk, m.size());
        EXPECT_EQ(fk * spec.real, r * spec.fake);
        // no room for one more whole unit
        EXPECT_TRUE(r + spec.real > nr || (spec.fake > 0 && fk + spec.fake > nf)) << trial;
        if (spec.fake > 0 && nf >= nr * spec.fake / spec.real + spec.fake) {
            EXPECT_EQ(r, nr / spec.real * spec.real);
        }
    }
}

TEST(Mix, ShuffleIsSeeded) {
    const auto a = mix_datasets(tagged(30, 0), tagged(60, 1), MixSpec{2, 1, 5});
    const auto b = mix_datasets(tagged(30, 0), tagged(60, 1), MixSpec{2, 1, 5});
    const auto c = mix_datasets(tagged(30, 0), tagged(60, 1), MixSpec{2, 1, 6});
    EXPECT_TRUE(same_bits(a.inputs.image.data(), b.inputs.image.data()));
    EXPECT_FALSE(same_bits(a.inputs.image.data(), c.inputs.image.data()));
    EXPECT_THROW(mix_datasets(tagged(3, 0), tagged(3, 1), MixSpec{1, 0, 0}), std::invalid_argument);
}

TEST(Finetune, RecordsBothMetricsAndLeavesModelAlone) {
    Fixture f;
    TrainRecipe r;
    r.lr = 3e-3;
    r.max_epochs = 2;
    const std::size_t vit = 1;
    ASSERT_TRUE(f.model.branch(vit).config().is_transformer());
    EXPECT_THROW(finetune_copycat(f.model, vit, f.train, f.val, r, 1), std::logic_error);
    train_branch_classifierwise(f.model, vit, f.train, f.val, r, 2);
    const auto fake = generate_fake<float>(*f.bb, noise_inputs(120, 3), "noise");
    const auto mixed = mix_datasets(f.train, fake, MixSpec{2, 1, 8});
    const std::uint64_t bb_hash = f.bb->params().hash();
    const std::uint64_t b0 = f.model.branch(0).params().hash(), b1 = f.model.branch(vit).params().hash();
    const double before = evaluate_branch(
        f.model.branch(vit), labeled_taps(compute_taps<float>(*f.bb, f.val.inputs), f.model.tap_of(vit), f.val)).metric;
    const auto res = finetune_copycat(f.model, vit, mixed, f.val, r, 4);
    EXPECT_EQ(f.bb->params().hash(), bb_hash);
    EXPECT_EQ(f.model.branch(0).params().hash(), b0);
    EXPECT_EQ(f.model.branch(vit).params().hash(), b1);
    EXPECT_DOUBLE_EQ(res.pre_metric, before);
    EXPECT_DOUBLE_EQ(res.history.initial_val_metric, before);
    EXPECT_DOUBLE_EQ(res.post_metric, res.history.best_metric);
    EXPECT_GE(res.post_metric, res.pre_metric);  // best-weight restore keeps the starting point
    EXPECT_TRUE(res.branch.trained());
}

TEST(Finetune, RefusesCnnBranch) {
    Fixture f;
    train_branch_classifierwise(f.model, 0, f.train, f.val, TrainRecipe{.max_epochs = 1}, 2);
    EXPECT_THROW(finetune_copycat(f.model, 0, f.train, f.val, TrainRecipe{}, 1), std::invalid_argument);
}
