#pragma once

// Copycat fine-tuning: label out-of-domain inputs with the frozen network's
// own predictions, blend them with real data, and keep training a branch.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvit/runtime.hpp"

namespace slvit {

// Labels every input by the argmax of the frozen backbone's final logits
// (lowest index on ties). Pure function of weights and inputs.
template <typename T>
Dataset<T> generate_fake(Backbone<T>& backbone, const ModelInput<T>& source, const std::string& source_tag,
                         std::size_t batch = kEvalBatch) {
    if (!backbone.frozen()) throw UnfrozenBackboneError("generate_fake: backbone must be frozen first");
    if (backbone.out_kind() != OutKind::class_logits) {
        throw std::invalid_argument("generate_fake: copycat labels need a classification backbone");
    }
    NoGradGuard guard;
    Rng unused(0);
    Dataset<T> fake;
    fake.inputs = source;
    fake.provenance = "copycat:" + source_tag;
    const std::size_t n = source.batch();
    fake.labels.reserve(n);
    for (std::size_t start = 0; start < n; start += batch) {
        std::vector<std::size_t> rows;
        for (std::size_t i = start; i < std::min(n, start + batch); ++i) rows.push_back(i);
        const Tensor<T> y = backbone.forward(gather(source, rows), false, unused).output;
        for (std::size_t r = 0; r < rows.size(); ++r) fake.labels.push_back(argmax_row(y, r));
    }
    return fake;
}

struct MixSpec {
    std::uint64_t fake = 2;
    std::uint64_t real = 1;
    std::uint64_t seed = 0;
};

struct MixCounts {
    std::size_t fake = 0;
    std::size_t real = 0;
};

// Largest whole number of ratio units both pools can supply. Normally the
// real pool is used entirely and the fake one is the constraint.
inline MixCounts mix_counts(std::size_t real_available, std::size_t fake_available, const MixSpec& spec) {
    if (spec.real == 0) throw std::invalid_argument("mix: real part of the ratio must be positive");
    std::size_t units = real_available / spec.real;
    if (spec.fake > 0) units = std::min<std::size_t>(units, fake_available / spec.fake);
    return {units * spec.fake, units * spec.real};
}

// Takes the leading real and fake samples satisfying the ratio and shuffles
// the union with spec.seed. A zero fake share returns the real set as is.
template <typename T>
Dataset<T> mix_datasets(const Dataset<T>& real, const Dataset<T>& fake, const MixSpec& spec) {
    real.validate();
    if (!real.is_classification()) throw std::invalid_argument("mix: copycat mixing is for classification");
    if (spec.fake == 0) {
        if (spec.real == 0) throw std::invalid_argument("mix: real part of the ratio must be positive");
        return real;
    }
    fake.validate();
    const Shape& rs = real.inputs.image.shape();
    const Shape& fs = fake.inputs.image.shape();
    if (!std::equal(rs.begin() + 1, rs.end(), fs.begin() + 1, fs.end())) {
        throw ShapeError("mix: real and fake inputs differ in shape");
    }
    const MixCounts c = mix_counts(real.size(), fake.size(), spec);
    std::vector<std::size_t> rr(c.real), fr(c.fake);
    for (std::size_t i = 0; i < c.real; ++i) rr[i] = i;
    for (std::size_t i = 0; i < c.fake; ++i) fr[i] = i;
    Dataset<T> joined = concat_datasets(subset(real, rr), subset(fake, fr));
    Rng rng(spec.seed);
    const std::vector<std::size_t> order = rng.permutation(joined.size());
    Dataset<T> out = subset(joined, order);
    out.provenance = "mix(" + std::to_string(spec.fake) + ":" + std::to_string(spec.real) + "," + real.provenance +
                     "," + fake.provenance + ")";
    return out;
}

template <typename T>
struct CopycatResult {
    Branch<T> branch;  // the fine-tuned copy; the model's branch is left alone
    double pre_metric = 0;
    double post_metric = 0;
    TrainHistory history;
};

// Fine-tunes a copy of an already trained transformer branch on the mixed set.
template <typename T>
CopycatResult<T> finetune_copycat(MultiExitModel<T>& model, std::size_t branch_index, const Dataset<T>& combined,
                                  const Dataset<T>& val, const TrainRecipe& recipe, std::uint64_t seed) {
    if (!model.backbone().frozen()) throw UnfrozenBackboneError("finetune_copycat: backbone must be frozen first");
    Branch<T>& original = model.branch(branch_index);
    if (!original.config().is_transformer()) {
        throw std::invalid_argument("finetune_copycat: only SL-ViT branches are fine-tuned this way");
    }
    if (!original.trained()) {
        throw std::logic_error("finetune_copycat: branch " + std::to_string(branch_index) +
                               " is untrained; copycat only fine-tunes");
    }
    const std::size_t tap = model.tap_of(branch_index);
    const auto tr = compute_taps(model.backbone(), combined.inputs);
    const auto va = compute_taps(model.backbone(), val.inputs);
    const LabeledTaps<T> val_taps = labeled_taps(va, tap, val);
    CopycatResult<T> res{Branch<T>(original.config(), original.params().clone(), true), 0, 0, {}};
    res.pre_metric = evaluate_branch(original, val_taps).metric;
    res.history = train_branch(res.branch, labeled_taps(tr, tap, combined), val_taps, recipe, seed);
    res.post_metric = evaluate_branch(res.branch, val_taps).metric;
    return res;
}

}  // namespace slvit
