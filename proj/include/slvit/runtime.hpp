#pragma once

// Multi-exit model, classifier-wise branch training and the exit policies
// (budgeted batch inference, anytime prediction).

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvit/backbone.hpp"
#include "slvit/branches.hpp"
#include "slvit/cost.hpp"
#include "slvit/dataset.hpp"
#include "slvit/loss.hpp"
#include "slvit/optim.hpp"

namespace slvit {

inline constexpr std::size_t kEvalBatch = 128;

// ------------------------------------------------------------------- model

template <typename T>
class MultiExitModel {
   public:
    explicit MultiExitModel(std::shared_ptr<Backbone<T>> backbone) : backbone_(std::move(backbone)) {
        if (!backbone_) throw std::invalid_argument("MultiExitModel: null backbone");
    }

    Backbone<T>& backbone() { return *backbone_; }
    const Backbone<T>& backbone() const { return *backbone_; }
    std::shared_ptr<Backbone<T>> backbone_ptr() const { return backbone_; }

    std::vector<Branch<T>>& branches() { return branches_; }
    const std::vector<Branch<T>>& branches() const { return branches_; }
    Branch<T>& branch(std::size_t i) { return branches_.at(i); }
    std::size_t num_exits() const { return branches_.size() + 1; }

    // Inserts keeping exits in tap order; returns the branch's index.
    std::size_t add_branch(Branch<T> b) {
        const std::size_t tap = backbone_->tap_index(b.config().location);
        const FeatureShape& expect = backbone_->taps()[tap].shape;
        const FeatureShape& got = b.config().input;
        if (got.channels != expect.channels || got.height != expect.height || got.width != expect.width ||
            (b.config().uses_audio() && got.audio_dim != expect.audio_dim)) {
            throw ShapeError("add_branch: branch '" + b.config().location + "' input does not match the tap");
        }
        if (b.config().out_kind != backbone_->out_kind() || b.config().out_dim != backbone_->out_dim()) {
            throw std::invalid_argument("add_branch: branch output does not match the backbone task");
        }
        for (const auto& e : branches_) {
            if (e.config().location == b.config().location) {
                throw std::invalid_argument("add_branch: tap '" + b.config().location + "' already has a branch");
            }
        }
        auto pos = std::find_if(branches_.begin(), branches_.end(), [&](const Branch<T>& e) {
            return backbone_->tap_index(e.config().location) > tap;
        });
        pos = branches_.insert(pos, std::move(b));
        const auto idx = static_cast<std::size_t>(pos - branches_.begin());
        // exits must get strictly more expensive with depth, final included
        for (std::size_t e = 1; e <= branches_.size(); ++e) {
            if (cumulative_flops(e) <= cumulative_flops(e - 1)) {
                const std::string loc = pos->config().location;
                branches_.erase(pos);
                throw std::invalid_argument("add_branch: branch at '" + loc +
                                            "' breaks strictly increasing exit cost");
            }
        }
        return idx;
    }

    std::size_t tap_of(std::size_t branch_index) const {
        return backbone_->tap_index(branches_.at(branch_index).config().location);
    }

    // Backbone prefix up to the tap plus this branch only; the final exit
    // costs the full backbone.
    Flops cumulative_flops(std::size_t exit_index) const {
        if (exit_index == branches_.size()) return backbone_->total_flops();
        return backbone_->taps()[tap_of(exit_index)].prefix_flops + count_flops(branches_.at(exit_index).config());
    }

   private:
    std::shared_ptr<Backbone<T>> backbone_;
    std::vector<Branch<T>> branches_;
};

// Runs the backbone once over every sample in inference mode and keeps all
// tap activations plus the final output.
template <typename T>
BackboneOutput<T> compute_taps(Backbone<T>& backbone, const ModelInput<T>& inputs,
                               std::size_t batch = kEvalBatch) {
    NoGradGuard guard;
    Rng unused(0);
    const std::size_t n = inputs.batch();
    std::vector<std::vector<Tensor<T>>> vis(backbone.taps().size()), aud(backbone.taps().size());
    std::vector<Tensor<T>> outs;
    for (std::size_t start = 0; start < n; start += batch) {
        std::vector<std::size_t> rows;
        for (std::size_t i = start; i < std::min(n, start + batch); ++i) rows.push_back(i);
        const BackboneOutput<T> o = backbone.forward(gather(inputs, rows), false, unused);
        for (std::size_t t = 0; t < o.taps.size(); ++t) {
            vis[t].push_back(o.taps[t].visual);
            if (o.taps[t].audio) aud[t].push_back(*o.taps[t].audio);
        }
        outs.push_back(o.output);
    }
    BackboneOutput<T> all;
    for (std::size_t t = 0; t < vis.size(); ++t) {
        TapFeatures<T> f{concat_batch(vis[t]), std::nullopt};
        if (!aud[t].empty()) f.audio = concat_batch(aud[t]);
        all.taps.push_back(std::move(f));
    }
    all.output = concat_batch(outs);
    return all;
}

// Tap activations for one branch with the matching targets.
template <typename T>
struct LabeledTaps {
    TapFeatures<T> features;
    std::vector<int> labels;
    std::vector<double> counts;

    std::size_t size() const { return features.batch(); }
    bool is_classification() const { return !labels.empty(); }
};

template <typename T>
LabeledTaps<T> gather(const LabeledTaps<T>& d, std::span<const std::size_t> rows) {
    return {gather(d.features, rows), gather_values<T>(d.labels, rows), gather_values<T>(d.counts, rows)};
}

template <typename T>
LabeledTaps<T> labeled_taps(const BackboneOutput<T>& cache, std::size_t tap, const Dataset<T>& ds) {
    return {cache.taps.at(tap), ds.labels, ds.counts};
}

// ---------------------------------------------------------------- training

struct TrainRecipe {
    double lr = 1e-4;
    double plateau_factor = 0.6;
    int plateau_patience = 2;
    int stop_patience = 5;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 30;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_metric = 0;
    double best_val_loss = 0;  // best-so-far, including the untrained start
    double lr = 0;
};

struct TrainHistory {
    Metric metric = Metric::accuracy;
    double initial_train_loss = 0;
    double initial_val_loss = 0;
    double initial_val_metric = 0;
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;  // 0 = the initial weights
    double best_metric = 0;
    bool stopped_early = false;
};

struct EvalResult {
    double loss = 0;
    double metric = 0;
};

template <typename T>
Tensor<T> task_loss(const Tensor<T>& out, std::span<const int> labels, std::span<const double> counts) {
    if (!labels.empty()) return cross_entropy_loss(out, labels);
    Tensor<T> target({counts.size(), 1});
    for (std::size_t i = 0; i < counts.size(); ++i) target[i] = static_cast<T>(counts[i]);
    return mae_loss(out, target);
}

template <typename T>
int argmax_row(const Tensor<T>& logits, std::size_t row) {
    const std::size_t k = logits.dim(1);
    int best = 0;
    for (std::size_t j = 1; j < k; ++j) {
        // Strictly greater keeps the lowest index on ties.
        if (logits[row * k + j] > logits[row * k + static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    }
    return best;
}

// Loss and metric (accuracy or MAE) of `forward` over a dataset, in
// inference mode and fixed-size chunks.
template <typename T, typename Forward>
EvalResult evaluate_outputs(std::size_t n, const std::vector<int>& labels, const std::vector<double>& counts,
                            Forward&& forward) {
    NoGradGuard guard;
    double loss = 0, metric = 0;
    for (std::size_t start = 0; start < n; start += kEvalBatch) {
        const std::size_t end = std::min(n, start + kEvalBatch);
        std::vector<std::size_t> rows;
        for (std::size_t i = start; i < end; ++i) rows.push_back(i);
        const Tensor<T> out = forward(std::span<const std::size_t>(rows));
        const auto lab = gather_values<T>(labels, rows);
        const auto cnt = gather_values<T>(counts, rows);
        loss += static_cast<double>(task_loss(out, lab, cnt).item()) * static_cast<double>(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (!lab.empty()) {
                metric += argmax_row(out, r) == lab[r];
            } else {
                metric += std::abs(static_cast<double>(out[r]) - cnt[r]);
            }
        }
    }
    return {loss / static_cast<double>(n), metric / static_cast<double>(n)};
}

template <typename T>
EvalResult evaluate_branch(Branch<T>& branch, const LabeledTaps<T>& data) {
    Rng unused(0);
    return evaluate_outputs<T>(data.size(), data.labels, data.counts, [&](std::span<const std::size_t> rows) {
        return branch.forward(gather(data.features, rows), false, unused);
    });
}

// Generic minibatch Adam loop with plateau decay, early stopping and
// best-weights restore. `forward(rows, training, rng)` returns the outputs
// for the given sample indices; `params` are the trainable weights.
template <typename T, typename Forward, typename ValEval>
TrainHistory fit(ParamSet<T>& params, std::size_t n_train, const std::vector<int>& labels,
                 const std::vector<double>& counts, Forward&& forward, ValEval&& val_eval,
                 const TrainRecipe& recipe, Metric metric, Rng& rng) {
    if (n_train == 0) throw std::invalid_argument("fit: empty training set");
    if (recipe.batch_size == 0 || recipe.max_epochs == 0) {
        throw std::invalid_argument("fit: batch size and epoch count must be positive");
    }
    const bool higher = higher_is_better(metric);
    OptimizerState<T> opt;
    opt.learning_rate = recipe.lr;
    opt.plateau_factor = recipe.plateau_factor;
    opt.plateau = {higher, recipe.plateau_patience};
    opt.stop = {higher, recipe.stop_patience};

    TrainHistory h;
    h.metric = metric;
    auto train_eval = [&] {
        return evaluate_outputs<T>(n_train, labels, counts, [&](std::span<const std::size_t> rows) {
            Rng unused(0);
            return forward(rows, false, unused);
        });
    };
    h.initial_train_loss = train_eval().loss;
    const EvalResult v0 = val_eval();
    h.initial_val_loss = v0.loss;
    h.initial_val_metric = v0.metric;
    h.best_metric = v0.metric;
    opt.on_epoch_metric(v0.metric);
    ParamSet<T> best = params.clone();
    double best_loss = v0.loss;

    params.prepare_for_training();
    for (std::size_t epoch = 1; epoch <= recipe.max_epochs; ++epoch) {
        const std::vector<std::size_t> order = rng.permutation(n_train);
        double loss_sum = 0;
        for (std::size_t start = 0; start < n_train; start += recipe.batch_size) {
            const std::size_t end = std::min(n_train, start + recipe.batch_size);
            const std::span<const std::size_t> rows(order.data() + start, end - start);
            params.zero_grad();
            const Tensor<T> out = forward(rows, true, rng);
            Tensor<T> loss =
                task_loss(out, gather_values<T>(labels, rows), gather_values<T>(counts, rows));
            if (!std::isfinite(static_cast<double>(loss.item()))) {
                throw NumericalError("fit: non-finite training loss at epoch " + std::to_string(epoch));
            }
            loss.backward();
            adam_step(params, opt);
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(rows.size());
        }
        params.release_grad();
        const EvalResult v = val_eval();
        best_loss = std::min(best_loss, v.loss);
        const bool improved = higher ? v.metric > h.best_metric : v.metric < h.best_metric;
        if (improved) {
            h.best_metric = v.metric;
            h.best_epoch = epoch;
            best = params.clone();
        }
        h.epochs.push_back({epoch, loss_sum / static_cast<double>(n_train), v.loss, v.metric, best_loss,
                            opt.learning_rate});
        opt.on_epoch_metric(v.metric);
        if (opt.should_stop()) {
            h.stopped_early = true;
            break;
        }
        params.prepare_for_training();
    }
    params.release_grad();
    params.assign_values(best);
    return h;
}

class UnfrozenBackboneError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

// Trains one branch on pre-computed tap activations. The backbone is never
// touched; only this branch's parameters change.
template <typename T>
TrainHistory train_branch(Branch<T>& branch, const LabeledTaps<T>& train, const LabeledTaps<T>& val,
                          const TrainRecipe& recipe, std::uint64_t seed) {
    if (train.is_classification() != (branch.config().out_kind == OutKind::class_logits)) {
        throw std::invalid_argument("train_branch: targets do not match the branch output kind");
    }
    Rng rng(seed);
    const Metric metric = train.is_classification() ? Metric::accuracy : Metric::mae;
    ParamSet<T>& params = branch.params();
    params.set_trainable(true);
    TrainHistory h = fit<T>(
        params, train.size(), train.labels, train.counts,
        [&](std::span<const std::size_t> rows, bool training, Rng& r) {
            return branch.forward(gather(train.features, rows), training, r);
        },
        [&] { return evaluate_branch(branch, val); }, recipe, metric, rng);
    branch.mark_trained();
    return h;
}

template <typename T>
TrainHistory train_branch_classifierwise(MultiExitModel<T>& model, std::size_t branch_index,
                                         const LabeledTaps<T>& train, const LabeledTaps<T>& val,
                                         const TrainRecipe& recipe, std::uint64_t seed) {
    if (!model.backbone().frozen()) {
        throw UnfrozenBackboneError("train_branch_classifierwise: backbone must be frozen first");
    }
    return train_branch(model.branch(branch_index), train, val, recipe, seed);
}

template <typename T>
TrainHistory train_branch_classifierwise(MultiExitModel<T>& model, std::size_t branch_index,
                                         const Dataset<T>& train, const Dataset<T>& val,
                                         const TrainRecipe& recipe, std::uint64_t seed) {
    if (!model.backbone().frozen()) {
        throw UnfrozenBackboneError("train_branch_classifierwise: backbone must be frozen first");
    }
    const std::size_t tap = model.tap_of(branch_index);
    const auto tr = compute_taps(model.backbone(), train.inputs);
    const auto va = compute_taps(model.backbone(), val.inputs);
    return train_branch(model.branch(branch_index), labeled_taps(tr, tap, train), labeled_taps(va, tap, val),
                        recipe, seed);
}

template <typename T>
EvalResult evaluate_backbone(Backbone<T>& backbone, const Dataset<T>& data) {
    Rng unused(0);
    return evaluate_outputs<T>(data.size(), data.labels, data.counts, [&](std::span<const std::size_t> rows) {
        return backbone.forward(gather(data.inputs, rows), false, unused).output;
    });
}

// Trains the backbone end to end (the stand-in for a pre-trained network).
template <typename T>
TrainHistory train_backbone(Backbone<T>& backbone, const Dataset<T>& train, const Dataset<T>& val,
                            const TrainRecipe& recipe, std::uint64_t seed) {
    if (backbone.frozen()) throw FrozenBackboneError("train_backbone: backbone is frozen");
    Rng rng(seed);
    const Metric metric = train.is_classification() ? Metric::accuracy : Metric::mae;
    return fit<T>(
        backbone.params(), train.size(), train.labels, train.counts,
        [&](std::span<const std::size_t> rows, bool training, Rng& r) {
            return backbone.forward(gather(train.inputs, rows), training, r).output;
        },
        [&] { return evaluate_backbone(backbone, val); }, recipe, metric, rng);
}

// ------------------------------------------------------------ exit outcomes

enum class ConfidenceMode { max_prob, entropy };

inline const char* to_string(ConfidenceMode m) { return m == ConfidenceMode::max_prob ? "max_prob" : "entropy"; }

inline ConfidenceMode confidence_mode_from_string(const std::string& s) {
    if (s == "max_prob") return ConfidenceMode::max_prob;
    if (s == "entropy") return ConfidenceMode::entropy;
    throw std::invalid_argument("unknown confidence mode '" + s + "'");
}

// Max softmax probability, or 1 - H(p) / log K.
inline double confidence(std::span<const double> logits, ConfidenceMode mode = ConfidenceMode::max_prob) {
    if (logits.size() < 2) throw std::invalid_argument("confidence: need at least two classes");
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0;
    for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - m);
    for (auto& v : p) v /= z;
    if (mode == ConfidenceMode::max_prob) return *std::max_element(p.begin(), p.end());
    double h = 0;
    for (double v : p) {
        if (v > 0) h -= v * std::log(v);
    }
    return std::clamp(1.0 - h / std::log(static_cast<double>(p.size())), 0.0, 1.0);
}

struct ExitOutcome {
    std::size_t exit_index = 0;  // branch index, or the branch count for the final exit
    bool is_final = false;
    std::vector<double> prediction;  // logits or the count
    int predicted_class = -1;
    double confidence = std::numeric_limits<double>::quiet_NaN();
    Flops cumulative_flops = 0;
    double simulated_latency_s = 0;
};

class NoResultError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct ExitOptions {
    ConfidenceMode mode = ConfidenceMode::max_prob;
    double flops_per_second = 1e9;
};

// outcomes[sample][exit]: every branch in depth order, then the final exit.
template <typename T>
std::vector<std::vector<ExitOutcome>> forward_all_exits(MultiExitModel<T>& model, const ModelInput<T>& input,
                                                        const ExitOptions& opt = {}) {
    if (!(opt.flops_per_second > 0)) throw std::invalid_argument("forward_all_exits: throughput must be positive");
    NoGradGuard guard;
    Rng unused(0);
    const bool cls = model.backbone().out_kind() == OutKind::class_logits;
    const std::size_t n = input.batch(), exits = model.num_exits();
    std::vector<std::vector<ExitOutcome>> out(n, std::vector<ExitOutcome>(exits));
    for (std::size_t start = 0; start < n; start += kEvalBatch) {
        std::vector<std::size_t> rows;
        for (std::size_t i = start; i < std::min(n, start + kEvalBatch); ++i) rows.push_back(i);
        const BackboneOutput<T> bo = model.backbone().forward(gather(input, rows), false, unused);
        for (std::size_t e = 0; e < exits; ++e) {
            const bool final_exit = e + 1 == exits;
            const Tensor<T> y = final_exit ? bo.output : model.branch(e).forward(bo.taps[model.tap_of(e)], false, unused);
            const std::size_t k = y.dim(1);
            const Flops flops = model.cumulative_flops(e);
            for (std::size_t r = 0; r < rows.size(); ++r) {
                ExitOutcome& o = out[rows[r]][e];
                o.exit_index = e;
                o.is_final = final_exit;
                o.prediction.assign(y.data().begin() + r * k, y.data().begin() + (r + 1) * k);
                o.cumulative_flops = flops;
                o.simulated_latency_s = static_cast<double>(flops) / opt.flops_per_second;
                if (cls) {
                    o.predicted_class = argmax_row(y, r);
                    o.confidence = confidence(o.prediction, opt.mode);
                }
            }
        }
    }
    return out;
}

// First exit whose confidence reaches tau, else the final exit.
inline const ExitOutcome& select_budgeted(const std::vector<ExitOutcome>& exits, double tau) {
    for (const auto& o : exits) {
        if (o.is_final || o.confidence >= tau) return o;
    }
    return exits.back();
}

// Deepest exit whose simulated latency fits the budget.
inline const ExitOutcome& select_anytime(const std::vector<ExitOutcome>& exits, double budget_s) {
    const ExitOutcome* best = nullptr;
    for (const auto& o : exits) {
        if (o.simulated_latency_s <= budget_s) best = &o;
    }
    if (!best) {
        throw NoResultError("anytime: budget " + std::to_string(budget_s) + " s is below the first exit (" +
                            std::to_string(exits.front().simulated_latency_s) + " s)");
    }
    return *best;
}

struct BudgetedResult {
    double tau = 0;
    std::vector<ExitOutcome> outcomes;
    std::vector<std::size_t> exit_histogram;
    double mean_flops = 0;
    double accuracy = std::numeric_limits<double>::quiet_NaN();
};

inline BudgetedResult budgeted_from_outcomes(const std::vector<std::vector<ExitOutcome>>& all, double tau,
                                             const std::vector<int>& labels = {}) {
    if (all.empty()) throw std::invalid_argument("budgeted: empty batch");
    if (!labels.empty() && labels.size() != all.size()) throw std::invalid_argument("budgeted: label count");
    BudgetedResult r;
    r.tau = tau;
    r.exit_histogram.assign(all.front().size(), 0);
    double flops = 0;
    std::size_t hit = 0;
    for (std::size_t s = 0; s < all.size(); ++s) {
        const ExitOutcome& o = select_budgeted(all[s], tau);
        r.outcomes.push_back(o);
        ++r.exit_histogram[o.exit_index];
        flops += static_cast<double>(o.cumulative_flops);
        if (!labels.empty()) hit += o.predicted_class == labels[s];
    }
    r.mean_flops = flops / static_cast<double>(all.size());
    if (!labels.empty()) r.accuracy = static_cast<double>(hit) / static_cast<double>(all.size());
    return r;
}

template <typename T>
BudgetedResult budgeted_batch_infer(MultiExitModel<T>& model, const ModelInput<T>& batch, double tau,
                                    const std::vector<int>& labels = {}, const ExitOptions& opt = {}) {
    if (model.backbone().out_kind() != OutKind::class_logits) {
        throw std::invalid_argument("budgeted_batch_infer: classification models only");
    }
    return budgeted_from_outcomes(forward_all_exits(model, batch, opt), tau, labels);
}

template <typename T>
std::vector<ExitOutcome> anytime_predict(MultiExitModel<T>& model, const ModelInput<T>& x, double budget_s,
                                         double flops_per_second) {
    if (!(flops_per_second > 0)) throw std::invalid_argument("anytime_predict: throughput must be positive");
    ExitOptions opt;
    opt.flops_per_second = flops_per_second;
    // Check the budget before doing any work.
    const double first = static_cast<double>(model.cumulative_flops(0)) / flops_per_second;
    if (budget_s < first) {
        throw NoResultError("anytime: budget " + std::to_string(budget_s) + " s is below the first exit (" +
                            std::to_string(first) + " s)");
    }
    std::vector<ExitOutcome> out;
    for (const auto& exits : forward_all_exits(model, x, opt)) out.push_back(select_anytime(exits, budget_s));
    return out;
}

// Branch j is impractical when some earlier branch i beats it by at least
// eps (for eps = 0: is at least as good). Metrics are in exit order.
inline std::vector<std::size_t> detect_impractical(const std::vector<double>& metrics, bool higher_better,
                                                   double eps = 0.0) {
    if (eps < 0) throw std::invalid_argument("detect_impractical: eps must be non-negative");
    constexpr double kSlack = 1e-12;
    std::vector<std::size_t> flagged;
    for (std::size_t j = 1; j < metrics.size(); ++j) {
        for (std::size_t i = 0; i < j; ++i) {
            const bool dominated = higher_better ? metrics[i] >= metrics[j] + eps - kSlack
                                                 : metrics[i] <= metrics[j] - eps + kSlack;
            if (dominated) {
                flagged.push_back(j);
                break;
            }
        }
    }
    return flagged;
}

// ------------------------------------------------------------- cost report

// CNN exit at the same tap (default settings unless given), used as the
// parameter budget for transformer exits.
inline BranchConfig cnn_reference(const BranchConfig& c, const CnnBranchConfig& cnn = {}) {
    BranchConfig r;
    r.cnn = cnn;
    r.location = c.location;
    r.kind = BranchKind::cnn;
    r.out_kind = c.out_kind;
    r.out_dim = c.out_dim;
    r.input = c.input;
    r.head = c.head;
    r.cnn.film = c.kind == BranchKind::av_slvit && c.input.audio_dim > 0;
    return r;
}

template <typename T>
CostReport build_cost_report(const MultiExitModel<T>& model, const CnnBranchConfig& reference = {}) {
    CostReport r;
    const Backbone<T>& bb = model.backbone();
    r.backbone_total_flops = bb.total_flops();
    r.backbone_params = bb.params().count();
    for (std::size_t e = 0; e < model.num_exits(); ++e) {
        ExitCost c;
        c.cumulative_flops = model.cumulative_flops(e);
        c.speedup = speedup(static_cast<double>(r.backbone_total_flops), static_cast<double>(c.cumulative_flops));
        if (e < model.branches().size()) {
            const BranchConfig& cfg = model.branches()[e].config();
            c.location = cfg.location;
            c.kind = to_string(cfg.kind);
            c.branch_params = count_params(cfg);
            c.branch_flops = count_flops(cfg);
            if (cfg.is_transformer()) c.budget_feasible = budget_validate(cfg, cnn_reference(cfg, reference)).feasible;
        } else {
            c.location = "final";
            c.kind = "backbone";
        }
        r.exits.push_back(c);
    }
    return r;
}

}  // namespace slvit
