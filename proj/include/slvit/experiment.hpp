#pragma once

// Experiment pipeline behind the CLI. Work is split into jobs (backbone,
// one per branch family and repeat, copycat, ablation). A finished job
// leaves a checkpoint plus a job file under <output_dir>; reruns reuse them
// after checking the config hash and seed, so an interrupted run resumes
// where it stopped and ends with the same numbers.

#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "slvit/config.hpp"
#include "slvit/copycat.hpp"
#include "slvit/fusion.hpp"
#include "slvit/io.hpp"
#include "slvit/synthetic.hpp"

namespace slvit {

using Real = float;  // element type for CLI runs

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ------------------------------------------------------------ json helpers

inline Json branch_config_json(const BranchConfig& c) {
    const EncoderConfig& e = c.slvit.encoder;
    return {{"location", c.location},
            {"kind", to_string(c.kind)},
            {"out_kind", c.out_kind == OutKind::class_logits ? "class_logits" : "scalar_count"},
            {"out_dim", c.out_dim},
            {"input",
             {{"channels", c.input.channels},
              {"height", c.input.height},
              {"width", c.input.width},
              {"audio_dim", c.input.audio_dim}}},
            {"cnn", {{"filters", c.cnn.filters}, {"pool", c.cnn.pool}, {"film", c.cnn.film}}},
            {"slvit",
             {{"patch", c.slvit.patch},
              {"d", e.d},
              {"heads", e.heads},
              {"dk", e.dk},
              {"dv", e.dv},
              {"mlp_hidden", e.mlp_hidden},
              {"second_residual", e.second_residual},
              {"layers", e.layers},
              {"dropout", e.dropout}}},
            {"head", {{"hidden", c.head.hidden}, {"dropout", c.head.dropout}}}};
}

inline BranchConfig branch_config_from_json(const Json& j) {
    BranchConfig c;
    c.location = j.at("location").get<std::string>();
    c.kind = branch_kind_from_string(j.at("kind").get<std::string>());
    c.out_kind = j.at("out_kind").get<std::string>() == "class_logits" ? OutKind::class_logits : OutKind::scalar_count;
    c.out_dim = j.at("out_dim");
    const Json& in = j.at("input");
    c.input = {in.at("channels"), in.at("height"), in.at("width"), in.at("audio_dim")};
    c.cnn = {j.at("cnn").at("filters"), j.at("cnn").at("pool"), j.at("cnn").at("film")};
    const Json& s = j.at("slvit");
    c.slvit.patch = s.at("patch");
    c.slvit.encoder = EncoderConfig{s.at("d"),         s.at("heads"),  s.at("dk"),     s.at("dv"),
                                    s.at("mlp_hidden"), s.at("second_residual"), s.at("layers"), s.at("dropout")};
    c.head = {j.at("head").at("hidden"), j.at("head").at("dropout")};
    return c;
}

inline Json history_json(const TrainHistory& h) {
    Json epochs = Json::array();
    for (const auto& e : h.epochs) {
        epochs.push_back({{"epoch", e.epoch},
                          {"train_loss", e.train_loss},
                          {"val_loss", e.val_loss},
                          {"val_metric", e.val_metric},
                          {"best_val_loss", e.best_val_loss},
                          {"lr", e.lr}});
    }
    return {{"metric", to_string(h.metric)},
            {"initial_train_loss", h.initial_train_loss},
            {"initial_val_loss", h.initial_val_loss},
            {"initial_val_metric", h.initial_val_metric},
            {"best_epoch", h.best_epoch},
            {"best_metric", h.best_metric},
            {"stopped_early", h.stopped_early},
            {"epochs", epochs}};
}

inline bool best_loss_monotone(const TrainHistory& h) {
    double prev = h.initial_val_loss;
    for (const auto& e : h.epochs) {
        if (e.best_val_loss > prev) return false;
        prev = e.best_val_loss;
    }
    return true;
}

inline Json cost_report_json(const CostReport& r) {
    Json exits = Json::array();
    for (const auto& e : r.exits) {
        exits.push_back({{"location", e.location},
                         {"kind", e.kind},
                         {"branch_params", e.branch_params},
                         {"branch_flops", e.branch_flops},
                         {"cumulative_flops", e.cumulative_flops},
                         {"speedup", e.speedup},
                         {"budget_feasible", e.budget_feasible}});
    }
    return {{"backbone_total_flops", r.backbone_total_flops}, {"backbone_params", r.backbone_params}, {"exits", exits}};
}

struct MeanStd {
    double mean = 0;
    double std = 0;  // sample standard deviation (n - 1); 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd m;
    if (v.empty()) return m;
    for (double x : v) m.mean += x;
    m.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0;
        for (double x : v) ss += (x - m.mean) * (x - m.mean);
        m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return m;
}

// ------------------------------------------------------------ dataset files

template <typename T>
void save_dataset(const std::filesystem::path& dir, const std::string& name, const Dataset<T>& ds) {
    save_tensor(dir / (name + "_image.slvt"), RawTensor::from(ds.inputs.image));
    if (ds.inputs.audio) save_tensor(dir / (name + "_audio.slvt"), RawTensor::from(*ds.inputs.audio));
    Json side = {{"provenance", ds.provenance}, {"samples", ds.size()}, {"audio", ds.inputs.audio.has_value()}};
    if (ds.is_classification()) {
        std::vector<double> v(ds.labels.begin(), ds.labels.end());
        save_tensor(dir / (name + "_labels.slvt"), RawTensor::from_values<double>({v.size()}, v));
        side["task"] = "classification";
    } else {
        save_tensor(dir / (name + "_counts.slvt"), RawTensor::from_values<double>({ds.counts.size()}, ds.counts));
        side["task"] = "counting";
    }
    write_file_atomic(dir / (name + ".json"), side.dump(2) + "\n");
}

template <typename T>
Dataset<T> load_dataset(const std::filesystem::path& dir, const std::string& name) {
    const Json side = Json::parse(read_file(dir / (name + ".json")));
    Dataset<T> ds;
    ds.provenance = side.at("provenance");
    ds.inputs.image = load_tensor(dir / (name + "_image.slvt")).to_tensor<T>();
    if (side.at("audio").get<bool>()) ds.inputs.audio = load_tensor(dir / (name + "_audio.slvt")).to_tensor<T>();
    if (side.at("task") == "classification") {
        const RawTensor t = load_tensor(dir / (name + "_labels.slvt"));
        for (std::size_t i = 0; i < t.numel(); ++i) ds.labels.push_back(static_cast<int>(t.at(i)));
    } else {
        const RawTensor t = load_tensor(dir / (name + "_counts.slvt"));
        for (std::size_t i = 0; i < t.numel(); ++i) ds.counts.push_back(t.at(i));
    }
    ds.validate();
    return ds;
}

// u8 [N, H, W] images and [N] labels, scaled to [0, 1] with one channel.
template <typename T>
Dataset<T> dataset_from_idx(const RawTensor& images, const RawTensor& labels, const std::string& tag) {
    if (images.shape.size() != 3 || labels.shape.size() != 1 || images.shape[0] != labels.shape[0]) {
        throw IoError("idx: expected [N,H,W] images and [N] labels with matching N");
    }
    Dataset<T> ds;
    ds.provenance = tag;
    const std::size_t n = images.shape[0], h = images.shape[1], w = images.shape[2];
    std::vector<T> px(images.numel());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<T>(images.at(i) / 255.0);
    ds.inputs.image = Tensor<T>({n, 1, h, w}, std::move(px));
    for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<int>(labels.at(i)));
    return ds;
}

template <typename T>
struct Splits {
    Dataset<T> train, val, test;
};

template <typename T>
Splits<T> make_splits(const ExperimentConfig& cfg) {
    const DataConfig& d = cfg.data;
    Splits<T> s;
    if (d.kind == "synthetic_cls") {
        GratingStyle style;
        style.noise = d.noise;
        s.train = gen_synthetic_cls<T>(d.train, d.classes, d.image_size, mix_seed(d.seed, 1), style);
        s.val = gen_synthetic_cls<T>(d.val, d.classes, d.image_size, mix_seed(d.seed, 2), style);
        s.test = gen_synthetic_cls<T>(d.test, d.classes, d.image_size, mix_seed(d.seed, 3), style);
    } else if (d.kind == "synthetic_av") {
        AvStyle style;
        style.degraded_fraction = d.degraded_fraction;
        s.train = gen_synthetic_av<T>(d.train, d.max_count, d.image_size, d.spec_size, mix_seed(d.seed, 1), style).data;
        s.val = gen_synthetic_av<T>(d.val, d.max_count, d.image_size, d.spec_size, mix_seed(d.seed, 2), style).data;
        s.test = gen_synthetic_av<T>(d.test, d.max_count, d.image_size, d.spec_size, mix_seed(d.seed, 3), style).data;
    } else if (d.kind == "idx") {
        const Dataset<T> full = dataset_from_idx<T>(load_idx(d.train_images), load_idx(d.train_labels), "idx:train");
        if (d.val >= full.size()) throw ConfigError("data.val must be smaller than the IDX training set");
        Rng rng(mix_seed(d.seed, 4));
        const std::vector<std::size_t> perm = rng.permutation(full.size());
        const std::vector<std::size_t> vrows(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(d.val));
        std::vector<std::size_t> trows(perm.begin() + static_cast<std::ptrdiff_t>(d.val), perm.end());
        std::sort(trows.begin(), trows.end());
        s.train = subset(full, trows);
        s.val = subset(full, vrows);
        s.test = dataset_from_idx<T>(load_idx(d.test_images), load_idx(d.test_labels), "idx:test");
    } else {
        s.train = load_dataset<T>(d.dir, "train");
        s.val = load_dataset<T>(d.dir, "val");
        s.test = load_dataset<T>(d.dir, "test");
    }
    s.train.validate();
    s.val.validate();
    s.test.validate();
    return s;
}

// ------------------------------------------------------------ experiment

class RunInterrupted : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct RunOptions {
    std::optional<std::size_t> stop_after;  // finish at most this many new jobs, then stop
    bool quiet = false;
};

class Experiment {
   public:
    Experiment(ExperimentConfig cfg, RunOptions opt = {})
        : cfg_(std::move(cfg)), hash_(config_hash(cfg_)), out_(cfg_.output_dir), opt_(opt) {}

    const ExperimentConfig& config() const { return cfg_; }
    const std::string& hash() const { return hash_; }
    const std::filesystem::path& output_dir() const { return out_; }

    Splits<Real>& data() {
        if (!splits_) splits_ = make_splits<Real>(cfg_);
        return *splits_;
    }

    std::size_t classes() {
        if (cfg_.data.kind == "synthetic_cls") return cfg_.data.classes;
        if (data().train.is_classification()) {
            int mx = 0;
            for (int l : data().train.labels) mx = std::max(mx, l);
            return static_cast<std::size_t>(mx) + 1;
        }
        return 1;
    }

    bool classification() { return data().train.is_classification(); }

    // Untrained backbone of the configured architecture.
    std::shared_ptr<Backbone<Real>> fresh_backbone(std::uint64_t seed) {
        const Tensor<Real>& img = data().train.inputs.image;
        if (img.dim(2) != img.dim(3)) throw ConfigError("data: images must be square");
        if (cfg_.backbone.kind == "conv") {
            return std::make_shared<ConvBackbone<Real>>(
                ConvBackboneConfig{img.dim(1), img.dim(2), cfg_.backbone.channels, classes()}, seed);
        }
        if (!data().train.inputs.audio) throw ConfigError("backbone mini_av needs audio inputs");
        return std::make_shared<MiniAVBackbone<Real>>(mini_av_config(), seed);
    }

    // ---------------------------------------------------------- jobs

    std::shared_ptr<Backbone<Real>> backbone() {
        if (backbone_) return backbone_;
        const std::string job = "backbone";
        run_job(job, [&] {
            auto bb = fresh_backbone(mix_seed(cfg_.seed, 0));
            note("training backbone");
            const TrainHistory h = train_backbone<Real>(*bb, data().train, data().val, cfg_.backbone_recipe,
                                                        mix_seed(cfg_.seed, 1));
            bb->freeze();
            const EvalResult test = evaluate_backbone<Real>(*bb, data().test);
            if (cfg_.backbone_target > 0 && test.metric < cfg_.backbone_target) {
                throw std::runtime_error("backbone reached test " + std::string(to_string(h.metric)) + " " +
                                         std::to_string(test.metric) + ", below backbone_target " +
                                         std::to_string(cfg_.backbone_target));
            }
            Checkpoint c = checkpoint_base(job);
            c.meta["backbone_kind"] = bb->kind_name();
            put_params(c, "backbone/", bb->params());
            save_checkpoint(ckpt_path(job), c);
            return Json::array({{{"record", "backbone"},
                                 {"kind", bb->kind_name()},
                                 {"params", bb->params().count()},
                                 {"flops", bb->total_flops()},
                                 {"metric", to_string(h.metric)},
                                 {"test_metric", test.metric},
                                 {"best_val_metric", h.best_metric},
                                 {"target", cfg_.backbone_target},
                                 {"history", history_json(h)}}});
        });
        const Checkpoint c = load_checkpoint(ckpt_path(job));
        check_provenance(c, hash_, cfg_.seed, ckpt_path(job).string());
        ParamSet<Real> p = get_params<Real>(c, "backbone/", false);
        if (cfg_.backbone.kind == "conv") {
            const Tensor<Real>& img = data().train.inputs.image;
            backbone_ = std::make_shared<ConvBackbone<Real>>(
                ConvBackboneConfig{img.dim(1), img.dim(2), cfg_.backbone.channels, classes()}, std::move(p), true);
        } else {
            backbone_ = std::make_shared<MiniAVBackbone<Real>>(mini_av_config(), std::move(p), true);
        }
        return backbone_;
    }

    // Branch configuration for a family at a tap.
    BranchConfig branch_config(const std::string& family, const TapInfo& tap, std::optional<std::size_t> heads = {}) {
        auto& bb = *backbone_or_fresh();
        BranchConfig c;
        c.location = tap.name;
        c.out_kind = bb.out_kind();
        c.out_dim = bb.out_dim();
        c.input = tap.shape;
        c.head = cfg_.head;
        if (family == "cnn") {
            c.kind = BranchKind::cnn;
            c.cnn = cfg_.cnn;
            c.cnn.film = cfg_.cnn.film && tap.shape.audio_dim > 0;
            return c;
        }
        c.kind = family == "av_slvit" && tap.shape.audio_dim > 0 ? BranchKind::av_slvit : BranchKind::slvit;
        const SlvitSpec& s = cfg_.slvit;
        c.slvit.encoder = EncoderConfig::full_width(s.d, heads.value_or(s.heads), s.second_residual, s.dropout);
        if (s.patch != 0) {
            c.slvit.patch = s.patch;
            return c;
        }
        if (heads) {
            // head sweeps keep d fixed and borrow the patch picked for the default exit
            c.slvit.patch = branch_config(family, tap).slvit.patch;
            return c;
        }
        // largest feasible grid candidate, fewest FLOPs on ties
        c.slvit.patch = 1;
        const auto cands = budget_grid_search(c, cnn_reference(c, cfg_.cnn));
        if (cands.empty()) throw ConfigError("slvit: no grid configuration fits the CNN budget at " + tap.name);
        const GridCandidate* best = &cands.front();
        for (const auto& g : cands) {
            if (g.budget.slvit_params > best->budget.slvit_params ||
                (g.budget.slvit_params == best->budget.slvit_params && g.flops < best->flops)) {
                best = &g;
            }
        }
        return best->config;
    }

    std::vector<BranchConfig> family_configs(const std::string& family) {
        auto& bb = *backbone_or_fresh();
        std::vector<BranchConfig> out;
        for (const auto& loc : cfg_.exits) out.push_back(branch_config(family, bb.taps()[bb.tap_index(loc)]));
        return out;
    }

    // Model with untrained branches: enough for cost accounting.
    MultiExitModel<Real> structural_model(const std::string& family) {
        MultiExitModel<Real> m(backbone_or_fresh());
        for (const auto& c : family_configs(family)) m.add_branch(Branch<Real>(c, 0));
        return m;
    }

    std::uint64_t branch_seed(std::size_t repeat) const { return mix_seed(cfg_.seed, 1000 + repeat); }

    // Trains (or reloads) every exit of one family for one repeat.
    MultiExitModel<Real> family_model(const std::string& family, std::size_t repeat) {
        auto bb = backbone();
        const std::string job = family + "_r" + std::to_string(repeat);
        run_job(job, [&] {
            MultiExitModel<Real> m(bb);
            Checkpoint c = checkpoint_base(job);
            Json recs = Json::array(), cfgs = Json::array();
            const std::uint64_t seed = branch_seed(repeat);
            std::uint64_t init = 0;
            for (const auto& bc : family_configs(family)) m.add_branch(Branch<Real>(bc, mix_seed(seed, 100 + init++)));
            const CostReport cost = build_cost_report(m, cfg_.cnn);
            for (std::size_t e = 0; e < m.branches().size(); ++e) {
                const std::size_t tap = m.tap_of(e);
                note("training " + family + " exit at " + m.branch(e).config().location + " (repeat " +
                     std::to_string(repeat) + ")");
                const TrainHistory h = train_branch(m.branch(e), labeled_taps(taps("train"), tap, data().train),
                                                    labeled_taps(taps("val"), tap, data().val), cfg_.recipe,
                                                    mix_seed(seed, e));
                const EvalResult test = evaluate_branch(m.branch(e), labeled_taps(taps("test"), tap, data().test));
                const BranchConfig& bc = m.branch(e).config();
                const std::string prefix = "branch" + std::to_string(e) + "/";
                put_params(c, prefix, m.branch(e).params());
                cfgs.push_back(branch_config_json(bc));
                recs.push_back({{"record", "branch"},
                                {"family", family},
                                {"kind", to_string(bc.kind)},
                                {"location", bc.location},
                                {"repeat", repeat},
                                {"params", m.branch(e).params().count()},
                                {"flops", cost.exits[e].branch_flops},
                                {"cumulative_flops", cost.exits[e].cumulative_flops},
                                {"speedup", cost.exits[e].speedup},
                                {"budget_feasible", cost.exits[e].budget_feasible},
                                {"metric", to_string(h.metric)},
                                {"test_metric", test.metric},
                                {"best_val_metric", h.best_metric},
                                {"best_val_loss_monotone", best_loss_monotone(h)},
                                {"history", history_json(h)},
                                {"config", branch_config_json(bc)}});
            }
            c.meta["branches"] = cfgs;
            save_checkpoint(ckpt_path(job), c);
            return recs;
        });
        const Checkpoint c = load_checkpoint(ckpt_path(job));
        check_provenance(c, hash_, cfg_.seed, ckpt_path(job).string());
        MultiExitModel<Real> m(bb);
        const Json& cfgs = c.meta.at("branches");
        for (std::size_t e = 0; e < cfgs.size(); ++e) {
            m.add_branch(Branch<Real>(branch_config_from_json(cfgs[e]),
                                      get_params<Real>(c, "branch" + std::to_string(e) + "/", false), true));
        }
        return m;
    }

    // ---------------------------------------------------------- derived records

    Json exits_record(MultiExitModel<Real>& m, const std::string& family, std::size_t repeat) {
        const auto all = forward_all_exits(m, data().test.inputs, exit_options());
        Json exits = Json::array();
        std::vector<double> branch_metrics;
        const bool cls = classification();
        for (std::size_t e = 0; e < m.num_exits(); ++e) {
            double metric = 0;
            for (std::size_t s = 0; s < all.size(); ++s) {
                metric += cls ? (all[s][e].predicted_class == data().test.labels[s])
                              : std::abs(all[s][e].prediction[0] - data().test.counts[s]);
            }
            metric /= static_cast<double>(all.size());
            if (e + 1 < m.num_exits()) branch_metrics.push_back(metric);
            exits.push_back({{"exit", e},
                             {"location", e + 1 < m.num_exits() ? m.branch(e).config().location : "final"},
                             {"cumulative_flops", m.cumulative_flops(e)},
                             {"test_metric", metric}});
        }
        return {{"record", "exits"},
                {"family", family},
                {"repeat", repeat},
                {"metric", cls ? "accuracy" : "mae"},
                {"exits", exits},
                {"impractical", detect_impractical(branch_metrics, cls)}};
    }

    Json budgeted_record(MultiExitModel<Real>& m, const std::string& family, std::size_t repeat) {
        if (!classification()) {
            return {{"record", "budgeted"}, {"family", family}, {"repeat", repeat}, {"skipped", "counting task"}};
        }
        const auto all = forward_all_exits(m, data().test.inputs, exit_options());
        Json sweep = Json::array();
        for (double tau : cfg_.policy.taus) {
            const BudgetedResult r = budgeted_from_outcomes(all, tau, data().test.labels);
            sweep.push_back({{"tau", tau},
                             {"mean_flops", r.mean_flops},
                             {"accuracy", r.accuracy},
                             {"exit_histogram", r.exit_histogram}});
        }
        return {{"record", "budgeted"}, {"family", family}, {"repeat", repeat}, {"sweep", sweep}};
    }

    std::vector<double> anytime_budgets(MultiExitModel<Real>& m) const {
        if (!cfg_.policy.budgets_s.empty()) return cfg_.policy.budgets_s;
        std::vector<double> b;
        const double fps = cfg_.policy.flops_per_second;
        for (std::size_t e = 0; e < m.num_exits(); ++e) {
            const double l = static_cast<double>(m.cumulative_flops(e)) / fps;
            if (e > 0) b.push_back((b.back() + l) / 2);
            b.push_back(l);
        }
        return b;
    }

    Json anytime_record(MultiExitModel<Real>& m, const std::string& family, std::size_t repeat) {
        const auto all = forward_all_exits(m, data().test.inputs, exit_options());
        const bool cls = classification();
        Json sweep = Json::array();
        for (double budget : anytime_budgets(m)) {
            Json row = {{"budget_s", budget}};
            try {
                std::vector<std::size_t> hist(m.num_exits(), 0);
                double metric = 0;
                for (std::size_t s = 0; s < all.size(); ++s) {
                    const ExitOutcome& o = select_anytime(all[s], budget);
                    ++hist[o.exit_index];
                    metric += cls ? (o.predicted_class == data().test.labels[s])
                                  : std::abs(o.prediction[0] - data().test.counts[s]);
                }
                row["exit_histogram"] = hist;
                row["test_metric"] = metric / static_cast<double>(all.size());
            } catch (const NoResultError&) {
                row["no_result"] = true;
            }
            sweep.push_back(row);
        }
        return {{"record", "anytime"}, {"family", family}, {"repeat", repeat}, {"sweep", sweep}};
    }

    Json cost_record(const std::string& family) {
        auto m = structural_model(family);
        Json j = cost_report_json(build_cost_report(m, cfg_.cnn));
        j["record"] = "cost";
        j["family"] = family;
        return j;
    }

    // ---------------------------------------------------------- copycat

    std::vector<Json> copycat(std::size_t repeat) {
        if (!classification()) throw ConfigError("copycat: only defined for classification tasks");
        std::string family;
        for (const auto& f : cfg_.families) {
            if (f != "cnn") family = f;
        }
        if (family.empty()) throw ConfigError("copycat: needs an slvit family in 'families'");
        MultiExitModel<Real> m = family_model(family, repeat);
        const std::string job = "copycat_r" + std::to_string(repeat);
        return run_job(job, [&] {
            const Dataset<Real>& fake = fake_set();
            const MixSpec spec{cfg_.copycat.fake, cfg_.copycat.real, mix_seed(branch_seed(repeat), 99)};
            const Dataset<Real> mixed = mix_datasets(data().train, fake, spec);
            const MixCounts counts = mix_counts(data().train.size(), fake.size(), spec);
            Checkpoint c = checkpoint_base(job);
            Json recs = Json::array();
            for (std::size_t e = 0; e < m.branches().size(); ++e) {
                note("copycat fine-tuning exit at " + m.branch(e).config().location + " (repeat " +
                     std::to_string(repeat) + ")");
                const CopycatResult<Real> r =
                    finetune_copycat(m, e, mixed, data().val, cfg_.copycat.recipe, mix_seed(branch_seed(repeat), 50 + e));
                const std::size_t tap = m.tap_of(e);
                const auto test = labeled_taps(taps("test"), tap, data().test);
                Branch<Real> cc = r.branch;
                const double pre = evaluate_branch(m.branch(e), test).metric;
                const double post = evaluate_branch(cc, test).metric;
                put_params(c, "cc" + std::to_string(e) + "/", cc.params());
                recs.push_back({{"record", "copycat"},
                                {"family", family},
                                {"location", m.branch(e).config().location},
                                {"repeat", repeat},
                                {"fake", counts.fake},
                                {"real", counts.real},
                                {"pre_val_metric", r.pre_metric},
                                {"post_val_metric", r.post_metric},
                                {"pre_test_metric", pre},
                                {"post_test_metric", post},
                                {"delta_test_metric", post - pre},
                                {"history", history_json(r.history)}});
            }
            save_checkpoint(ckpt_path(job), c);
            return recs;
        });
    }

    // Out-of-domain inputs labelled by the frozen backbone; saved once.
    const Dataset<Real>& fake_set() {
        if (fake_) return *fake_;
        const Tensor<Real>& img = data().train.inputs.image;
        ModelInput<Real> src = gen_ood_rings<Real>(cfg_.copycat.source_size, img.dim(2), cfg_.copycat.source_seed);
        if (img.dim(1) != 3) {
            // collapse to the dataset's channel count by averaging
            Tensor<Real> g({src.batch(), img.dim(1), img.dim(2), img.dim(3)});
            const std::size_t plane = img.dim(2) * img.dim(3);
            for (std::size_t s = 0; s < src.batch(); ++s)
                for (std::size_t c = 0; c < img.dim(1); ++c)
                    for (std::size_t i = 0; i < plane; ++i)
                        g[(s * img.dim(1) + c) * plane + i] =
                            (src.image[(s * 3) * plane + i] + src.image[(s * 3 + 1) * plane + i] +
                             src.image[(s * 3 + 2) * plane + i]) / Real(3);
            src.image = g;
        }
        fake_ = generate_fake<Real>(*backbone(), src, "rings(seed=" + std::to_string(cfg_.copycat.source_seed) + ")");
        save_dataset(out_ / "data", "copycat_fake", *fake_);
        return *fake_;
    }

    // ---------------------------------------------------------- head ablation

    std::vector<Json> ablation() {
        auto bb = backbone();
        const std::size_t tap = bb->tap_index(cfg_.ablation.location);
        std::vector<Json> out;
        for (std::size_t h : cfg_.ablation.heads) {
            for (std::size_t s = 0; s < cfg_.ablation.seeds; ++s) {
                const std::string job = "ablation_h" + std::to_string(h) + "_s" + std::to_string(s);
                for (auto& r : run_job(job, [&] {
                         BranchConfig bc = branch_config("slvit", bb->taps()[tap], h);
                         const std::uint64_t seed = mix_seed(branch_seed(s), 300 + h);
                         Branch<Real> b(bc, seed);
                         note("ablation: " + std::to_string(h) + " heads (seed " + std::to_string(s) + ")");
                         const TrainHistory hist = train_branch(b, labeled_taps(taps("train"), tap, data().train),
                                                                labeled_taps(taps("val"), tap, data().val),
                                                                cfg_.recipe, mix_seed(seed, 1));
                         const EvalResult test = evaluate_branch(b, labeled_taps(taps("test"), tap, data().test));
                         Checkpoint c = checkpoint_base(job);
                         put_params(c, "branch/", b.params());
                         save_checkpoint(ckpt_path(job), c);
                         return Json::array({{{"record", "ablation"},
                                              {"location", bc.location},
                                              {"heads", h},
                                              {"d", bc.slvit.encoder.d},
                                              {"patch", bc.slvit.patch},
                                              {"seed_index", s},
                                              {"params", b.params().count()},
                                              {"params_closed_form", count_params(bc)},
                                              {"flops", count_flops(bc)},
                                              {"budget_feasible",
                                               budget_validate(bc, cnn_reference(bc, cfg_.cnn)).feasible},
                                              {"metric", to_string(hist.metric)},
                                              {"test_metric", test.metric},
                                              {"best_val_metric", hist.best_metric}}});
                     })) {
                    out.push_back(r);
                }
            }
        }
        return out;
    }

    // ---------------------------------------------------------- full run

    // Every stage in order; returns the records written to results.jsonl.
    std::vector<Json> run() {
        std::vector<Json> recs;
        recs.push_back({{"record", "run"},
                        {"name", cfg_.name},
                        {"config_hash", hash_},
                        {"seed", cfg_.seed},
                        {"config", strip_volatile(config_to_json(cfg_))}});
        backbone();
        for (auto& r : run_job_records("backbone")) recs.push_back(r);
        std::map<std::string, std::vector<MultiExitModel<Real>>> models;
        for (const auto& f : cfg_.families) {
            for (std::size_t r = 0; r < cfg_.repeats; ++r) models[f].push_back(family_model(f, r));
        }
        for (const auto& f : cfg_.families) {
            for (std::size_t r = 0; r < cfg_.repeats; ++r) {
                for (auto& x : run_job_records(f + "_r" + std::to_string(r))) recs.push_back(x);
            }
        }
        for (const auto& f : cfg_.families) recs.push_back(cost_record(f));
        for (const auto& f : cfg_.families) {
            for (std::size_t r = 0; r < cfg_.repeats; ++r) {
                auto& m = models[f][r];
                recs.push_back(exits_record(m, f, r));
                recs.push_back(budgeted_record(m, f, r));
                recs.push_back(anytime_record(m, f, r));
            }
        }
        if (cfg_.copycat.enabled) {
            for (std::size_t r = 0; r < cfg_.repeats; ++r) {
                for (auto& x : copycat(r)) recs.push_back(x);
            }
        }
        if (cfg_.ablation.enabled) {
            for (auto& x : ablation()) recs.push_back(x);
        }
        const Json summary = summarize(recs);
        for (const auto& row : summary.at("table")) recs.push_back(row);
        if (summary.contains("ablation")) recs.push_back(summary.at("ablation"));
        if (summary.contains("copycat")) recs.push_back(summary.at("copycat"));
        recs.push_back(summary.at("impractical"));
        write_file_atomic(out_ / "results.jsonl", to_jsonl(recs));
        write_file_atomic(out_ / "summary.json", summary.dump(2) + "\n");
        return recs;
    }

    // Comparison rows: per exit location and branch type, mean and
    // std of the test metric over repeats, with params, FLOPs and speedup.
    Json summarize(const std::vector<Json>& recs) {
        Json table = Json::array();
        std::string metric = classification() ? "accuracy" : "mae";
        for (const auto& r : recs) {
            if (r.at("record") == "backbone") {
                table.push_back({{"record", "table"},
                                 {"location", "final"},
                                 {"type", "backbone"},
                                 {"params", r.at("params")},
                                 {"flops", r.at("flops")},
                                 {"speedup", 1.0},
                                 {"metric", metric},
                                 {"mean", r.at("test_metric")},
                                 {"std", 0.0},
                                 {"n", 1}});
            }
        }
        Json impractical = {{"record", "impractical"}, {"metric", metric}, {"families", Json::object()}};
        for (const auto& f : cfg_.families) {
            std::vector<double> means;
            for (const auto& loc : cfg_.exits) {
                std::vector<double> vals;
                const Json* first = nullptr;
                for (const auto& r : recs) {
                    if (r.at("record") == "branch" && r.at("family") == f && r.at("location") == loc) {
                        vals.push_back(r.at("test_metric"));
                        if (!first) first = &r;
                    }
                }
                if (!first) continue;
                const MeanStd ms = mean_std(vals);
                means.push_back(ms.mean);
                table.push_back({{"record", "table"},
                                 {"location", loc},
                                 {"type", family_label(f)},
                                 {"params", first->at("params")},
                                 {"flops", first->at("flops")},
                                 {"cumulative_flops", first->at("cumulative_flops")},
                                 {"speedup", first->at("speedup")},
                                 {"budget_feasible", first->at("budget_feasible")},
                                 {"metric", metric},
                                 {"mean", ms.mean},
                                 {"std", ms.std},
                                 {"n", vals.size()}});
            }
            impractical["families"][f] = detect_impractical(means, classification());
        }
        Json out = {{"config_hash", hash_}, {"seed", cfg_.seed}, {"table", table}, {"impractical", impractical}};
        std::map<std::size_t, std::vector<double>> by_heads;
        std::map<std::size_t, Json> ab_first;
        for (const auto& r : recs) {
            if (r.at("record") == "ablation") {
                by_heads[r.at("heads")].push_back(r.at("test_metric"));
                ab_first.emplace(r.at("heads").get<std::size_t>(), r);
            }
        }
        if (!by_heads.empty()) {
            Json rows = Json::array();
            for (const auto& [h, v] : by_heads) {
                const MeanStd ms = mean_std(v);
                const Json& a = ab_first.at(h);
                rows.push_back({{"heads", h},
                                {"params", a.at("params")},
                                {"params_closed_form", a.at("params_closed_form")},
                                {"flops", a.at("flops")},
                                {"budget_feasible", a.at("budget_feasible")},
                                {"mean", ms.mean},
                                {"std", ms.std},
                                {"n", v.size()}});
            }
            out["ablation"] = {{"record", "ablation_report"}, {"location", cfg_.ablation.location},
                               {"d", cfg_.slvit.d},        {"metric", metric},
                               {"rows", rows}};
        }
        std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> cc;
        for (const auto& r : recs) {
            if (r.at("record") == "copycat") {
                auto& [pre, post] = cc[r.at("location").get<std::string>()];
                pre.push_back(r.at("pre_test_metric"));
                post.push_back(r.at("post_test_metric"));
            }
        }
        if (!cc.empty()) {
            Json rows = Json::array();
            for (const auto& loc : cfg_.exits) {
                if (!cc.count(loc)) continue;
                const auto& [pre, post] = cc.at(loc);
                const MeanStd a = mean_std(pre), b = mean_std(post);
                rows.push_back({{"location", loc},
                                {"slvit_mean", a.mean},
                                {"slvit_std", a.std},
                                {"cc_slvit_mean", b.mean},
                                {"cc_slvit_std", b.std},
                                {"n", pre.size()}});
            }
            out["copycat"] = {{"record", "copycat_report"}, {"ratio", {cfg_.copycat.fake, cfg_.copycat.real}},
                              {"rows", rows}};
        }
        return out;
    }

    std::vector<Json> run_job_records(const std::string& job) {
        const Json j = Json::parse(read_file(job_path(job)));
        return j.at("records").get<std::vector<Json>>();
    }

    Checkpoint checkpoint_base(const std::string& job) const {
        Checkpoint c;
        c.meta = {{"config_hash", hash_}, {"seed", cfg_.seed}, {"job", job}};
        return c;
    }

    std::filesystem::path ckpt_path(const std::string& job) const { return out_ / "ckpt" / (job + ".slvx"); }
    std::filesystem::path job_path(const std::string& job) const { return out_ / "jobs" / (job + ".json"); }

    const BackboneOutput<Real>& taps(const std::string& split) {
        auto it = tap_cache_.find(split);
        if (it != tap_cache_.end()) return it->second;
        const Dataset<Real>& d = split == "train" ? data().train : split == "val" ? data().val : data().test;
        return tap_cache_.emplace(split, compute_taps(*backbone(), d.inputs)).first->second;
    }

    ExitOptions exit_options() const {
        return {confidence_mode_from_string(cfg_.policy.confidence), cfg_.policy.flops_per_second};
    }

   private:
    static std::string family_label(const std::string& f) {
        if (f == "cnn") return "CNN";
        if (f == "av_slvit") return "AV-SL-ViT";
        return "SL-ViT";
    }

    static Json strip_volatile(Json j) {
        j.erase("output_dir");
        return j;
    }

    MiniAVConfig mini_av_config() {
        MiniAVConfig m;
        m.image_size = data().train.inputs.image.dim(2);
        m.spec_size = data().train.inputs.audio->dim(2);
        m.visual_channels = cfg_.backbone.visual_channels;
        m.audio_channels = cfg_.backbone.audio_channels;
        return m;
    }

    // Architecture-only questions (shapes, costs) do not need training.
    std::shared_ptr<Backbone<Real>> backbone_or_fresh() {
        if (backbone_) return backbone_;
        if (!arch_) arch_ = fresh_backbone(0);
        return arch_;
    }

    template <typename F>
    std::vector<Json> run_job(const std::string& job, F&& fn) {
        const auto path = job_path(job);
        if (std::filesystem::exists(path)) {
            const Json j = Json::parse(read_file(path));
            if (j.at("config_hash") != hash_) {
                throw IoError(path.string() + ": config hash mismatch (job " + j.at("config_hash").get<std::string>() +
                              ", config " + hash_ + "); use a fresh output_dir");
            }
            if (j.at("seed") != cfg_.seed) {
                throw IoError(path.string() + ": seed mismatch (job " + j.at("seed").dump() + ", requested " +
                              std::to_string(cfg_.seed) + ")");
            }
            return j.at("records").get<std::vector<Json>>();
        }
        if (opt_.stop_after && new_jobs_ >= *opt_.stop_after) {
            throw RunInterrupted("stopped after " + std::to_string(new_jobs_) + " new job(s); rerun to resume");
        }
        const Json records = fn();
        write_file_atomic(path, Json{{"config_hash", hash_}, {"seed", cfg_.seed}, {"job", job}, {"records", records}}
                                        .dump() +
                                    "\n");
        ++new_jobs_;
        return records.get<std::vector<Json>>();
    }

    void note(const std::string& msg) const {
        if (!opt_.quiet) std::cerr << "[" << cfg_.name << "] " << msg << "\n";
    }

    ExperimentConfig cfg_;
    std::string hash_;
    std::filesystem::path out_;
    RunOptions opt_;
    std::optional<Splits<Real>> splits_;
    std::shared_ptr<Backbone<Real>> backbone_, arch_;
    std::map<std::string, BackboneOutput<Real>> tap_cache_;
    std::optional<Dataset<Real>> fake_;
    std::size_t new_jobs_ = 0;
};

}  // namespace slvit
