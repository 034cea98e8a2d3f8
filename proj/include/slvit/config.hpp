#pragma once

// Experiment configuration. Parsing is strict: unknown keys and wrong types
// are errors, missing keys take the defaults below.

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvit/io.hpp"
#include "slvit/runtime.hpp"

namespace slvit {

class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

struct DataConfig {
    std::string kind = "synthetic_cls";  // synthetic_cls | synthetic_av | idx | slvt
    std::uint64_t seed = 1;
    std::size_t train = 2000;
    std::size_t val = 500;
    std::size_t test = 500;
    // synthetic_cls
    std::size_t classes = 10;
    std::size_t image_size = 16;
    double noise = 0.35;
    // synthetic_av
    std::size_t max_count = 6;
    std::size_t spec_size = 16;
    double degraded_fraction = 0.25;
    // idx: MNIST-style files; val is carved from the shuffled training set
    std::string train_images, train_labels, test_images, test_labels;
    // slvt: directory written by gen-data
    std::string dir;

    bool counting() const { return kind == "synthetic_av"; }
};

struct BackboneSpec {
    std::string kind = "conv";  // conv | mini_av
    std::vector<std::size_t> channels{32, 48, 64};
    std::vector<std::size_t> visual_channels{8, 16, 16};
    std::vector<std::size_t> audio_channels{8, 16};
};

struct SlvitSpec {
    std::size_t patch = 4;  // 0 = pick from the budget grid
    std::size_t d = 32;
    std::size_t heads = 4;
    bool second_residual = true;
    double dropout = 0.1;
};

struct PolicySpec {
    std::vector<double> taus{0.0, 0.2, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.01};
    std::vector<double> budgets_s{};  // empty: one budget per exit latency plus midpoints
    double flops_per_second = 1e9;
    std::string confidence = "max_prob";
};

struct CopycatSpec {
    bool enabled = false;
    std::uint64_t fake = 2;
    std::uint64_t real = 1;
    std::size_t source_size = 1000;
    std::uint64_t source_seed = 7;
    TrainRecipe recipe{};
};

struct AblationSpec {
    bool enabled = false;
    std::string location = "block1";
    std::vector<std::size_t> heads{4, 8, 12, 16};
    std::size_t seeds = 1;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 0;
    std::size_t repeats = 5;
    std::string output_dir = "out";
    DataConfig data;
    BackboneSpec backbone;
    TrainRecipe backbone_recipe{1e-3, 0.6, 2, 5, 32, 15};
    double backbone_target = 0.0;  // minimum test metric (accuracy) required before freezing; 0 = none
    std::vector<std::string> exits{"block1"};
    std::vector<std::string> families{"cnn", "slvit"};
    CnnBranchConfig cnn;
    SlvitSpec slvit;
    HeadConfig head;
    TrainRecipe recipe{};
    PolicySpec policy;
    CopycatSpec copycat;
    AblationSpec ablation;
};

// ------------------------------------------------------------ strict reader

namespace detail {

class Obj {
   public:
    Obj(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
    }
    ~Obj() = default;

    template <typename V>
    void get(const std::string& key, V& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const Json& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<V, bool>) {
                if (!v.is_boolean()) throw ConfigError("");
            } else if constexpr (std::is_integral_v<V>) {
                if (!v.is_number_integer() || (std::is_unsigned_v<V> && v.get<std::int64_t>() < 0 && !v.is_number_unsigned())) {
                    throw ConfigError("");
                }
            } else if constexpr (std::is_floating_point_v<V>) {
                if (!v.is_number()) throw ConfigError("");
            } else if constexpr (std::is_same_v<V, std::string>) {
                if (!v.is_string()) throw ConfigError("");
            }
            out = v.get<V>();
        } catch (const std::exception&) {
            throw ConfigError(where_ + "." + key + ": wrong type (" + v.dump() + ")");
        }
    }

    const Json* child(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
        }
    }

   private:
    const Json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

inline void read_recipe(const Json& j, TrainRecipe& r, const std::string& where) {
    Obj o(j, where);
    o.get("lr", r.lr);
    o.get("plateau_factor", r.plateau_factor);
    o.get("plateau_patience", r.plateau_patience);
    o.get("stop_patience", r.stop_patience);
    o.get("batch_size", r.batch_size);
    o.get("max_epochs", r.max_epochs);
    o.finish();
    if (!(r.lr > 0) || r.batch_size == 0 || !(r.plateau_factor > 0 && r.plateau_factor <= 1)) {
        throw ConfigError(where + ": lr and batch_size must be positive, plateau_factor in (0, 1]");
    }
}

inline Json recipe_json(const TrainRecipe& r) {
    return {{"lr", r.lr},
            {"plateau_factor", r.plateau_factor},
            {"plateau_patience", r.plateau_patience},
            {"stop_patience", r.stop_patience},
            {"batch_size", r.batch_size},
            {"max_epochs", r.max_epochs}};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& j) {
    using detail::Obj;
    ExperimentConfig c;
    Obj top(j, "config");
    top.get("name", c.name);
    top.get("seed", c.seed);
    top.get("repeats", c.repeats);
    top.get("output_dir", c.output_dir);
    top.get("backbone_target", c.backbone_target);
    top.get("exits", c.exits);
    top.get("families", c.families);
    if (const Json* d = top.child("data")) {
        Obj o(*d, "data");
        DataConfig& x = c.data;
        o.get("kind", x.kind);
        o.get("seed", x.seed);
        o.get("train", x.train);
        o.get("val", x.val);
        o.get("test", x.test);
        o.get("classes", x.classes);
        o.get("image_size", x.image_size);
        o.get("noise", x.noise);
        o.get("max_count", x.max_count);
        o.get("spec_size", x.spec_size);
        o.get("degraded_fraction", x.degraded_fraction);
        o.get("train_images", x.train_images);
        o.get("train_labels", x.train_labels);
        o.get("test_images", x.test_images);
        o.get("test_labels", x.test_labels);
        o.get("dir", x.dir);
        o.finish();
    }
    if (const Json* b = top.child("backbone")) {
        Obj o(*b, "backbone");
        o.get("kind", c.backbone.kind);
        o.get("channels", c.backbone.channels);
        o.get("visual_channels", c.backbone.visual_channels);
        o.get("audio_channels", c.backbone.audio_channels);
        o.finish();
    }
    if (const Json* r = top.child("backbone_recipe")) detail::read_recipe(*r, c.backbone_recipe, "backbone_recipe");
    if (const Json* r = top.child("recipe")) detail::read_recipe(*r, c.recipe, "recipe");
    if (const Json* b = top.child("cnn")) {
        Obj o(*b, "cnn");
        o.get("filters", c.cnn.filters);
        o.get("pool", c.cnn.pool);
        o.get("film", c.cnn.film);
        o.finish();
    }
    if (const Json* b = top.child("slvit")) {
        Obj o(*b, "slvit");
        o.get("patch", c.slvit.patch);
        o.get("d", c.slvit.d);
        o.get("heads", c.slvit.heads);
        o.get("second_residual", c.slvit.second_residual);
        o.get("dropout", c.slvit.dropout);
        o.finish();
    }
    if (const Json* b = top.child("head")) {
        Obj o(*b, "head");
        o.get("hidden", c.head.hidden);
        o.get("dropout", c.head.dropout);
        o.finish();
    }
    if (const Json* b = top.child("policy")) {
        Obj o(*b, "policy");
        o.get("taus", c.policy.taus);
        o.get("budgets_s", c.policy.budgets_s);
        o.get("flops_per_second", c.policy.flops_per_second);
        o.get("confidence", c.policy.confidence);
        o.finish();
    }
    if (const Json* b = top.child("copycat")) {
        Obj o(*b, "copycat");
        o.get("enabled", c.copycat.enabled);
        o.get("fake", c.copycat.fake);
        o.get("real", c.copycat.real);
        o.get("source_size", c.copycat.source_size);
        o.get("source_seed", c.copycat.source_seed);
        if (const Json* r = o.child("recipe")) detail::read_recipe(*r, c.copycat.recipe, "copycat.recipe");
        o.finish();
    }
    if (const Json* b = top.child("ablation")) {
        Obj o(*b, "ablation");
        o.get("enabled", c.ablation.enabled);
        o.get("location", c.ablation.location);
        o.get("heads", c.ablation.heads);
        o.get("seeds", c.ablation.seeds);
        o.finish();
    }
    top.finish();

    const auto& k = c.data.kind;
    if (k != "synthetic_cls" && k != "synthetic_av" && k != "idx" && k != "slvt") {
        throw ConfigError("data.kind: unknown dataset kind '" + k + "'");
    }
    if (c.backbone.kind != "conv" && c.backbone.kind != "mini_av") {
        throw ConfigError("backbone.kind: unknown backbone '" + c.backbone.kind + "'");
    }
    if ((c.backbone.kind == "mini_av") != c.data.counting() && k != "slvt") {
        throw ConfigError("backbone.kind: mini_av goes with synthetic_av data, conv with classification data");
    }
    for (const auto& f : c.families) {
        if (f != "cnn" && f != "slvit" && f != "av_slvit") throw ConfigError("families: unknown family '" + f + "'");
    }
    if (c.exits.empty()) throw ConfigError("exits: at least one exit location is required");
    if (c.repeats == 0) throw ConfigError("repeats must be positive");
    if (!(c.policy.flops_per_second > 0)) throw ConfigError("policy.flops_per_second must be positive");
    try {
        confidence_mode_from_string(c.policy.confidence);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("policy.confidence: ") + e.what());
    }
    if (c.copycat.real == 0) throw ConfigError("copycat.real must be positive");
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    Json j;
    try {
        j = Json::parse(read_file(path));
    } catch (const Json::parse_error& e) {
        throw ConfigError(path.string() + ": not valid JSON (" + std::string(e.what()) + ")");
    }
    return config_from_json(j);
}

// Canonical form: every field, defaults filled in. output_dir and seed are
// left out of the hash (they do not change what a seed computes; the seed is
// stored next to the hash instead).
inline Json config_to_json(const ExperimentConfig& c) {
    const DataConfig& d = c.data;
    return {
        {"name", c.name},
        {"seed", c.seed},
        {"repeats", c.repeats},
        {"output_dir", c.output_dir},
        {"backbone_target", c.backbone_target},
        {"exits", c.exits},
        {"families", c.families},
        {"data",
         {{"kind", d.kind},
          {"seed", d.seed},
          {"train", d.train},
          {"val", d.val},
          {"test", d.test},
          {"classes", d.classes},
          {"image_size", d.image_size},
          {"noise", d.noise},
          {"max_count", d.max_count},
          {"spec_size", d.spec_size},
          {"degraded_fraction", d.degraded_fraction},
          {"train_images", d.train_images},
          {"train_labels", d.train_labels},
          {"test_images", d.test_images},
          {"test_labels", d.test_labels},
          {"dir", d.dir}}},
        {"backbone",
         {{"kind", c.backbone.kind},
          {"channels", c.backbone.channels},
          {"visual_channels", c.backbone.visual_channels},
          {"audio_channels", c.backbone.audio_channels}}},
        {"backbone_recipe", detail::recipe_json(c.backbone_recipe)},
        {"recipe", detail::recipe_json(c.recipe)},
        {"cnn", {{"filters", c.cnn.filters}, {"pool", c.cnn.pool}, {"film", c.cnn.film}}},
        {"slvit",
         {{"patch", c.slvit.patch},
          {"d", c.slvit.d},
          {"heads", c.slvit.heads},
          {"second_residual", c.slvit.second_residual},
          {"dropout", c.slvit.dropout}}},
        {"head", {{"hidden", c.head.hidden}, {"dropout", c.head.dropout}}},
        {"policy",
         {{"taus", c.policy.taus},
          {"budgets_s", c.policy.budgets_s},
          {"flops_per_second", c.policy.flops_per_second},
          {"confidence", c.policy.confidence}}},
        {"copycat",
         {{"enabled", c.copycat.enabled},
          {"fake", c.copycat.fake},
          {"real", c.copycat.real},
          {"source_size", c.copycat.source_size},
          {"source_seed", c.copycat.source_seed},
          {"recipe", detail::recipe_json(c.copycat.recipe)}}},
        {"ablation",
         {{"enabled", c.ablation.enabled},
          {"location", c.ablation.location},
          {"heads", c.ablation.heads},
          {"seeds", c.ablation.seeds}}},
    };
}

inline std::string config_hash(const ExperimentConfig& c) {
    Json j = config_to_json(c);
    j.erase("output_dir");
    j.erase("seed");
    const std::string s = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
}

}  // namespace slvit
