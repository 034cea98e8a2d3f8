#pragma once

// Backbones with named tap points. Once frozen a backbone always runs in
// inference mode, so its parameters and buffers never change and its tap
// activations are reproducible.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvit/branches.hpp"
#include "slvit/cost.hpp"
#include "slvit/ops.hpp"
#include "slvit/param_set.hpp"

namespace slvit {

template <typename T>
struct ModelInput {
    Tensor<T> image;                 // [B, C, H, W]
    std::optional<Tensor<T>> audio;  // [B, 1, Hs, Ws] spectrogram, audiovisual models only

    std::size_t batch() const { return image.dim(0); }
};

template <typename T>
ModelInput<T> gather(const ModelInput<T>& in, std::span<const std::size_t> rows) {
    ModelInput<T> out{gather_rows(in.image, rows), std::nullopt};
    if (in.audio) out.audio = gather_rows(*in.audio, rows);
    return out;
}

struct TapInfo {
    std::string name;
    FeatureShape shape;
    Flops prefix_flops = 0;  // backbone FLOPs needed to produce this tap, per sample
};

template <typename T>
struct BackboneOutput {
    std::vector<TapFeatures<T>> taps;  // aligned with Backbone::taps()
    Tensor<T> output;                  // [B, K] logits or [B, 1] counts
};

class FrozenBackboneError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

template <typename T>
class Backbone {
   public:
    virtual ~Backbone() = default;

    virtual std::string kind_name() const = 0;
    virtual const std::vector<TapInfo>& taps() const = 0;
    virtual Flops total_flops() const = 0;
    virtual OutKind out_kind() const = 0;
    virtual std::size_t out_dim() const = 0;

    BackboneOutput<T> forward(const ModelInput<T>& in, bool training, Rng& rng) {
        if (frozen_ && training) {
            throw FrozenBackboneError("backbone is frozen; forward must run in inference mode");
        }
        return do_forward(in, training, rng);
    }

    std::size_t tap_index(const std::string& name) const {
        const auto& t = taps();
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (t[i].name == name) return i;
        }
        throw std::out_of_range("backbone has no tap named '" + name + "'");
    }

    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }
    bool frozen() const { return frozen_; }
    void freeze() {
        params_.set_trainable(false);
        params_.release_grad();
        params_.zero_grad();
        frozen_ = true;
    }

   protected:
    virtual BackboneOutput<T> do_forward(const ModelInput<T>& in, bool training, Rng& rng) = 0;

    ParamSet<T> params_;
    bool frozen_ = false;
};

// Classification backbone: repeated [3x3 conv -> ReLU -> 2x2 max pool]
// blocks followed by a linear classifier. A tap follows every block.
struct ConvBackboneConfig {
    std::size_t in_channels = 3;
    std::size_t image_size = 16;
    std::vector<std::size_t> channels{32, 48, 64};
    std::size_t classes = 10;

    friend bool operator==(const ConvBackboneConfig&, const ConvBackboneConfig&) = default;
};

template <typename T>
class ConvBackbone final : public Backbone<T> {
   public:
    static constexpr std::size_t kPool = 2;

    ConvBackbone(ConvBackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        build_taps();
        Rng rng(seed);
        std::size_t c_in = cfg_.in_channels;
        for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
            const std::size_t c = cfg_.channels[i];
            const std::string p = block_name(i);
            this->params_.add(p + ".conv.w", init_fan_in_uniform<T>({c, c_in, 3, 3}, c_in * 9, rng));
            this->params_.add(p + ".conv.b", Tensor<T>({c}));
            c_in = c;
        }
        const std::size_t flat = feature_flat();
        this->params_.add("classifier.w", init_fan_in_uniform<T>({flat, cfg_.classes}, flat, rng));
        this->params_.add("classifier.b", Tensor<T>({cfg_.classes}));
    }

    // Wraps existing parameters (checkpoint load).
    ConvBackbone(ConvBackboneConfig cfg, ParamSet<T> params, bool frozen) : cfg_(std::move(cfg)) {
        build_taps();
        this->params_ = std::move(params);
        if (frozen) this->freeze();
    }

    const ConvBackboneConfig& config() const { return cfg_; }
    std::string kind_name() const override { return "conv"; }
    const std::vector<TapInfo>& taps() const override { return taps_; }
    Flops total_flops() const override { return total_flops_; }
    OutKind out_kind() const override { return OutKind::class_logits; }
    std::size_t out_dim() const override { return cfg_.classes; }

    static std::string block_name(std::size_t i) { return "block" + std::to_string(i + 1); }

   protected:
    BackboneOutput<T> do_forward(const ModelInput<T>& in, bool, Rng&) override {
        detail::require(in.image.rank() == 4 && in.image.dim(1) == cfg_.in_channels &&
                            in.image.dim(2) == cfg_.image_size && in.image.dim(3) == cfg_.image_size,
                        "ConvBackbone: unexpected input " + shape_str(in.image.shape()));
        BackboneOutput<T> out;
        Tensor<T> x = in.image;
        for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
            const std::string p = block_name(i);
            x = conv2d(x, this->params_.at(p + ".conv.w"),
                       std::optional<Tensor<T>>(this->params_.at(p + ".conv.b")), Padding::same);
            x = maxpool2d(relu(x), kPool);
            out.taps.push_back({x, std::nullopt});
        }
        out.output = affine(flatten(x), this->params_.at("classifier.w"), this->params_.at("classifier.b"));
        return out;
    }

   private:
    std::size_t feature_flat() const {
        std::size_t s = cfg_.image_size;
        for (std::size_t i = 0; i < cfg_.channels.size(); ++i) s /= kPool;
        return cfg_.channels.back() * s * s;
    }

    void build_taps() {
        if (cfg_.channels.empty() || cfg_.classes < 2) {
            throw std::invalid_argument("ConvBackbone: need at least one block and two classes");
        }
        std::size_t s = cfg_.image_size, c_in = cfg_.in_channels;
        Flops acc = 0;
        taps_.clear();
        for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
            if (s % kPool != 0) throw ShapeError("ConvBackbone: image size not divisible by pooling");
            const std::size_t c = cfg_.channels[i];
            acc += conv_flops(3, c_in, c, s, s) + elementwise_flops(c * s * s) * 2;
            s /= kPool;
            taps_.push_back({block_name(i), {c, s, s, 0}, acc});
            c_in = c;
        }
        total_flops_ = acc + affine_flops(c_in * s * s, cfg_.classes);
    }

    ConvBackboneConfig cfg_;
    std::vector<TapInfo> taps_;
    Flops total_flops_ = 0;
};

}  // namespace slvit
