#pragma once

// Audio-conditioned feature modulation, v' = F(gamma * D(v) + beta), and a
// small audiovisual counting backbone built from it.

#include <string>
#include <utility>
#include <vector>

#include "slvit/backbone.hpp"
#include "slvit/ops.hpp"

namespace slvit {

// Broadcasts per-channel gamma/beta [B, C] over an H x W map.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> tile_params(const Tensor<T>& gamma, const Tensor<T>& beta,
                                            std::size_t height, std::size_t width) {
    return {tile_channels(gamma, height, width), tile_channels(beta, height, width)};
}

inline constexpr std::size_t kFusionDilation = 2;

template <typename T>
void add_fusion_params(ParamSet<T>& params, const std::string& p, std::size_t channels,
                       std::size_t audio_dim, Rng& rng) {
    params.add(p + ".conv.w", init_fan_in_uniform<T>({channels, channels, 3, 3}, channels * 9, rng));
    params.add(p + ".conv.b", Tensor<T>({channels}));
    params.add(p + ".bn.gamma", Tensor<T>({channels}, T(1)));
    params.add(p + ".bn.beta", Tensor<T>({channels}));
    params.add_buffer(p + ".bn.mean", Tensor<T>({channels}));
    params.add_buffer(p + ".bn.var", Tensor<T>({channels}, T(1)));
    params.add(p + ".gamma.w", init_fan_in_uniform<T>({audio_dim, channels}, audio_dim, rng));
    params.add(p + ".gamma.b", Tensor<T>({channels}, T(1)));
    params.add(p + ".beta.w", init_fan_in_uniform<T>({audio_dim, channels}, audio_dim, rng));
    params.add(p + ".beta.b", Tensor<T>({channels}));
}

// Dilated 3x3 conv (dilation 2, same padding) followed by batch norm.
template <typename T>
Tensor<T> fusion_conv(const Tensor<T>& v, ParamSet<T>& params, const std::string& p, bool training) {
    Tensor<T> d = conv2d(v, params.at(p + ".conv.w"), std::optional<Tensor<T>>(params.at(p + ".conv.b")),
                         Padding::same, kFusionDilation);
    return batch_norm2d(d, params.at(p + ".bn.gamma"), params.at(p + ".bn.beta"), params.at(p + ".bn.mean"),
                        params.at(p + ".bn.var"), training);
}

// ReLU(gamma_tiled * BN(D(v)) + beta_tiled) with per-sample gamma, beta [B, C].
template <typename T>
Tensor<T> film_fuse(const Tensor<T>& v, const Tensor<T>& gamma, const Tensor<T>& beta,
                    ParamSet<T>& params, const std::string& p, bool training) {
    detail::require(v.rank() == 4 && gamma.rank() == 2 && gamma.dim(1) == v.dim(1) &&
                        beta.shape() == gamma.shape() && gamma.dim(0) == v.dim(0),
                    "film_fuse: gamma/beta " + shape_str(gamma.shape()) + " do not match features " +
                        shape_str(v.shape()));
    const Tensor<T> d = fusion_conv(v, params, p, training);
    const auto [g, b] = tile_params(gamma, beta, d.dim(2), d.dim(3));
    return relu(add(mul(g, d), b));
}

// Projects the audio feature to gamma/beta and applies film_fuse.
template <typename T>
Tensor<T> fusion_block(const Tensor<T>& v, const Tensor<T>& audio, ParamSet<T>& params,
                       const std::string& p, bool training) {
    const Tensor<T> gamma = affine(audio, params.at(p + ".gamma.w"), params.at(p + ".gamma.b"));
    const Tensor<T> beta = affine(audio, params.at(p + ".beta.w"), params.at(p + ".beta.b"));
    return film_fuse(v, gamma, beta, params, p, training);
}

struct MiniAVConfig {
    std::size_t image_size = 32;
    std::size_t spec_size = 32;
    std::vector<std::size_t> visual_channels{8, 16, 16};
    std::vector<std::size_t> audio_channels{8, 16};
    std::size_t fusion_blocks = 2;

    std::size_t feature_size() const { return image_size / 4; }

    friend bool operator==(const MiniAVConfig&, const MiniAVConfig&) = default;
};

// Visual trunk (3 conv blocks, pooling after the first two), audio trunk
// (2 conv blocks + global average pool), fusion blocks, a 1x1 density conv
// and a count head that starts as a plain sum (weights 1, no bias).
//
// Taps: V1 = visual trunk output, AV1 = V1 plus the audio feature,
// AV2 = output of the first fusion block.
template <typename T>
class MiniAVBackbone final : public Backbone<T> {
   public:
    MiniAVBackbone(MiniAVConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        build_taps();
        Rng rng(seed);
        auto& P = this->params_;
        std::size_t c_in = 3;
        for (std::size_t i = 0; i < 3; ++i) {
            const std::size_t c = cfg_.visual_channels[i];
            const std::string p = "visual" + std::to_string(i + 1);
            P.add(p + ".conv.w", init_fan_in_uniform<T>({c, c_in, 3, 3}, c_in * 9, rng));
            P.add(p + ".conv.b", Tensor<T>({c}));
            c_in = c;
        }
        c_in = 1;
        for (std::size_t i = 0; i < 2; ++i) {
            const std::size_t c = cfg_.audio_channels[i];
            const std::string p = "audio" + std::to_string(i + 1);
            P.add(p + ".conv.w", init_fan_in_uniform<T>({c, c_in, 3, 3}, c_in * 9, rng));
            P.add(p + ".conv.b", Tensor<T>({c}));
            c_in = c;
        }
        const std::size_t vc = cfg_.visual_channels[2], ac = cfg_.audio_channels[1];
        for (std::size_t l = 0; l < cfg_.fusion_blocks; ++l) {
            add_fusion_params(P, "fusion" + std::to_string(l + 1), vc, ac, rng);
        }
        P.add("density.w", init_fan_in_uniform<T>({1, vc, 1, 1}, vc, rng));
        P.add("density.b", Tensor<T>({1}));
        const std::size_t hw = cfg_.feature_size() * cfg_.feature_size();
        P.add("count.w", Tensor<T>({hw, 1}, T(1)));
    }

    MiniAVBackbone(MiniAVConfig cfg, ParamSet<T> params, bool frozen) : cfg_(std::move(cfg)) {
        build_taps();
        this->params_ = std::move(params);
        if (frozen) this->freeze();
    }

    const MiniAVConfig& config() const { return cfg_; }
    std::string kind_name() const override { return "mini_av"; }
    const std::vector<TapInfo>& taps() const override { return taps_; }
    Flops total_flops() const override { return total_flops_; }
    OutKind out_kind() const override { return OutKind::scalar_count; }
    std::size_t out_dim() const override { return 1; }

   protected:
    BackboneOutput<T> do_forward(const ModelInput<T>& in, bool training, Rng&) override {
        detail::require(in.audio.has_value(), "MiniAVBackbone: spectrogram input required");
        detail::require(in.image.rank() == 4 && in.image.dim(1) == 3 && in.image.dim(2) == cfg_.image_size &&
                            in.image.dim(3) == cfg_.image_size,
                        "MiniAVBackbone: unexpected image " + shape_str(in.image.shape()));
        detail::require(in.audio->rank() == 4 && in.audio->dim(1) == 1 && in.audio->dim(2) == cfg_.spec_size &&
                            in.audio->dim(3) == cfg_.spec_size,
                        "MiniAVBackbone: unexpected spectrogram " + shape_str(in.audio->shape()));
        auto& P = this->params_;
        auto block = [&](const Tensor<T>& x, const std::string& p, bool pool) {
            Tensor<T> y = relu(conv2d(x, P.at(p + ".conv.w"), std::optional<Tensor<T>>(P.at(p + ".conv.b")),
                                      Padding::same));
            return pool ? maxpool2d(y, 2) : y;
        };
        Tensor<T> v = block(in.image, "visual1", true);
        v = block(v, "visual2", true);
        v = block(v, "visual3", false);
        Tensor<T> a = block(*in.audio, "audio1", true);
        a = global_avg_pool(block(a, "audio2", true));

        BackboneOutput<T> out;
        out.taps.push_back({v, std::nullopt});
        out.taps.push_back({v, a});
        for (std::size_t l = 0; l < cfg_.fusion_blocks; ++l) {
            v = fusion_block(v, a, P, "fusion" + std::to_string(l + 1), training);
            if (l == 0) out.taps.push_back({v, std::nullopt});
        }
        const Tensor<T> density = conv2d(v, P.at("density.w"), std::optional<Tensor<T>>(P.at("density.b")),
                                         Padding::same);
        out.output = linear(flatten(density), P.at("count.w"), std::optional<Tensor<T>>());
        return out;
    }

   private:
    void build_taps() {
        if (cfg_.visual_channels.size() != 3 || cfg_.audio_channels.size() != 2 || cfg_.fusion_blocks < 1) {
            throw std::invalid_argument("MiniAVConfig: need 3 visual blocks, 2 audio blocks, >= 1 fusion block");
        }
        if (cfg_.image_size % 4 != 0 || cfg_.spec_size % 4 != 0) {
            throw ShapeError("MiniAVConfig: image and spectrogram sizes must be divisible by 4");
        }
        const auto& vc = cfg_.visual_channels;
        const auto& ac = cfg_.audio_channels;
        std::size_t s = cfg_.image_size;
        Flops visual = 0;
        std::size_t c_in = 3;
        for (std::size_t i = 0; i < 3; ++i) {
            visual += conv_flops(3, c_in, vc[i], s, s) + elementwise_flops(vc[i] * s * s);
            if (i < 2) {
                visual += elementwise_flops(vc[i] * s * s);
                s /= 2;
            }
            c_in = vc[i];
        }
        std::size_t sa = cfg_.spec_size;
        Flops audio = 0;
        c_in = 1;
        for (std::size_t i = 0; i < 2; ++i) {
            audio += conv_flops(3, c_in, ac[i], sa, sa) + elementwise_flops(ac[i] * sa * sa) * 2;
            sa /= 2;
            c_in = ac[i];
        }
        audio += elementwise_flops(ac[1] * sa * sa);
        const std::size_t plane = s * s, c = vc[2];
        const Flops fusion = conv_flops(3, c, c, s, s) + elementwise_flops(c * plane) +
                             2 * affine_flops(ac[1], c) + elementwise_flops(c * plane) * 2 +
                             elementwise_flops(c * plane);
        const FeatureShape vis{c, s, s, 0};
        taps_ = {{"V1", vis, visual},
                 {"AV1", {c, s, s, ac[1]}, visual + audio},
                 {"AV2", vis, visual + audio + fusion}};
        total_flops_ = visual + audio + fusion * cfg_.fusion_blocks + conv_flops(1, c, 1, s, s) +
                       affine_flops(plane, 1);
    }

    MiniAVConfig cfg_;
    std::vector<TapInfo> taps_;
    Flops total_flops_ = 0;
};

// Count prediction plus the V1, AV1 and AV2 activations.
template <typename T>
BackboneOutput<T> mini_av_forward(const Tensor<T>& image, const Tensor<T>& spectrogram,
                                  MiniAVBackbone<T>& model, bool training, Rng& rng) {
    return model.forward(ModelInput<T>{image, spectrogram}, training, rng);
}

}  // namespace slvit
