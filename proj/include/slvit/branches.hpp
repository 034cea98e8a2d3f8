#pragma once

// Early-exit branches: the single-layer vision transformer exit and the
// conv -> pool -> MLP baseline. Both end in the same MLP head.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slvit/attention.hpp"
#include "slvit/branch_config.hpp"
#include "slvit/cost.hpp"
#include "slvit/ops.hpp"
#include "slvit/param_set.hpp"

namespace slvit {

// Activations handed to a branch: the visual feature map [B, C, H, W] and,
// on audiovisual taps, the pooled audio feature [B, A].
template <typename T>
struct TapFeatures {
    Tensor<T> visual;
    std::optional<Tensor<T>> audio;

    std::size_t batch() const { return visual.dim(0); }
};

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
    Shape shape = x.shape();
    if (shape.empty()) throw ShapeError("gather_rows: scalar has no rows");
    std::size_t stride = 1;
    for (std::size_t a = 1; a < shape.size(); ++a) stride *= shape[a];
    shape[0] = rows.size();
    std::vector<T> out(rows.size() * stride);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.dim(0)) throw std::out_of_range("gather_rows: row index out of range");
        std::copy_n(x.storage().begin() + rows[i] * stride, stride, out.begin() + i * stride);
    }
    return Tensor<T>(std::move(shape), std::move(out));
}

template <typename T>
TapFeatures<T> gather(const TapFeatures<T>& f, std::span<const std::size_t> rows) {
    TapFeatures<T> out{gather_rows(f.visual, rows), std::nullopt};
    if (f.audio) out.audio = gather_rows(*f.audio, rows);
    return out;
}

template <typename T>
void add_head_params(ParamSet<T>& params, const std::string& prefix, std::size_t flat_in,
                     const HeadConfig& h, std::size_t out_dim, Rng& rng) {
    params.add(prefix + ".fc1.w", init_fan_in_uniform<T>({flat_in, h.hidden}, flat_in, rng));
    params.add(prefix + ".fc1.b", Tensor<T>({h.hidden}));
    params.add(prefix + ".fc2.w", init_fan_in_uniform<T>({h.hidden, out_dim}, h.hidden, rng));
    params.add(prefix + ".fc2.b", Tensor<T>({out_dim}));
}

// affine -> ReLU -> dropout -> affine
template <typename T>
Tensor<T> mlp_head(const Tensor<T>& flat, ParamSet<T>& params, const std::string& prefix,
                   const HeadConfig& h, bool training, Rng& rng) {
    Tensor<T> hidden = relu(affine(flat, params.at(prefix + ".fc1.w"), params.at(prefix + ".fc1.b")));
    hidden = dropout(hidden, h.dropout, training, rng);
    return affine(hidden, params.at(prefix + ".fc2.w"), params.at(prefix + ".fc2.b"));
}

template <typename T>
class Branch {
   public:
    Branch(BranchConfig config, std::uint64_t seed) : config_(std::move(config)) {
        config_.validate();
        Rng rng(seed);
        const FeatureShape& in = config_.input;
        if (config_.is_transformer()) {
            const EncoderConfig& e = config_.slvit.encoder;
            params_.add("embed.proj.w",
                        init_truncated_normal<T>({config_.patch_dim(), e.d}, kTransformerInitStd, rng));
            params_.add("embed.proj.b", Tensor<T>({e.d}));
            params_.add("embed.pos", Tensor<T>({config_.tokens(), e.d}));
            if (config_.kind == BranchKind::av_slvit) {
                params_.add("audio.proj.w",
                            init_truncated_normal<T>({in.audio_dim, e.d}, kTransformerInitStd, rng));
                params_.add("audio.proj.b", Tensor<T>({e.d}));
                params_.add("audio.pos", Tensor<T>({1, e.d}));
            }
            add_encoder_params(params_, "encoder", e, rng);
        } else {
            const std::size_t f = config_.cnn.filters, fan_in = in.channels * kCnnKernel * kCnnKernel;
            params_.add("conv.w",
                        init_fan_in_uniform<T>({f, in.channels, kCnnKernel, kCnnKernel}, fan_in, rng));
            params_.add("conv.b", Tensor<T>({f}));
            if (config_.cnn.film) {
                params_.add("film.gamma.w", init_fan_in_uniform<T>({in.audio_dim, f}, in.audio_dim, rng));
                params_.add("film.gamma.b", Tensor<T>({f}, T(1)));
                params_.add("film.beta.w", init_fan_in_uniform<T>({in.audio_dim, f}, in.audio_dim, rng));
                params_.add("film.beta.b", Tensor<T>({f}));
            }
        }
        add_head_params(params_, "head", config_.head_input(), config_.head, config_.out_dim, rng);
    }

    Branch(BranchConfig config, ParamSet<T> params, bool trained)
        : config_(std::move(config)), params_(std::move(params)), trained_(trained) {
        config_.validate();
    }

    const BranchConfig& config() const { return config_; }
    ParamSet<T>& params() { return params_; }
    const ParamSet<T>& params() const { return params_; }
    bool trained() const { return trained_; }
    void mark_trained(bool on = true) { trained_ = on; }

    Branch clone() const { return Branch(config_, params_.clone(), trained_); }

    Tensor<T> forward(const TapFeatures<T>& in, bool training, Rng& rng);

   private:
    BranchConfig config_;
    ParamSet<T> params_;
    bool trained_ = false;
};

template <typename T>
std::uint64_t count_params(const ParamSet<T>& params) {
    return params.count();
}

template <typename T>
void check_tap_shape(const BranchConfig& cfg, const TapFeatures<T>& in) {
    const auto& v = in.visual;
    detail::require(v.rank() == 4 && v.dim(1) == cfg.input.channels && v.dim(2) == cfg.input.height &&
                        v.dim(3) == cfg.input.width,
                    "branch '" + cfg.location + "': tap features " + shape_str(v.shape()) +
                        " do not match configured input");
    if (cfg.uses_audio()) {
        detail::require(in.audio.has_value() && in.audio->rank() == 2 &&
                            in.audio->dim(1) == cfg.input.audio_dim,
                        "branch '" + cfg.location + "': missing or mis-sized audio feature");
    }
}

// [B, C, H, W] -> [B, n, d]: split into P x P patches, project, add positions.
template <typename T>
Tensor<T> patchify_embed(const Tensor<T>& features, std::size_t patch, ParamSet<T>& params,
                         const std::string& prefix = "embed") {
    const Tensor<T> patches = patchify(features, patch);
    const Tensor<T> proj = affine(patches, params.at(prefix + ".proj.w"), params.at(prefix + ".proj.b"));
    return add_broadcast(proj, params.at(prefix + ".pos"));
}

// Projects the audio feature [B, A] to one token [B, 1, d] with its own
// positional embedding and appends it after the visual tokens.
template <typename T>
Tensor<T> audio_token_append(const Tensor<T>& tokens, const Tensor<T>& audio, ParamSet<T>& params,
                             const std::string& prefix = "audio") {
    detail::require(tokens.rank() == 3 && audio.rank() == 2 && audio.dim(0) == tokens.dim(0),
                    "audio_token_append: expected [B, n, d] tokens and [B, A] audio");
    const std::size_t d = tokens.dim(2);
    Tensor<T> tok = affine(audio, params.at(prefix + ".proj.w"), params.at(prefix + ".proj.b"));
    tok = add_broadcast(reshape(tok, {audio.dim(0), 1, d}), params.at(prefix + ".pos"));
    return concat_rows(tokens, tok);
}

// Patch embedding -> one encoder layer -> flatten of every visual token ->
// MLP head. No class token is used.
template <typename T>
Tensor<T> slvit_forward(const TapFeatures<T>& in, Branch<T>& branch, bool training, Rng& rng) {
    const BranchConfig& cfg = branch.config();
    if (!cfg.is_transformer()) throw std::invalid_argument("slvit_forward: branch is not a transformer");
    check_tap_shape(cfg, in);
    ParamSet<T>& p = branch.params();
    const std::size_t n = cfg.tokens();
    Tensor<T> seq = patchify_embed(in.visual, cfg.slvit.patch, p);
    if (cfg.kind == BranchKind::av_slvit) seq = audio_token_append(seq, *in.audio, p);
    Tensor<T> enc = encoder_forward(seq, cfg.slvit.encoder, p, "encoder", training, rng);
    if (cfg.kind == BranchKind::av_slvit) enc = slice_rows(enc, 0, n);
    return mlp_head(flatten(enc), p, "head", cfg.head, training, rng);
}

// 3x3 same conv -> [FiLM] -> ReLU -> s x s max pool -> flatten -> MLP head.
template <typename T>
Tensor<T> cnn_forward(const TapFeatures<T>& in, Branch<T>& branch, bool training, Rng& rng) {
    const BranchConfig& cfg = branch.config();
    if (cfg.kind != BranchKind::cnn) throw std::invalid_argument("cnn_forward: branch is not a CNN");
    check_tap_shape(cfg, in);
    ParamSet<T>& p = branch.params();
    Tensor<T> x = conv2d(in.visual, p.at("conv.w"), std::optional<Tensor<T>>(p.at("conv.b")), Padding::same);
    if (cfg.cnn.film) {
        const std::size_t h = x.dim(2), w = x.dim(3);
        const Tensor<T> gamma = affine(*in.audio, p.at("film.gamma.w"), p.at("film.gamma.b"));
        const Tensor<T> beta = affine(*in.audio, p.at("film.beta.w"), p.at("film.beta.b"));
        x = add(mul(tile_channels(gamma, h, w), x), tile_channels(beta, h, w));
    }
    x = maxpool2d(relu(x), cfg.cnn.pool);
    return mlp_head(flatten(x), p, "head", cfg.head, training, rng);
}

template <typename T>
Tensor<T> Branch<T>::forward(const TapFeatures<T>& in, bool training, Rng& rng) {
    return config_.is_transformer() ? slvit_forward(in, *this, training, rng)
                                    : cnn_forward(in, *this, training, rng);
}

// ------------------------------------------------------------ budget search

struct BudgetReport {
    std::uint64_t slvit_params = 0;
    std::uint64_t cnn_params = 0;
    bool feasible = false;
};

// A transformer exit fits the budget when it has no more parameters than the
// CNN exit at the same location.
inline BudgetReport budget_validate(const BranchConfig& slvit, const BranchConfig& cnn_reference) {
    if (slvit.location != cnn_reference.location || slvit.out_dim != cnn_reference.out_dim ||
        slvit.input != cnn_reference.input) {
        throw std::invalid_argument("budget_validate: branches are not at the same location");
    }
    BudgetReport r{count_params(slvit), count_params(cnn_reference), false};
    r.feasible = r.slvit_params <= r.cnn_params;
    return r;
}

struct BudgetGrid {
    std::vector<std::size_t> patches{4, 5, 8};
    std::vector<std::size_t> dims{16, 32, 36};
    std::vector<std::size_t> heads{2, 4, 8, 12, 16, 24};
};

struct GridCandidate {
    BranchConfig config;
    BudgetReport budget;
    Flops flops = 0;
};

// Patch sizes from the grid that satisfy the tiling heuristic; when none do,
// every heuristic candidate of at least 2 is used instead.
inline std::vector<std::size_t> grid_patches(const FeatureShape& in, const BudgetGrid& grid) {
    const auto allowed = patch_size_candidates(in.height, in.width);
    std::vector<std::size_t> out;
    for (std::size_t p : grid.patches) {
        if (std::find(allowed.begin(), allowed.end(), p) != allowed.end()) out.push_back(p);
    }
    if (out.empty()) {
        for (std::size_t p : allowed) {
            if (p >= 2) out.push_back(p);
        }
    }
    return out;
}

// Enumerates (patch, d, h) around `slvit_template` and returns every
// configuration that fits the CNN budget, paired with its report.
inline std::vector<GridCandidate> budget_grid_search(const BranchConfig& slvit_template,
                                                     const BranchConfig& cnn_reference,
                                                     const BudgetGrid& grid = {}) {
    std::vector<GridCandidate> feasible;
    for (std::size_t p : grid_patches(slvit_template.input, grid)) {
        for (std::size_t d : grid.dims) {
            for (std::size_t h : grid.heads) {
                BranchConfig c = slvit_template;
                c.slvit.patch = p;
                c.slvit.encoder = EncoderConfig::full_width(d, h, slvit_template.slvit.encoder.second_residual,
                                                            slvit_template.slvit.encoder.dropout);
                const BudgetReport r = budget_validate(c, cnn_reference);
                if (r.feasible) feasible.push_back({c, r, count_flops(c)});
            }
        }
    }
    return feasible;
}

}  // namespace slvit
