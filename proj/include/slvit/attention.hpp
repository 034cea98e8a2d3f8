#pragma once

// Scaled dot-product self-attention, multi-head attention and the pre-norm
// transformer encoder layer.

#include <cmath>
#include <string>
#include <vector>

#include "slvit/ops.hpp"
#include "slvit/param_set.hpp"

namespace slvit {

struct EncoderConfig {
    std::size_t d = 32;
    std::size_t heads = 4;
    std::size_t dk = 32;
    std::size_t dv = 32;
    std::size_t mlp_hidden = 64;
    bool second_residual = true;
    std::size_t layers = 1;
    double dropout = 0.1;

    // Heads are full width (dk = dv = d) unless set otherwise.
    static EncoderConfig full_width(std::size_t d, std::size_t heads, bool second_residual = true,
                                    double dropout = 0.1) {
        return EncoderConfig{d, heads, d, d, 2 * d, second_residual, 1, dropout};
    }

    void validate() const {
        if (d == 0 || heads == 0 || dk == 0 || dv == 0 || mlp_hidden == 0) {
            throw std::invalid_argument("EncoderConfig: all dimensions must be positive");
        }
        if (layers != 1) {
            throw std::invalid_argument("EncoderConfig: only single-layer encoders are supported");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) {
            throw std::invalid_argument("EncoderConfig: dropout must lie in [0, 1)");
        }
    }

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

template <typename T>
struct AttentionHead {
    Tensor<T> wq, wk, wv;  // [d, dk], [d, dk], [d, dv]
    Tensor<T> bq, bk, bv;  // [dk], [dk], [dv]

    std::size_t d() const { return wq.dim(0); }
    std::size_t dk() const { return wq.dim(1); }
    std::size_t dv() const { return wv.dim(1); }
};

template <typename T>
struct MultiHeadAttention {
    std::vector<AttentionHead<T>> heads;
    Tensor<T> wout;  // [h * dv, d]
    Tensor<T> bout;  // [d]
};

inline std::string head_path(const std::string& prefix, std::size_t i) {
    return prefix + ".head" + std::to_string(i);
}

template <typename T>
void add_attention_params(ParamSet<T>& params, const std::string& prefix, const EncoderConfig& cfg,
                          Rng& rng) {
    for (std::size_t i = 0; i < cfg.heads; ++i) {
        const std::string p = head_path(prefix, i);
        params.add(p + ".wq", init_truncated_normal<T>({cfg.d, cfg.dk}, kTransformerInitStd, rng));
        params.add(p + ".wk", init_truncated_normal<T>({cfg.d, cfg.dk}, kTransformerInitStd, rng));
        params.add(p + ".wv", init_truncated_normal<T>({cfg.d, cfg.dv}, kTransformerInitStd, rng));
        params.add(p + ".bq", Tensor<T>({cfg.dk}));
        params.add(p + ".bk", Tensor<T>({cfg.dk}));
        params.add(p + ".bv", Tensor<T>({cfg.dv}));
    }
    params.add(prefix + ".wout",
               init_truncated_normal<T>({cfg.heads * cfg.dv, cfg.d}, kTransformerInitStd, rng));
    params.add(prefix + ".bout", Tensor<T>({cfg.d}));
}

template <typename T>
MultiHeadAttention<T> attention_view(ParamSet<T>& params, const std::string& prefix,
                                     std::size_t heads) {
    MultiHeadAttention<T> mha;
    for (std::size_t i = 0; i < heads; ++i) {
        const std::string p = head_path(prefix, i);
        mha.heads.push_back({params.at(p + ".wq"), params.at(p + ".wk"), params.at(p + ".wv"),
                             params.at(p + ".bq"), params.at(p + ".bk"), params.at(p + ".bv")});
    }
    mha.wout = params.at(prefix + ".wout");
    mha.bout = params.at(prefix + ".bout");
    return mha;
}

namespace detail {
template <typename T>
Tensor<T> as_batched(const Tensor<T>& x) {
    if (x.rank() == 2) return reshape(x, {1, x.dim(0), x.dim(1)});
    require(x.rank() == 3, "attention: expected [n, d] or [B, n, d], got " + shape_str(x.shape()));
    return x;
}
}  // namespace detail

// Z = softmax(Q K^T / sqrt(dk)) V for one head. Accepts [n, d] or [B, n, d] and
// returns the same rank. If `weights` is given it receives the [B, n, n]
// attention matrix.
template <typename T>
Tensor<T> self_attention(const Tensor<T>& x, const AttentionHead<T>& head,
                         Tensor<T>* weights = nullptr) {
    const Tensor<T> xb = detail::as_batched(x);
    detail::require(xb.dim(2) == head.d(), "self_attention: input width " +
                                               std::to_string(xb.dim(2)) +
                                               " does not match head d " + std::to_string(head.d()));
    detail::require(xb.dim(1) >= 1, "self_attention: empty sequence");
    const Tensor<T> q = affine(xb, head.wq, head.bq);
    const Tensor<T> k = affine(xb, head.wk, head.bk);
    const Tensor<T> v = affine(xb, head.wv, head.bv);
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(head.dk()));
    const Tensor<T> attn = softmax(scale(bmm(q, k, /*transpose_b=*/true), inv_scale), 2);
    if (weights) *weights = attn;
    const Tensor<T> z = bmm(attn, v);
    return x.rank() == 2 ? reshape(z, {z.dim(1), z.dim(2)}) : z;
}

// Concatenates the head outputs to [.., n, h*dv] and projects back to d.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const MultiHeadAttention<T>& mha) {
    detail::require(!mha.heads.empty(), "multi_head_attention: no heads");
    std::vector<Tensor<T>> outs;
    outs.reserve(mha.heads.size());
    for (const auto& h : mha.heads) outs.push_back(self_attention(x, h));
    return affine(concat_last(outs), mha.wout, mha.bout);
}

template <typename T>
void add_encoder_params(ParamSet<T>& params, const std::string& prefix, const EncoderConfig& cfg,
                        Rng& rng) {
    cfg.validate();
    params.add(prefix + ".ln1.gamma", Tensor<T>({cfg.d}, T(1)));
    params.add(prefix + ".ln1.beta", Tensor<T>({cfg.d}));
    add_attention_params(params, prefix + ".mha", cfg, rng);
    params.add(prefix + ".ln2.gamma", Tensor<T>({cfg.d}, T(1)));
    params.add(prefix + ".ln2.beta", Tensor<T>({cfg.d}));
    params.add(prefix + ".mlp.w1",
               init_truncated_normal<T>({cfg.d, cfg.mlp_hidden}, kTransformerInitStd, rng));
    params.add(prefix + ".mlp.b1", Tensor<T>({cfg.mlp_hidden}));
    params.add(prefix + ".mlp.w2",
               init_truncated_normal<T>({cfg.mlp_hidden, cfg.d}, kTransformerInitStd, rng));
    params.add(prefix + ".mlp.b2", Tensor<T>({cfg.d}));
}

// Exact closed form for add_encoder_params.
inline std::uint64_t encoder_param_count(const EncoderConfig& c) {
    const std::uint64_t per_head = 2 * c.d * c.dk + c.d * c.dv + 2 * c.dk + c.dv;
    return 4 * c.d + c.heads * per_head + (c.heads * c.dv * c.d + c.d) +
           (c.d * c.mlp_hidden + c.mlp_hidden + c.mlp_hidden * c.d + c.d);
}

// Intermediate values of one encoder pass, kept for structural checks.
template <typename T>
struct EncoderTrace {
    Tensor<T> after_attention;  // X + MHA(LN1(X))
    Tensor<T> mlp_out;          // MLP(LN2(a))
};

// a = X + MHA(LN1(X)); out = [a +] MLP(LN2(a)). Only the second residual is
// optional.
template <typename T>
Tensor<T> encoder_forward(const Tensor<T>& x, const EncoderConfig& cfg, ParamSet<T>& params,
                          const std::string& prefix, bool training, Rng& rng,
                          EncoderTrace<T>* trace = nullptr) {
    cfg.validate();
    detail::require(x.rank() >= 2 && x.shape().back() == cfg.d,
                    "encoder_forward: input " + shape_str(x.shape()) + " does not match d=" +
                        std::to_string(cfg.d));
    const MultiHeadAttention<T> mha = attention_view(params, prefix + ".mha", cfg.heads);
    const Tensor<T> n1 = layer_norm(x, params.at(prefix + ".ln1.gamma"), params.at(prefix + ".ln1.beta"));
    const Tensor<T> a = add(x, multi_head_attention(n1, mha));
    const Tensor<T> n2 = layer_norm(a, params.at(prefix + ".ln2.gamma"), params.at(prefix + ".ln2.beta"));
    Tensor<T> hidden = gelu(affine(n2, params.at(prefix + ".mlp.w1"), params.at(prefix + ".mlp.b1")));
    hidden = dropout(hidden, cfg.dropout, training, rng);
    const Tensor<T> m = affine(hidden, params.at(prefix + ".mlp.w2"), params.at(prefix + ".mlp.b2"));
    Tensor<T> out = cfg.second_residual ? add(a, m) : m;
    for (T v : out.data()) {
        if (!std::isfinite(v)) throw NumericalError("encoder_forward: non-finite output");
    }
    if (trace) *trace = {a, m};
    return out;
}

}  // namespace slvit
