#pragma once

// Parameter and FLOP accounting.
//
// FLOP convention (all counts are exact integers, computed from shapes):
//
//   layer                       FLOPs
//   ------------------------    -----------------------------------------
//   conv k x k (any dilation)   2 * k^2 * C_in * C_out * H_out * W_out
//   affine in -> out            2 * in * out per row
//   attention scores, per head  2 * n^2 * dk   (Q K^T)
//   weighted sum, per head      2 * n^2 * dv   (A V)
//   score scaling, softmax      1 per score element each
//   relu, gelu, layer/batch     1 per element
//     norm, residual add,
//     positional add
//   FiLM modulation             2 per element (multiply, add)
//   max pool                    1 per input element
//   global average pool         1 per input element
//   reshape, patchify, concat,  0
//   tiling, dropout (inference)
//
// Bias additions are folded into the multiply-accumulate count.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvit/branch_config.hpp"

namespace slvit {

using Flops = std::uint64_t;

struct FlopsConvention {
    static constexpr Flops mac_cost = 2;
    static constexpr Flops elementwise_cost = 1;
};

inline Flops conv_flops(std::size_t k, std::size_t c_in, std::size_t c_out, std::size_t h_out,
                        std::size_t w_out) {
    return FlopsConvention::mac_cost * k * k * c_in * c_out * h_out * w_out;
}
inline Flops affine_flops(std::size_t in, std::size_t out, std::size_t rows = 1) {
    return FlopsConvention::mac_cost * in * out * rows;
}
inline Flops elementwise_flops(std::size_t elements) {
    return FlopsConvention::elementwise_cost * elements;
}

// One multi-head attention block over n tokens of width d.
inline Flops attention_flops(std::size_t n, const EncoderConfig& c) {
    const Flops per_head = affine_flops(c.d, c.dk, n) * 2 + affine_flops(c.d, c.dv, n) +
                           FlopsConvention::mac_cost * n * n * c.dk + elementwise_flops(n * n) * 2 +
                           FlopsConvention::mac_cost * n * n * c.dv;
    return c.heads * per_head + affine_flops(c.heads * c.dv, c.d, n);
}

// Pre-norm encoder layer over n tokens (inference mode).
inline Flops encoder_flops(std::size_t n, const EncoderConfig& c) {
    const std::size_t elems = n * c.d;
    Flops f = elementwise_flops(elems);            // ln1
    f += attention_flops(n, c);
    f += elementwise_flops(elems);                 // first residual
    f += elementwise_flops(elems);                 // ln2
    f += affine_flops(c.d, c.mlp_hidden, n);
    f += elementwise_flops(n * c.mlp_hidden);      // gelu
    f += affine_flops(c.mlp_hidden, c.d, n);
    if (c.second_residual) f += elementwise_flops(elems);
    return f;
}

inline std::uint64_t head_param_count(std::size_t flat_in, const HeadConfig& h, std::size_t out) {
    return static_cast<std::uint64_t>(flat_in) * h.hidden + h.hidden + h.hidden * out + out;
}

inline Flops head_flops(std::size_t flat_in, const HeadConfig& h, std::size_t out) {
    return affine_flops(flat_in, h.hidden) + elementwise_flops(h.hidden) + affine_flops(h.hidden, out);
}

// Closed-form parameter count of a branch.
inline std::uint64_t count_params(const BranchConfig& cfg) {
    cfg.validate();
    const FeatureShape& in = cfg.input;
    std::uint64_t n = 0;
    if (cfg.is_transformer()) {
        const EncoderConfig& e = cfg.slvit.encoder;
        n += cfg.patch_dim() * e.d + e.d;          // patch projection
        n += cfg.tokens() * e.d;                   // positional embedding
        if (cfg.kind == BranchKind::av_slvit) {
            n += in.audio_dim * e.d + e.d + e.d;   // audio projection + its position
        }
        n += encoder_param_count(e);
    } else {
        const std::size_t f = cfg.cnn.filters;
        n += kCnnKernel * kCnnKernel * in.channels * f + f;
        if (cfg.cnn.film) n += 2 * (in.audio_dim * f + f);
    }
    n += head_param_count(cfg.head_input(), cfg.head, cfg.out_dim);
    return n;
}

// FLOPs of the branch alone for one sample.
inline Flops count_flops(const BranchConfig& cfg) {
    cfg.validate();
    const FeatureShape& in = cfg.input;
    Flops f = 0;
    if (cfg.is_transformer()) {
        const EncoderConfig& e = cfg.slvit.encoder;
        const std::size_t n = cfg.tokens();
        f += affine_flops(cfg.patch_dim(), e.d, n) + elementwise_flops(n * e.d);
        std::size_t seq = n;
        if (cfg.kind == BranchKind::av_slvit) {
            f += affine_flops(in.audio_dim, e.d) + elementwise_flops(e.d);
            seq += 1;
        }
        f += encoder_flops(seq, e);
    } else {
        const std::size_t fl = cfg.cnn.filters, plane = in.height * in.width;
        f += conv_flops(kCnnKernel, in.channels, fl, in.height, in.width);
        if (cfg.cnn.film) {
            f += 2 * affine_flops(in.audio_dim, fl) + 2 * elementwise_flops(fl * plane);
        }
        f += elementwise_flops(fl * plane);  // relu
        f += elementwise_flops(fl * plane);  // max pool reads every input cell
    }
    f += head_flops(cfg.head_input(), cfg.head, cfg.out_dim);
    return f;
}

inline double speedup(double backbone_flops, double cumulative_flops) {
    if (!(backbone_flops > 0) || !(cumulative_flops > 0)) {
        throw std::invalid_argument("speedup: FLOP counts must be positive");
    }
    return backbone_flops / cumulative_flops;
}

// ------------------------------------------------------------------- metrics

enum class Metric { accuracy, mae, mse };

inline const char* to_string(Metric m) {
    switch (m) {
        case Metric::accuracy: return "accuracy";
        case Metric::mae: return "mae";
        case Metric::mse: return "mse";
    }
    return "?";
}

inline bool higher_is_better(Metric m) { return m == Metric::accuracy; }

inline double accuracy(std::span<const int> predicted, std::span<const int> labels) {
    if (predicted.size() != labels.size() || labels.empty()) {
        throw std::invalid_argument("accuracy: size mismatch or empty input");
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline double mean_absolute_error(std::span<const double> pred, std::span<const double> target) {
    if (pred.size() != target.size() || pred.empty()) {
        throw std::invalid_argument("mae: size mismatch or empty input");
    }
    double acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - target[i]);
    return acc / static_cast<double>(pred.size());
}

inline double mean_squared_error(std::span<const double> pred, std::span<const double> target) {
    if (pred.size() != target.size() || pred.empty()) {
        throw std::invalid_argument("mse: size mismatch or empty input");
    }
    double acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
    return acc / static_cast<double>(pred.size());
}

// Per-exit cost row. The final exit has branch_params == 0.
struct ExitCost {
    std::string location;
    std::string kind;
    std::uint64_t branch_params = 0;
    Flops branch_flops = 0;
    Flops cumulative_flops = 0;
    double speedup = 1.0;
    bool budget_feasible = true;
};

struct CostReport {
    Flops backbone_total_flops = 0;
    std::uint64_t backbone_params = 0;
    std::vector<ExitCost> exits;
};

}  // namespace slvit
