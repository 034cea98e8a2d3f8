#pragma once

// Static description of an early-exit branch. Parameters live in Branch<T>
// (branches.hpp); everything here is shape-level and copyable.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "slvit/attention.hpp"

namespace slvit {

enum class BranchKind { cnn, slvit, av_slvit };
enum class OutKind { class_logits, scalar_count };

inline const char* to_string(BranchKind k) {
    switch (k) {
        case BranchKind::cnn: return "cnn";
        case BranchKind::slvit: return "slvit";
        case BranchKind::av_slvit: return "av_slvit";
    }
    return "?";
}

inline BranchKind branch_kind_from_string(const std::string& s) {
    if (s == "cnn") return BranchKind::cnn;
    if (s == "slvit") return BranchKind::slvit;
    if (s == "av_slvit") return BranchKind::av_slvit;
    throw std::invalid_argument("unknown branch kind '" + s + "'");
}

// Activation shape at a tap point, per sample. audio_dim > 0 means the tap
// also carries a pooled audio feature vector.
struct FeatureShape {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t audio_dim = 0;

    friend bool operator==(const FeatureShape&, const FeatureShape&) = default;
};

struct HeadConfig {
    std::size_t hidden = 128;
    double dropout = 0.1;

    friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

struct CnnBranchConfig {
    std::size_t filters = 32;
    std::size_t pool = 2;
    // On taps that carry audio, modulate the conv output with audio-derived
    // gamma/beta (non-dilated variant of the backbone fusion block).
    bool film = false;

    friend bool operator==(const CnnBranchConfig&, const CnnBranchConfig&) = default;
};

struct SlvitBranchConfig {
    std::size_t patch = 4;
    EncoderConfig encoder;

    friend bool operator==(const SlvitBranchConfig&, const SlvitBranchConfig&) = default;
};

inline constexpr std::size_t kCnnKernel = 3;

struct BranchConfig {
    std::string location;
    BranchKind kind = BranchKind::cnn;
    OutKind out_kind = OutKind::class_logits;
    std::size_t out_dim = 10;
    FeatureShape input;
    CnnBranchConfig cnn;
    SlvitBranchConfig slvit;
    HeadConfig head;

    bool is_transformer() const { return kind != BranchKind::cnn; }
    bool uses_audio() const {
        return kind == BranchKind::av_slvit || (kind == BranchKind::cnn && cnn.film);
    }

    std::size_t grid_h() const { return input.height / slvit.patch; }
    std::size_t grid_w() const { return input.width / slvit.patch; }
    // Visual tokens entering the encoder (the audio token is extra).
    std::size_t tokens() const { return grid_h() * grid_w(); }
    std::size_t patch_dim() const { return input.channels * slvit.patch * slvit.patch; }

    std::size_t head_input() const {
        if (is_transformer()) return tokens() * slvit.encoder.d;
        return cnn.filters * (input.height / cnn.pool) * (input.width / cnn.pool);
    }

    void validate() const {
        if (input.channels == 0 || input.height == 0 || input.width == 0) {
            throw std::invalid_argument("branch '" + location + "': empty input shape");
        }
        if (out_dim == 0 || head.hidden == 0) {
            throw std::invalid_argument("branch '" + location + "': zero-sized head");
        }
        if (out_kind == OutKind::scalar_count && out_dim != 1) {
            throw std::invalid_argument("branch '" + location + "': count output must be 1-d");
        }
        if (uses_audio() && input.audio_dim == 0) {
            throw std::invalid_argument("branch '" + location + "': audio fusion on a tap without audio");
        }
        if (is_transformer()) {
            const std::size_t p = slvit.patch;
            if (p == 0 || input.height % p != 0 || input.width % p != 0) {
                throw ShapeError("branch '" + location + "': patch size " + std::to_string(p) +
                                 " does not divide " + std::to_string(input.height) + "x" +
                                 std::to_string(input.width));
            }
            slvit.encoder.validate();
        } else {
            const std::size_t s = cnn.pool;
            if (cnn.filters == 0 || s == 0 || input.height % s != 0 || input.width % s != 0) {
                throw ShapeError("branch '" + location + "': pool " + std::to_string(s) +
                                 " does not divide " + std::to_string(input.height) + "x" +
                                 std::to_string(input.width));
            }
        }
    }

    friend bool operator==(const BranchConfig&, const BranchConfig&) = default;
};

// Patch sizes near sqrt(H), sqrt(W) that tile the feature map exactly:
// P | H, P | W and floor(sqrt(min)) - 2 <= P <= ceil(sqrt(max)) + 2.
inline std::vector<std::size_t> patch_size_candidates(std::size_t height, std::size_t width) {
    const auto lo_root = static_cast<long>(std::floor(std::sqrt(static_cast<double>(std::min(height, width)))));
    const auto hi_root = static_cast<long>(std::ceil(std::sqrt(static_cast<double>(std::max(height, width)))));
    const long lo = std::max(1L, lo_root - 2);
    const long hi = hi_root + 2;
    std::vector<std::size_t> out;
    for (long p = lo; p <= hi; ++p) {
        const auto up = static_cast<std::size_t>(p);
        if (height % up == 0 && width % up == 0) out.push_back(up);
    }
    return out;
}

}  // namespace slvit
