#pragma once

// Procedural datasets for desk-scale runs. All generators are pure
// functions of their arguments and seed.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "slvit/dataset.hpp"
#include "slvit/random.hpp"

namespace slvit {

struct GratingStyle {
    double noise = 0.35;
    double phase_jitter = 0.6;  // radians, uniform +-
};

// Oriented colour gratings: class k fixes orientation, spatial frequency and
// channel tint; samples vary in phase, contrast and pixel noise. Labels are
// balanced (counts differ by at most one) and shuffled.
template <typename T>
Dataset<T> gen_synthetic_cls(std::size_t n, std::size_t classes, std::size_t image_size, std::uint64_t seed,
                             const GratingStyle& style = {}) {
    if (classes < 2) throw std::invalid_argument("gen_synthetic_cls: need at least 2 classes");
    if (image_size < 4) throw std::invalid_argument("gen_synthetic_cls: image_size must be at least 4");
    Rng rng(seed);
    const std::size_t S = image_size;
    const double pi = std::numbers::pi;
    Dataset<T> ds;
    ds.provenance = "synthetic_cls(seed=" + std::to_string(seed) + ")";
    ds.inputs.image = Tensor<T>({n, 3, S, S});
    const std::vector<std::size_t> order = rng.permutation(n);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[order[i]] = static_cast<int>(i % classes);
    for (std::size_t s = 0; s < n; ++s) {
        const auto k = static_cast<std::size_t>(ds.labels[s]);
        const double theta = pi * static_cast<double>(k) / static_cast<double>(classes);
        const double freq = 2 * pi * (1.5 + static_cast<double>(k % 3)) / static_cast<double>(S);
        const double phase = rng.uniform(-style.phase_jitter, style.phase_jitter);
        const double amp = rng.uniform(0.8, 1.2);
        for (std::size_t c = 0; c < 3; ++c) {
            const double tint =
                0.6 + 0.4 * std::cos(2 * pi * static_cast<double>(k) / static_cast<double>(classes) + 2 * pi * c / 3.0);
            for (std::size_t y = 0; y < S; ++y) {
                for (std::size_t x = 0; x < S; ++x) {
                    const double u = std::cos(theta) * static_cast<double>(x) + std::sin(theta) * static_cast<double>(y);
                    const double v = amp * tint * std::cos(freq * u + phase) + style.noise * rng.normal();
                    ds.inputs.image[((s * 3 + c) * S + y) * S + x] = static_cast<T>(v);
                }
            }
        }
    }
    return ds;
}

// Out-of-domain source for copycat: concentric colour rings, a pattern
// family disjoint from the gratings. Inputs only.
template <typename T>
ModelInput<T> gen_ood_rings(std::size_t n, std::size_t image_size, std::uint64_t seed, double noise = 0.35) {
    Rng rng(seed);
    const std::size_t S = image_size;
    const double pi = std::numbers::pi;
    ModelInput<T> in;
    in.image = Tensor<T>({n, 3, S, S});
    for (std::size_t s = 0; s < n; ++s) {
        const double cx = rng.uniform(0, static_cast<double>(S)), cy = rng.uniform(0, static_cast<double>(S));
        const double period = rng.uniform(2.0, static_cast<double>(S) / 2);
        const double phase = rng.uniform(0, 2 * pi);
        double tint[3];
        for (double& t : tint) t = rng.uniform(-1, 1);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t y = 0; y < S; ++y) {
                for (std::size_t x = 0; x < S; ++x) {
                    const double r = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
                    const double v = tint[c] * std::cos(2 * pi * r / period + phase) + noise * rng.normal();
                    in.image[((s * 3 + c) * S + y) * S + x] = static_cast<T>(v);
                }
            }
        }
    }
    return in;
}

struct AvStyle {
    double degraded_fraction = 0.25;
    double blob_sigma = 0.8;
    double min_blob_distance = 3.0;
    double noise = 0.05;
    // degraded images: wide dim blobs under heavy noise
    double degraded_sigma = 2.5;
    double degraded_amplitude = 0.3;
    double degraded_noise = 0.3;
};

template <typename T>
struct SyntheticAv {
    Dataset<T> data;
    std::vector<std::uint8_t> degraded;  // 1 where the image was degraded
};

// Counting set: k Gaussian blobs in the image and k tone bands in a
// spectrogram-shaped array (frequency x time); label is k in [0, max_count].
// Exactly round(fraction * n) images are degraded, where only the audio
// still carries the count clearly.
template <typename T>
SyntheticAv<T> gen_synthetic_av(std::size_t n, std::size_t max_count, std::size_t image_size, std::size_t spec_size,
                                std::uint64_t seed, const AvStyle& style = {}) {
    if (max_count < 1) throw std::invalid_argument("gen_synthetic_av: max_count must be at least 1");
    if (spec_size < 2 * max_count) throw std::invalid_argument("gen_synthetic_av: spec_size too small for max_count");
    if (!(style.degraded_fraction >= 0 && style.degraded_fraction <= 1)) {
        throw std::invalid_argument("gen_synthetic_av: degraded_fraction must lie in [0, 1]");
    }
    const double margin = 1.0;
    const double room = static_cast<double>(image_size) - 2 * margin;
    Rng rng(seed);
    const std::size_t S = image_size, F = spec_size;
    SyntheticAv<T> out;
    Dataset<T>& ds = out.data;
    ds.provenance = "synthetic_av(seed=" + std::to_string(seed) + ")";
    ds.inputs.image = Tensor<T>({n, 3, S, S});
    ds.inputs.audio = Tensor<T>({n, 1, F, F});
    out.degraded.assign(n, 0);
    const auto n_degraded = static_cast<std::size_t>(std::llround(style.degraded_fraction * static_cast<double>(n)));
    const std::vector<std::size_t> perm = rng.permutation(n);
    for (std::size_t i = 0; i < n_degraded; ++i) out.degraded[perm[i]] = 1;

    const std::size_t slots = F / 2;  // candidate band rows, two apart
    for (std::size_t s = 0; s < n; ++s) {
        const std::size_t k = rng.below(max_count + 1);
        ds.counts.push_back(static_cast<double>(k));

        std::vector<std::pair<double, double>> centres;
        for (int tries = 0; centres.size() < k; ++tries) {
            if (tries > 10000) throw std::invalid_argument("gen_synthetic_av: image too small for max_count blobs");
            const double cx = margin + rng.uniform() * room, cy = margin + rng.uniform() * room;
            bool ok = true;
            for (const auto& [x, y] : centres) ok = ok && std::hypot(cx - x, cy - y) >= style.min_blob_distance;
            if (ok) centres.emplace_back(cx, cy);
        }
        const bool bad = out.degraded[s] != 0;
        const double sigma = bad ? style.degraded_sigma : style.blob_sigma;
        const double amp = bad ? style.degraded_amplitude : 1.0;
        const double noise = bad ? style.degraded_noise : style.noise;
        for (std::size_t y = 0; y < S; ++y) {
            for (std::size_t x = 0; x < S; ++x) {
                double v = 0;
                for (const auto& [cx, cy] : centres) {
                    const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                    v += amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                }
                for (std::size_t c = 0; c < 3; ++c) {
                    ds.inputs.image[((s * 3 + c) * S + y) * S + x] = static_cast<T>(v + noise * rng.normal());
                }
            }
        }

        std::vector<std::size_t> slot_order = rng.permutation(slots);
        for (std::size_t f = 0; f < F; ++f) {
            for (std::size_t t = 0; t < F; ++t) {
                double v = 0;
                for (std::size_t b = 0; b < k; ++b) {
                    const double row = 2.0 * static_cast<double>(slot_order[b]) + 0.5;
                    const double df = static_cast<double>(f) - row;
                    v += std::exp(-df * df / (2 * 0.49)) * (0.75 + 0.25 * std::cos(0.7 * static_cast<double>(t) + b));
                }
                (*ds.inputs.audio)[(s * F + f) * F + t] = static_cast<T>(v + style.noise * rng.normal());
            }
        }
    }
    return out;
}

}  // namespace slvit
