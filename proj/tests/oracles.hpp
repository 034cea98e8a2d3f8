#pragma once

// Reference implementations written as plain nested loops over std::vector.
// They share no code with the library kernels they are compared against.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline Vec random_vec(std::size_t n, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Vec v(n);
    for (auto& x : v) x = dist(gen);
    return v;
}

// [rows, in] x [in, out] + b
inline Vec affine(const Vec& x, const Vec& w, const Vec& b, std::size_t rows, std::size_t in,
                  std::size_t out) {
    Vec y(rows * out, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < out; ++j) {
            double acc = b.empty() ? 0.0 : b[j];
            for (std::size_t k = 0; k < in; ++k) acc += x[r * in + k] * w[k * out + j];
            y[r * out + j] = acc;
        }
    }
    return y;
}

// Cross-correlation with zero padding `pad` and dilation.
inline Vec conv2d(const Vec& x, const Vec& w, const Vec& b, std::size_t batch, std::size_t ch,
                  std::size_t h, std::size_t wd, std::size_t filters, std::size_t k, std::size_t pad,
                  std::size_t dil, std::size_t& ho, std::size_t& wo) {
    ho = h + 2 * pad - dil * (k - 1);
    wo = wd + 2 * pad - dil * (k - 1);
    Vec y(batch * filters * ho * wo, 0.0);
    for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t f = 0; f < filters; ++f)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    double acc = b.empty() ? 0.0 : b[f];
                    for (std::size_t c = 0; c < ch; ++c)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long iy = static_cast<long>(oy + ky * dil) - static_cast<long>(pad);
                                const long ix = static_cast<long>(ox + kx * dil) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd))
                                    continue;
                                acc += x[((s * ch + c) * h + iy) * wd + ix] * w[((f * ch + c) * k + ky) * k + kx];
                            }
                    y[((s * filters + f) * ho + oy) * wo + ox] = acc;
                }
    return y;
}

inline Vec maxpool(const Vec& x, std::size_t planes, std::size_t h, std::size_t w, std::size_t s) {
    Vec y(planes * (h / s) * (w / s));
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < h / s; ++oy)
            for (std::size_t ox = 0; ox < w / s; ++ox) {
                double m = -INFINITY;
                for (std::size_t dy = 0; dy < s; ++dy)
                    for (std::size_t dx = 0; dx < s; ++dx)
                        m = std::max(m, x[(p * h + oy * s + dy) * w + ox * s + dx]);
                y[(p * (h / s) + oy) * (w / s) + ox] = m;
            }
    return y;
}

inline Vec layer_norm(const Vec& x, const Vec& g, const Vec& b, std::size_t d) {
    Vec y(x.size());
    for (std::size_t r = 0; r < x.size() / d; ++r) {
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < d; ++j) mu += x[r * d + j] / d;
        for (std::size_t j = 0; j < d; ++j) var += (x[r * d + j] - mu) * (x[r * d + j] - mu) / d;
        for (std::size_t j = 0; j < d; ++j) y[r * d + j] = g[j] * (x[r * d + j] - mu) / std::sqrt(var + 1e-5) + b[j];
    }
    return y;
}

inline Vec softmax_rows(const Vec& x, std::size_t d) {
    Vec y(x.size());
    for (std::size_t r = 0; r < x.size() / d; ++r) {
        double z = 0;
        for (std::size_t j = 0; j < d; ++j) z += std::exp(x[r * d + j]);
        for (std::size_t j = 0; j < d; ++j) y[r * d + j] = std::exp(x[r * d + j]) / z;
    }
    return y;
}

inline double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

// Per-element self-attention for one sequence [n, d]:
// a_ij = q_i . k_j / sqrt(dk), normalised per row, z_i = sum_j a_ij v_j.
struct HeadWeights {
    Vec wq, wk, wv, bq, bk, bv;
    std::size_t d, dk, dv;
};

inline Vec attention_loop(const Vec& x, std::size_t n, const HeadWeights& h, Vec* weights = nullptr) {
    const Vec q = affine(x, h.wq, h.bq, n, h.d, h.dk);
    const Vec k = affine(x, h.wk, h.bk, n, h.d, h.dk);
    const Vec v = affine(x, h.wv, h.bv, n, h.d, h.dv);
    Vec z(n * h.dv, 0.0), a(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        double denom = 0;
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0;
            for (std::size_t t = 0; t < h.dk; ++t) dot += q[i * h.dk + t] * k[j * h.dk + t];
            a[i * n + j] = std::exp(dot / std::sqrt(static_cast<double>(h.dk)));
            denom += a[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) a[i * n + j] /= denom;
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t t = 0; t < h.dv; ++t) z[i * h.dv + t] += a[i * n + j] * v[j * h.dv + t];
    }
    if (weights) *weights = a;
    return z;
}

// Attention loop that counts arithmetic as it goes: each multiply-add pair
// is 2, each scale and each softmax output element is 1.
inline std::uint64_t attention_flops_instrumented(std::size_t n, std::size_t d, std::size_t dk,
                                                  std::size_t dv, std::size_t heads) {
    std::uint64_t flops = 0;
    std::mt19937_64 gen(5);
    const Vec x = random_vec(n * d, gen);
    auto counted_affine = [&](const Vec& in, std::size_t rows, std::size_t din, std::size_t dout) {
        const Vec w = random_vec(din * dout, gen);
        Vec y(rows * dout, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < dout; ++j)
                for (std::size_t t = 0; t < din; ++t) {
                    y[r * dout + j] += in[r * din + t] * w[t * dout + j];
                    flops += 2;
                }
        return y;
    };
    Vec concat;
    for (std::size_t hh = 0; hh < heads; ++hh) {
        const Vec q = counted_affine(x, n, d, dk);
        const Vec k = counted_affine(x, n, d, dk);
        const Vec v = counted_affine(x, n, d, dv);
        Vec s(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                for (std::size_t t = 0; t < dk; ++t) {
                    s[i * n + j] += q[i * dk + t] * k[j * dk + t];
                    flops += 2;
                }
                s[i * n + j] /= std::sqrt(static_cast<double>(dk));
                flops += 1;
            }
        const Vec a = softmax_rows(s, n);
        flops += n * n;
        Vec z(n * dv, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                for (std::size_t t = 0; t < dv; ++t) {
                    z[i * dv + t] += a[i * n + j] * v[j * dv + t];
                    flops += 2;
                }
        concat.insert(concat.end(), z.begin(), z.end());
    }
    // Re-interleave heads per row before projecting: [n, h*dv].
    Vec rows(n * heads * dv);
    for (std::size_t hh = 0; hh < heads; ++hh)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t t = 0; t < dv; ++t) rows[i * heads * dv + hh * dv + t] = concat[(hh * n + i) * dv + t];
    counted_affine(rows, n, heads * dv, d);
    return flops;
}

}  // namespace oracle
