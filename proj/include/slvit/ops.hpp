#pragma once

// Differentiable primitives. Every op validates shapes up front and throws
// ShapeError with the offending shapes on mismatch.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "slvit/random.hpp"
#include "slvit/tensor.hpp"

namespace slvit {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m,n] (+)= op(A) * op(B), all row-major. op(A) is m x k, op(B) is k x n.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
    using Map = Eigen::Map<const RowMat<T>>;
    Eigen::Map<RowMat<T>> cm(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate) {
            cm.noalias() += lhs * rhs;
        } else {
            cm.noalias() = lhs * rhs;
        }
    };
    if (!trans_a && !trans_b) {
        run(Map(a, M, K), Map(b, K, N));
    } else if (!trans_a && trans_b) {
        run(Map(a, M, K), Map(b, N, K).transpose());
    } else if (trans_a && !trans_b) {
        run(Map(a, K, M).transpose(), Map(b, K, N));
    } else {
        run(Map(a, K, M).transpose(), Map(b, N, K).transpose());
    }
}

// C[m,n] (+)= A[m,k] * B[k,n] with every row of C accumulated in the same
// order regardless of m, so a sample's result does not depend on which batch
// it is in. Eigen switches kernels with the row count and cannot promise that.
template <typename T>
void gemm_rows(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
               bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        if (!accumulate) std::fill_n(ci, n, T(0));
        const T* ai = a + i * k;
        for (std::size_t t = 0; t < k; ++t) {
            const T av = ai[t];
            const T* bt = b + t * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
        }
    }
}

template <typename T>
bool wants(const Node<T>& out, std::size_t i) {
    return out.parents[i]->requires_grad;
}

template <typename T>
std::span<T> grad_of(Node<T>& out, std::size_t i) {
    return out.parents[i]->grad_buffer();
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace detail

enum class Padding { same, valid };

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& o) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (!detail::wants(o, p)) continue;
            auto g = detail::grad_of(o, p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& o) {
        if (detail::wants(o, 0)) {
            auto g = detail::grad_of(o, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (detail::wants(o, 1)) {
            auto g = detail::grad_of(o, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& o) {
        const auto& av = o.parents[0]->data;
        const auto& bv = o.parents[1]->data;
        if (detail::wants(o, 0)) {
            auto g = detail::grad_of(o, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bv[i];
        }
        if (detail::wants(o, 1)) {
            auto g = detail::grad_of(o, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * av[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [s](Node<T>& o) {
        auto g = detail::grad_of(o, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
    });
}

// x + y where y's shape equals the trailing dimensions of x.
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& y) {
    const auto& xs = x.shape();
    const auto& ys = y.shape();
    detail::require(ys.size() <= xs.size() && std::equal(ys.rbegin(), ys.rend(), xs.rbegin()),
                    "add_broadcast: " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
    const std::size_t inner = y.size();
    const std::size_t outer = x.size() / inner;
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < outer; ++r) {
        for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] = x[r * inner + i] + y[i];
    }
    return Tensor<T>::make_result(xs, std::move(out), {x, y}, [inner, outer](Node<T>& o) {
        if (detail::wants(o, 0)) {
            auto g = detail::grad_of(o, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (detail::wants(o, 1)) {
            auto g = detail::grad_of(o, 1);
            for (std::size_t r = 0; r < outer; ++r) {
                for (std::size_t i = 0; i < inner; ++i) g[i] += o.grad[r * inner + i];
            }
        }
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](Node<T>& o) {
        const auto& xv = o.parents[0]->data;
        auto g = detail::grad_of(o, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xv[i] > T(0)) g[i] += o.grad[i];
        }
    });
}

// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](Node<T>& o) {
        constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
        const auto& xv = o.parents[0]->data;
        auto g = detail::grad_of(o, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T cdf = T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * xv[i] * xv[i]);
            g[i] += o.grad[i] * (cdf + xv[i] * pdf);
        }
    });
}

// Inverted dropout: survivors are scaled by 1/(1-rate) so inference is identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw std::invalid_argument("dropout: rate must lie in [0, 1), got " +
                                    std::to_string(rate));
    }
    if (!training || rate == 0.0) return x;
    const T keep_scale = T(1) / T(1.0 - rate);
    std::vector<T> mask(x.size());
    for (auto& m : mask) m = rng.bernoulli(rate) ? T(0) : keep_scale;
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
    return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                  [mask = std::move(mask)](Node<T>& o) {
                                      auto g = detail::grad_of(o, 0);
                                      for (std::size_t i = 0; i < g.size(); ++i) {
                                          g[i] += o.grad[i] * mask[i];
                                      }
                                  });
}

// ------------------------------------------------------------------ reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) acc += v;
    return Tensor<T>::make_result({1}, {acc}, {x}, [](Node<T>& o) {
        auto g = detail::grad_of(o, 0);
        for (auto& gi : g) gi += o.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// ------------------------------------------------------------------- reshaping

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    detail::require(numel(shape) == x.size(), "reshape: cannot view " + shape_str(x.shape()) +
                                                  " as " + shape_str(shape));
    return Tensor<T>::make_result(std::move(shape), x.storage(), {x}, [](Node<T>& o) {
        auto g = detail::grad_of(o, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
}

// [B, ...] -> [B, prod(...)]
template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
    detail::require(x.rank() >= 1, "flatten: rank-0 input");
    const std::size_t b = x.dim(0);
    return reshape(x, {b, x.size() / b});
}

// Concatenate [B, n, d] and [B, m, d] along the row axis.
template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
                    "concat_rows: incompatible " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
    const std::size_t batch = a.dim(0), n = a.dim(1), m = b.dim(1), d = a.dim(2);
    std::vector<T> out(batch * (n + m) * d);
    for (std::size_t s = 0; s < batch; ++s) {
        std::copy_n(a.storage().begin() + s * n * d, n * d, out.begin() + s * (n + m) * d);
        std::copy_n(b.storage().begin() + s * m * d, m * d, out.begin() + s * (n + m) * d + n * d);
    }
    return Tensor<T>::make_result({batch, n + m, d}, std::move(out), {a, b},
                                  [batch, n, m, d](Node<T>& o) {
                                      for (std::size_t s = 0; s < batch; ++s) {
                                          const T* src = o.grad.data() + s * (n + m) * d;
                                          if (detail::wants(o, 0)) {
                                              auto g = detail::grad_of(o, 0);
                                              for (std::size_t i = 0; i < n * d; ++i) {
                                                  g[s * n * d + i] += src[i];
                                              }
                                          }
                                          if (detail::wants(o, 1)) {
                                              auto g = detail::grad_of(o, 1);
                                              for (std::size_t i = 0; i < m * d; ++i) {
                                                  g[s * m * d + i] += src[n * d + i];
                                              }
                                          }
                                      }
                                  });
}

// Rows [start, start+count) of a [B, N, d] tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
    detail::require(x.rank() == 3 && start + count <= x.dim(1),
                    "slice_rows: bad range on " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), rows = x.dim(1), d = x.dim(2);
    std::vector<T> out(batch * count * d);
    for (std::size_t s = 0; s < batch; ++s) {
        std::copy_n(x.storage().begin() + (s * rows + start) * d, count * d,
                    out.begin() + s * count * d);
    }
    return Tensor<T>::make_result({batch, count, d}, std::move(out), {x},
                                  [batch, rows, d, start, count](Node<T>& o) {
                                      auto g = detail::grad_of(o, 0);
                                      for (std::size_t s = 0; s < batch; ++s) {
                                          for (std::size_t i = 0; i < count * d; ++i) {
                                              g[(s * rows + start) * d + i] +=
                                                  o.grad[s * count * d + i];
                                          }
                                      }
                                  });
}

// Concatenate along the last axis; all leading dimensions must agree.
template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
    detail::require(!parts.empty(), "concat_last: no inputs");
    Shape lead = parts[0].shape();
    lead.pop_back();
    const std::size_t rows = numel(lead);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape pl = p.shape();
        const std::size_t w = pl.back();
        pl.pop_back();
        detail::require(pl == lead, "concat_last: leading dims differ");
        widths.push_back(w);
        total += w;
    }
    std::vector<T> out(rows * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(parts[k].storage().begin() + r * widths[k], widths[k],
                        out.begin() + r * total + offset);
        }
        offset += widths[k];
    }
    Shape shape = lead;
    shape.push_back(total);
    return Tensor<T>::make_result(std::move(shape), std::move(out), parts,
                                  [rows, total, widths](Node<T>& o) {
                                      std::size_t off = 0;
                                      for (std::size_t k = 0; k < widths.size(); ++k) {
                                          if (detail::wants(o, k)) {
                                              auto g = detail::grad_of(o, k);
                                              for (std::size_t r = 0; r < rows; ++r) {
                                                  for (std::size_t i = 0; i < widths[k]; ++i) {
                                                      g[r * widths[k] + i] +=
                                                          o.grad[r * total + off + i];
                                                  }
                                              }
                                          }
                                          off += widths[k];
                                      }
                                  });
}

// [B, C] -> [B, C, H, W], each channel value broadcast over all positions.
template <typename T>
Tensor<T> tile_channels(const Tensor<T>& v, std::size_t height, std::size_t width) {
    detail::require(v.rank() == 2, "tile_channels: expected [B, C], got " + shape_str(v.shape()));
    const std::size_t batch = v.dim(0), ch = v.dim(1), hw = height * width;
    std::vector<T> out(batch * ch * hw);
    for (std::size_t i = 0; i < batch * ch; ++i) std::fill_n(out.begin() + i * hw, hw, v[i]);
    return Tensor<T>::make_result({batch, ch, height, width}, std::move(out), {v},
                                  [batch, ch, hw](Node<T>& o) {
                                      auto g = detail::grad_of(o, 0);
                                      for (std::size_t i = 0; i < batch * ch; ++i) {
                                          T acc = 0;
                                          for (std::size_t j = 0; j < hw; ++j) {
                                              acc += o.grad[i * hw + j];
                                          }
                                          g[i] += acc;
                                      }
                                  });
}

// [B, C, H, W] -> [B, n, C*P*P]. Patches run row-major over the grid; inside a
// patch values are channel-major, then row, then column.
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t patch) {
    detail::require(x.rank() == 4, "patchify: expected [B, C, H, W], got " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    detail::require(patch > 0 && h % patch == 0 && w % patch == 0,
                    "patchify: patch size " + std::to_string(patch) + " does not divide " +
                        std::to_string(h) + "x" + std::to_string(w));
    const std::size_t gh = h / patch, gw = w / patch, n = gh * gw, flat = ch * patch * patch;
    std::vector<std::size_t> src(batch * n * flat);
    for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t py = 0; py < gh; ++py) {
            for (std::size_t px = 0; px < gw; ++px) {
                std::size_t dst = (s * n + py * gw + px) * flat;
                for (std::size_t c = 0; c < ch; ++c) {
                    for (std::size_t r = 0; r < patch; ++r) {
                        for (std::size_t q = 0; q < patch; ++q) {
                            src[dst++] =
                                ((s * ch + c) * h + py * patch + r) * w + px * patch + q;
                        }
                    }
                }
            }
        }
    }
    std::vector<T> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = x[src[i]];
    return Tensor<T>::make_result({batch, n, flat}, std::move(out), {x},
                                  [src = std::move(src)](Node<T>& o) {
                                      auto g = detail::grad_of(o, 0);
                                      for (std::size_t i = 0; i < src.size(); ++i) {
                                          g[src[i]] += o.grad[i];
                                      }
                                  });
}

// ---------------------------------------------------------------------- linear

// y = x w (+ b) over the last axis of x. x: [..., in], w: [in, out], b: [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<std::type_identity_t<Tensor<T>>>& b) {
    detail::require(x.rank() >= 1 && w.rank() == 2 && x.shape().back() == w.dim(0),
                    "affine: inner dimensions disagree, x " + shape_str(x.shape()) + " w " +
                        shape_str(w.shape()));
    const std::size_t in = w.dim(0), out_dim = w.dim(1), rows = x.size() / in;
    if (b) {
        detail::require(b->rank() == 1 && b->dim(0) == out_dim,
                        "affine: bias " + shape_str(b->shape()) + " does not match out " +
                            std::to_string(out_dim));
    }
    std::vector<T> out(rows * out_dim);
    if (b) {
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy(b->storage().begin(), b->storage().end(), out.begin() + r * out_dim);
        }
    }
    detail::gemm_rows(rows, out_dim, in, x.data().data(), w.data().data(), out.data(), b.has_value());
    Shape shape = x.shape();
    shape.back() = out_dim;
    std::vector<Tensor<T>> parents{x, w};
    if (b) parents.push_back(*b);
    return Tensor<T>::make_result(std::move(shape), std::move(out), std::move(parents),
                                  [rows, in, out_dim](Node<T>& o) {
                                      const T* go = o.grad.data();
                                      if (detail::wants(o, 0)) {
                                          detail::gemm(false, true, rows, in, out_dim, go,
                                                       o.parents[1]->data.data(),
                                                       detail::grad_of(o, 0).data(), true);
                                      }
                                      if (detail::wants(o, 1)) {
                                          detail::gemm(true, false, in, out_dim, rows,
                                                       o.parents[0]->data.data(), go,
                                                       detail::grad_of(o, 1).data(), true);
                                      }
                                      if (o.parents.size() > 2 && detail::wants(o, 2)) {
                                          auto g = detail::grad_of(o, 2);
                                          for (std::size_t r = 0; r < rows; ++r) {
                                              for (std::size_t j = 0; j < out_dim; ++j) {
                                                  g[j] += go[r * out_dim + j];
                                              }
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return linear(x, w, std::optional<Tensor<T>>(b));
}

// Batched matmul: a [B, n, k] times b [B, k, m] (or b [B, m, k] transposed).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
    detail::require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
                    "bmm: expected matching [B, *, *] inputs");
    const std::size_t batch = a.dim(0), n = a.dim(1), k = a.dim(2);
    const std::size_t m = transpose_b ? b.dim(1) : b.dim(2);
    detail::require((transpose_b ? b.dim(2) : b.dim(1)) == k,
                    "bmm: inner dimensions disagree " + shape_str(a.shape()) + " " +
                        shape_str(b.shape()));
    std::vector<T> out(batch * n * m);
    for (std::size_t s = 0; s < batch; ++s) {
        detail::gemm(false, transpose_b, n, m, k, a.data().data() + s * n * k,
                     b.data().data() + s * k * m, out.data() + s * n * m, false);
    }
    return Tensor<T>::make_result(
        {batch, n, m}, std::move(out), {a, b}, [batch, n, m, k, transpose_b](Node<T>& o) {
            for (std::size_t s = 0; s < batch; ++s) {
                const T* go = o.grad.data() + s * n * m;
                const T* av = o.parents[0]->data.data() + s * n * k;
                const T* bv = o.parents[1]->data.data() + s * k * m;
                if (detail::wants(o, 0)) {
                    // dA = dC op(B)^T
                    detail::gemm(false, !transpose_b, n, k, m, go, bv,
                                 detail::grad_of(o, 0).data() + s * n * k, true);
                }
                if (detail::wants(o, 1)) {
                    T* gb = detail::grad_of(o, 1).data() + s * k * m;
                    if (transpose_b) {
                        detail::gemm(true, false, m, k, n, go, av, gb, true);  // dB = dC^T A
                    } else {
                        detail::gemm(true, false, k, m, n, av, go, gb, true);  // dB = A^T dC
                    }
                }
            }
        });
}

// ---------------------------------------------------------------- normalisers

// Max-shifted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    detail::require(axis < x.rank(), "softmax: axis out of range for " + shape_str(x.shape()));
    const std::size_t len = x.dim(axis);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t outer = x.size() / (len * inner);
    std::vector<T> out(x.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
            T z = 0;
            for (std::size_t j = 0; j < len; ++j) {
                out[base + j * inner] = std::exp(x[base + j * inner] - mx);
                z += out[base + j * inner];
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
        }
    }
    return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [outer, inner, len](Node<T>& o) {
        auto g = detail::grad_of(o, 0);
        for (std::size_t a = 0; a < outer; ++a) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = a * len * inner + in;
                T dot = 0;
                for (std::size_t j = 0; j < len; ++j) {
                    dot += o.grad[base + j * inner] * o.data[base + j * inner];
                }
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t i = base + j * inner;
                    g[i] += o.data[i] * (o.grad[i] - dot);
                }
            }
        }
    });
}

inline constexpr double kNormEpsilon = 1e-5;

// Normalises each vector along the last axis, then scales and shifts.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
    detail::require(x.rank() >= 1 && gamma.rank() == 1 && beta.rank() == 1 &&
                        gamma.dim(0) == x.shape().back() && beta.dim(0) == x.shape().back(),
                    "layer_norm: last dim of " + shape_str(x.shape()) + " does not match gamma " +
                        shape_str(gamma.shape()));
    const std::size_t d = gamma.dim(0), rows = x.size() / d;
    std::vector<T> xhat(x.size()), inv_std(rows), out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * d;
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(d);
        inv_std[r] = T(1) / std::sqrt(var + T(kNormEpsilon));
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xr[j] - mu) * inv_std[r];
            out[r * d + j] = gamma[j] * xhat[r * d + j] + beta[j];
        }
    }
    return Tensor<T>::make_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& o) {
            const auto& gm = o.parents[1]->data;
            if (detail::wants(o, 0)) {
                auto g = detail::grad_of(o, 0);
                for (std::size_t r = 0; r < rows; ++r) {
                    T m1 = 0, m2 = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dx = o.grad[r * d + j] * gm[j];
                        m1 += dx;
                        m2 += dx * xhat[r * d + j];
                    }
                    m1 /= static_cast<T>(d);
                    m2 /= static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dx = o.grad[r * d + j] * gm[j];
                        g[r * d + j] += inv_std[r] * (dx - m1 - xhat[r * d + j] * m2);
                    }
                }
            }
            if (detail::wants(o, 1)) {
                auto g = detail::grad_of(o, 1);
                for (std::size_t i = 0; i < rows * d; ++i) g[i % d] += o.grad[i] * xhat[i];
            }
            if (detail::wants(o, 2)) {
                auto g = detail::grad_of(o, 2);
                for (std::size_t i = 0; i < rows * d; ++i) g[i % d] += o.grad[i];
            }
        });
}

// Per-channel batch normalisation of [B, C, H, W]. In training mode the batch
// statistics are used and the running buffers updated in place; otherwise the
// running statistics are applied as a fixed affine map.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                       double momentum = 0.1) {
    detail::require(x.rank() == 4 && gamma.size() == x.dim(1) && beta.size() == x.dim(1) &&
                        running_mean.size() == x.dim(1) && running_var.size() == x.dim(1),
                    "batch_norm2d: channel mismatch on " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    const std::size_t count = batch * hw;
    std::vector<T> mu(ch), inv_std(ch);
    if (training) {
        for (std::size_t c = 0; c < ch; ++c) {
            T m = 0;
            for (std::size_t s = 0; s < batch; ++s) {
                for (std::size_t i = 0; i < hw; ++i) m += x[(s * ch + c) * hw + i];
            }
            m /= static_cast<T>(count);
            T v = 0;
            for (std::size_t s = 0; s < batch; ++s) {
                for (std::size_t i = 0; i < hw; ++i) {
                    const T dv = x[(s * ch + c) * hw + i] - m;
                    v += dv * dv;
                }
            }
            v /= static_cast<T>(count);
            mu[c] = m;
            inv_std[c] = T(1) / std::sqrt(v + T(kNormEpsilon));
            const T unbiased = count > 1 ? v * static_cast<T>(count) / static_cast<T>(count - 1) : v;
            running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] + momentum * m);
            running_var[c] = static_cast<T>((1 - momentum) * running_var[c] + momentum * unbiased);
        }
    } else {
        for (std::size_t c = 0; c < ch; ++c) {
            mu[c] = running_mean[c];
            inv_std[c] = T(1) / std::sqrt(running_var[c] + T(kNormEpsilon));
        }
    }
    std::vector<T> xhat(x.size()), out(x.size());
    for (std::size_t s = 0; s < batch; ++s) {
        for (std::size_t c = 0; c < ch; ++c) {
            for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t k = (s * ch + c) * hw + i;
                xhat[k] = (x[k] - mu[c]) * inv_std[c];
                out[k] = gamma[c] * xhat[k] + beta[c];
            }
        }
    }
    return Tensor<T>::make_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [batch, ch, hw, count, training, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](Node<T>& o) {
            const auto& gm = o.parents[1]->data;
            if (detail::wants(o, 0)) {
                auto g = detail::grad_of(o, 0);
                for (std::size_t c = 0; c < ch; ++c) {
                    T m1 = 0, m2 = 0;
                    if (training) {
                        for (std::size_t s = 0; s < batch; ++s) {
                            for (std::size_t i = 0; i < hw; ++i) {
                                const std::size_t k = (s * ch + c) * hw + i;
                                m1 += o.grad[k] * gm[c];
                                m2 += o.grad[k] * gm[c] * xhat[k];
                            }
                        }
                        m1 /= static_cast<T>(count);
                        m2 /= static_cast<T>(count);
                    }
                    for (std::size_t s = 0; s < batch; ++s) {
                        for (std::size_t i = 0; i < hw; ++i) {
                            const std::size_t k = (s * ch + c) * hw + i;
                            g[k] += inv_std[c] * (o.grad[k] * gm[c] - m1 - xhat[k] * m2);
                        }
                    }
                }
            }
            for (std::size_t p = 1; p <= 2; ++p) {
                if (!detail::wants(o, p)) continue;
                auto g = detail::grad_of(o, p);
                for (std::size_t s = 0; s < batch; ++s) {
                    for (std::size_t c = 0; c < ch; ++c) {
                        for (std::size_t i = 0; i < hw; ++i) {
                            const std::size_t k = (s * ch + c) * hw + i;
                            g[c] += p == 1 ? o.grad[k] * xhat[k] : o.grad[k];
                        }
                    }
                }
            }
        });
}

// ------------------------------------------------------------ spatial layers

struct ConvGeometry {
    std::size_t out_h = 0;
    std::size_t out_w = 0;
    std::size_t pad = 0;
};

inline ConvGeometry conv_geometry(std::size_t h, std::size_t w, std::size_t k, Padding padding,
                                  std::size_t dilation) {
    if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(k));
    const std::size_t span = dilation * (k - 1) + 1;
    if (padding == Padding::same) return {h, w, dilation * (k - 1) / 2};
    if (h < span || w < span) {
        throw ShapeError("conv2d: input " + std::to_string(h) + "x" + std::to_string(w) +
                         " smaller than kernel span " + std::to_string(span));
    }
    return {h - span + 1, w - span + 1, 0};
}

// 2-D cross-correlation. x: [B, C, H, W], w: [F, C, k, k], b: [F].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<std::type_identity_t<Tensor<T>>>& b,
                 Padding padding, std::size_t dilation = 1) {
    detail::require(x.rank() == 4 && w.rank() == 4 && w.dim(2) == w.dim(3),
                    "conv2d: expected x [B,C,H,W] and w [F,C,k,k], got " + shape_str(x.shape()) +
                        " and " + shape_str(w.shape()));
    detail::require(x.dim(1) == w.dim(1), "conv2d: channel mismatch, input has " +
                                              std::to_string(x.dim(1)) + ", filters expect " +
                                              std::to_string(w.dim(1)));
    if (b) detail::require(b->size() == w.dim(0), "conv2d: bias length mismatch");
    const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t filters = w.dim(0), k = w.dim(2);
    const ConvGeometry geo = conv_geometry(h, wd, k, padding, dilation);
    const std::size_t ho = geo.out_h, wo = geo.out_w, ckk = ch * k * k, plane = ho * wo;

    // im2col: cols[s] is [C*k*k, Ho*Wo]; -1 marks padding.
    std::vector<std::ptrdiff_t> index(ckk * plane);
    for (std::size_t c = 0; c < ch; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const std::size_t row = (c * k + ky) * k + kx;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy + ky * dilation) -
                                        static_cast<std::ptrdiff_t>(geo.pad);
                        const auto ix = static_cast<std::ptrdiff_t>(ox + kx * dilation) -
                                        static_cast<std::ptrdiff_t>(geo.pad);
                        const bool inside = iy >= 0 && ix >= 0 &&
                                            iy < static_cast<std::ptrdiff_t>(h) &&
                                            ix < static_cast<std::ptrdiff_t>(wd);
                        index[row * plane + oy * wo + ox] =
                            inside ? static_cast<std::ptrdiff_t>((c * h + iy) * wd + ix) : -1;
                    }
                }
            }
        }
    }
    const std::size_t in_plane = ch * h * wd;
    std::vector<T> cols(batch * ckk * plane);
    for (std::size_t s = 0; s < batch; ++s) {
        const T* xs = x.data().data() + s * in_plane;
        T* cs = cols.data() + s * ckk * plane;
        for (std::size_t i = 0; i < ckk * plane; ++i) cs[i] = index[i] >= 0 ? xs[index[i]] : T(0);
    }
    std::vector<T> out(batch * filters * plane);
    for (std::size_t s = 0; s < batch; ++s) {
        T* os = out.data() + s * filters * plane;
        if (b) {
            for (std::size_t f = 0; f < filters; ++f) std::fill_n(os + f * plane, plane, (*b)[f]);
        }
        detail::gemm(false, false, filters, plane, ckk, w.data().data(),
                     cols.data() + s * ckk * plane, os, b.has_value());
    }
    std::vector<Tensor<T>> parents{x, w};
    if (b) parents.push_back(*b);
    return Tensor<T>::make_result(
        {batch, filters, ho, wo}, std::move(out), std::move(parents),
        [batch, filters, plane, ckk, in_plane, index = std::move(index),
         cols = std::move(cols)](Node<T>& o) {
            std::vector<T> dcols(ckk * plane);
            for (std::size_t s = 0; s < batch; ++s) {
                const T* go = o.grad.data() + s * filters * plane;
                if (detail::wants(o, 1)) {
                    detail::gemm(false, true, filters, ckk, plane, go,
                                 cols.data() + s * ckk * plane, detail::grad_of(o, 1).data(),
                                 true);
                }
                if (detail::wants(o, 0)) {
                    detail::gemm(true, false, ckk, plane, filters, o.parents[1]->data.data(), go,
                                 dcols.data(), false);
                    T* gx = detail::grad_of(o, 0).data() + s * in_plane;
                    for (std::size_t i = 0; i < ckk * plane; ++i) {
                        if (index[i] >= 0) gx[index[i]] += dcols[i];
                    }
                }
                if (o.parents.size() > 2 && detail::wants(o, 2)) {
                    auto gb = detail::grad_of(o, 2);
                    for (std::size_t f = 0; f < filters; ++f) {
                        T acc = 0;
                        for (std::size_t i = 0; i < plane; ++i) acc += go[f * plane + i];
                        gb[f] += acc;
                    }
                }
            }
        });
}

// Non-overlapping s x s max pooling. H and W must be divisible by s. The
// gradient goes to the window's first maximum in row-major order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t s) {
    detail::require(x.rank() == 4, "maxpool2d: expected [B, C, H, W], got " + shape_str(x.shape()));
    const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    detail::require(s > 0 && h % s == 0 && w % s == 0,
                    "maxpool2d: pool " + std::to_string(s) + " does not divide " +
                        std::to_string(h) + "x" + std::to_string(w));
    const std::size_t ho = h / s, wo = w / s;
    std::vector<T> out(bc * ho * wo);
    std::vector<std::size_t> arg(out.size());
    for (std::size_t p = 0; p < bc; ++p) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                std::size_t best = (p * h + oy * s) * w + ox * s;
                for (std::size_t dy = 0; dy < s; ++dy) {
                    for (std::size_t dx = 0; dx < s; ++dx) {
                        const std::size_t i = (p * h + oy * s + dy) * w + ox * s + dx;
                        if (x[i] > x[best]) best = i;
                    }
                }
                const std::size_t o = (p * ho + oy) * wo + ox;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    return Tensor<T>::make_result({x.dim(0), x.dim(1), ho, wo}, std::move(out), {x},
                                  [arg = std::move(arg)](Node<T>& o) {
                                      auto g = detail::grad_of(o, 0);
                                      for (std::size_t i = 0; i < arg.size(); ++i) {
                                          g[arg[i]] += o.grad[i];
                                      }
                                  });
}

// [B, C, H, W] -> [B, C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::require(x.rank() == 4, "global_avg_pool: expected [B, C, H, W], got " +
                                       shape_str(x.shape()));
    const std::size_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(bc);
    for (std::size_t p = 0; p < bc; ++p) {
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += x[p * hw + i];
        out[p] = acc / static_cast<T>(hw);
    }
    return Tensor<T>::make_result({x.dim(0), x.dim(1)}, std::move(out), {x}, [bc, hw](Node<T>& o) {
        auto g = detail::grad_of(o, 0);
        for (std::size_t p = 0; p < bc; ++p) {
            const T gi = o.grad[p] / static_cast<T>(hw);
            for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += gi;
        }
    });
}

}  // namespace slvit
