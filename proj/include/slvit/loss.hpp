#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "slvit/ops.hpp"

namespace slvit {

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const int> labels) {
    detail::require(logits.rank() == 2 && logits.dim(0) == labels.size(),
                    "cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                        std::to_string(labels.size()) + " labels");
    const std::size_t batch = logits.dim(0), k = logits.dim(1);
    std::vector<T> probs(batch * k);
    T total = 0;
    for (std::size_t s = 0; s < batch; ++s) {
        const int y = labels[s];
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(y) +
                                    " outside [0, " + std::to_string(k) + ")");
        }
        const T* row = logits.data().data() + s * k;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, row[j]);
        T z = 0;
        for (std::size_t j = 0; j < k; ++j) {
            probs[s * k + j] = std::exp(row[j] - mx);
            z += probs[s * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) probs[s * k + j] /= z;
        total += -(row[y] - mx - std::log(z));
    }
    std::vector<int> ys(labels.begin(), labels.end());
    return Tensor<T>::make_result(
        {1}, {total / static_cast<T>(batch)}, {logits},
        [batch, k, probs = std::move(probs), ys = std::move(ys)](Node<T>& o) {
            auto g = detail::grad_of(o, 0);
            const T coef = o.grad[0] / static_cast<T>(batch);
            for (std::size_t s = 0; s < batch; ++s) {
                for (std::size_t j = 0; j < k; ++j) {
                    const T onehot = static_cast<int>(j) == ys[s] ? T(1) : T(0);
                    g[s * k + j] += coef * (probs[s * k + j] - onehot);
                }
            }
        });
}

// Mean absolute difference; the subgradient at exact equality is 0.
template <typename T>
Tensor<T> mae_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    detail::require(pred.size() == target.size(),
                    "mae: prediction " + shape_str(pred.shape()) + " vs target " +
                        shape_str(target.shape()));
    const std::size_t n = pred.size();
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) total += std::abs(pred[i] - target[i]);
    return Tensor<T>::make_result({1}, {total / static_cast<T>(n)}, {pred, target},
                                  [n](Node<T>& o) {
                                      const auto& p = o.parents[0]->data;
                                      const auto& t = o.parents[1]->data;
                                      const T coef = o.grad[0] / static_cast<T>(n);
                                      for (std::size_t side = 0; side < 2; ++side) {
                                          if (!detail::wants(o, side)) continue;
                                          auto g = detail::grad_of(o, side);
                                          for (std::size_t i = 0; i < n; ++i) {
                                              const T d = p[i] - t[i];
                                              const T sgn = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
                                              g[i] += (side == 0 ? coef : -coef) * sgn;
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    detail::require(pred.size() == target.size(),
                    "mse: prediction " + shape_str(pred.shape()) + " vs target " +
                        shape_str(target.shape()));
    const Tensor<T> p = pred.rank() == target.rank() && pred.shape() == target.shape()
                            ? pred
                            : reshape(pred, target.shape());
    const Tensor<T> d = sub(p, target);
    return mean(mul(d, d));
}

}  // namespace slvit
