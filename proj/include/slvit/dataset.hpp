#pragma once

// In-memory datasets: model inputs plus either class labels or scalar counts.

#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "slvit/backbone.hpp"

namespace slvit {

template <typename T>
struct Dataset {
    ModelInput<T> inputs;
    std::vector<int> labels;      // classification
    std::vector<double> counts;   // counting
    std::string provenance;

    std::size_t size() const { return inputs.image.rank() == 0 ? 0 : inputs.image.dim(0); }
    bool is_classification() const { return !labels.empty(); }

    void validate() const {
        const std::size_t n = size();
        if (n == 0 && labels.empty() && counts.empty()) return;
        if (labels.empty() == counts.empty()) {
            throw std::invalid_argument("dataset: exactly one of labels or counts must be present");
        }
        if ((is_classification() ? labels.size() : counts.size()) != n) {
            throw std::invalid_argument("dataset: target count does not match sample count");
        }
        if (inputs.audio && inputs.audio->dim(0) != n) {
            throw std::invalid_argument("dataset: audio sample count does not match images");
        }
    }
};

template <typename T, typename V>
std::vector<V> gather_values(const std::vector<V>& v, std::span<const std::size_t> rows) {
    std::vector<V> out;
    if (v.empty()) return out;
    out.reserve(rows.size());
    for (std::size_t r : rows) out.push_back(v.at(r));
    return out;
}

template <typename T>
Dataset<T> subset(const Dataset<T>& ds, std::span<const std::size_t> rows) {
    return {gather(ds.inputs, rows), gather_values<T>(ds.labels, rows), gather_values<T>(ds.counts, rows),
            ds.provenance};
}

// Stacks tensors along axis 0 (no gradient tracking).
template <typename T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_batch: nothing to stack");
    Shape shape = parts.front().shape();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        Shape tail(p.shape().begin() + 1, p.shape().end());
        if (!std::equal(tail.begin(), tail.end(), shape.begin() + 1, shape.end()) || p.rank() != shape.size()) {
            throw ShapeError("concat_batch: trailing shapes differ");
        }
        rows += p.dim(0);
    }
    shape[0] = rows;
    std::vector<T> data;
    data.reserve(numel(shape));
    for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
    return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
Dataset<T> concat_datasets(const Dataset<T>& a, const Dataset<T>& b) {
    if (b.size() == 0) return a;
    if (a.size() == 0) return b;
    if (a.is_classification() != b.is_classification() || a.inputs.audio.has_value() != b.inputs.audio.has_value()) {
        throw std::invalid_argument("concat_datasets: incompatible datasets");
    }
    Dataset<T> out;
    out.inputs.image = concat_batch<T>({a.inputs.image, b.inputs.image});
    if (a.inputs.audio) out.inputs.audio = concat_batch<T>({*a.inputs.audio, *b.inputs.audio});
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.counts = a.counts;
    out.counts.insert(out.counts.end(), b.counts.begin(), b.counts.end());
    out.provenance = a.provenance + "+" + b.provenance;
    return out;
}

}  // namespace slvit
