#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>

#include "slvit/random.hpp"
#include "slvit/tensor.hpp"

namespace slvit {

template <typename T>
struct ParamEntry {
    Tensor<T> value;
    bool trainable = true;
    // Buffers (batch-norm running statistics) are persisted and hashed but
    // never optimised or counted as parameters.
    bool buffer = false;
};

// Named parameters keyed by dot-separated path, iterated in path order.
template <typename T>
class ParamSet {
   public:
    using Entries = std::map<std::string, ParamEntry<T>>;

    Tensor<T>& add(const std::string& path, Tensor<T> value, bool trainable = true) {
        return insert(path, ParamEntry<T>{std::move(value), trainable, false});
    }

    Tensor<T>& add_buffer(const std::string& path, Tensor<T> value) {
        return insert(path, ParamEntry<T>{std::move(value), false, true});
    }

    bool contains(const std::string& path) const { return entries_.count(path) != 0; }

    Tensor<T>& at(const std::string& path) { return entry(path).value; }
    const Tensor<T>& at(const std::string& path) const {
        auto it = entries_.find(path);
        if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + path + "'");
        return it->second.value;
    }

    ParamEntry<T>& entry(const std::string& path) {
        auto it = entries_.find(path);
        if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + path + "'");
        return it->second;
    }

    const Entries& entries() const { return entries_; }
    Entries& entries() { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    void set_trainable(bool on) {
        for (auto& [path, e] : entries_) {
            if (!e.buffer) e.trainable = on;
        }
    }

    // Gradients are only tracked for trainable entries.
    void prepare_for_training() {
        for (auto& [path, e] : entries_) e.value.set_requires_grad(e.trainable && !e.buffer);
    }
    void release_grad() {
        for (auto& [path, e] : entries_) e.value.set_requires_grad(false);
    }

    void zero_grad() {
        for (auto& [path, e] : entries_) e.value.zero_grad();
    }

    // Number of scalar parameters, buffers excluded.
    std::uint64_t count() const {
        std::uint64_t n = 0;
        for (const auto& [path, e] : entries_) {
            if (!e.buffer) n += e.value.size();
        }
        return n;
    }

    // Deep copy; the result shares no storage with this set.
    ParamSet clone() const {
        ParamSet out;
        for (const auto& [path, e] : entries_) {
            out.entries_.emplace(path, ParamEntry<T>{e.value.detach(), e.trainable, e.buffer});
        }
        return out;
    }

    // Overwrites values in place from a set with identical paths and shapes.
    void assign_values(const ParamSet& src) {
        if (src.entries_.size() != entries_.size()) {
            throw std::invalid_argument("assign_values: parameter sets differ in size");
        }
        for (auto& [path, e] : entries_) {
            const Tensor<T>& v = src.at(path);
            if (v.shape() != e.value.shape()) {
                throw ShapeError("assign_values: shape mismatch at '" + path + "'");
            }
            std::copy(v.data().begin(), v.data().end(), e.value.data().begin());
        }
    }

    // FNV-1a over paths, shapes and raw value bytes.
    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&h](const void* p, std::size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 0x100000001b3ULL;
            }
        };
        for (const auto& [path, e] : entries_) {
            feed(path.data(), path.size());
            for (std::size_t d : e.value.shape()) {
                const auto d64 = static_cast<std::uint64_t>(d);
                feed(&d64, sizeof d64);
            }
            feed(e.value.data().data(), e.value.size() * sizeof(T));
        }
        return h;
    }

   private:
    Tensor<T>& insert(const std::string& path, ParamEntry<T> e) {
        auto [it, fresh] = entries_.emplace(path, std::move(e));
        if (!fresh) throw std::invalid_argument("duplicate parameter path '" + path + "'");
        return it->second.value;
    }

    Entries entries_;
};

// ------------------------------------------------------------ initialisation

template <typename T>
Tensor<T> init_fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

template <typename T>
Tensor<T> init_truncated_normal(Shape shape, double sigma, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(sigma));
    return t;
}

inline constexpr double kTransformerInitStd = 0.02;

}  // namespace slvit
