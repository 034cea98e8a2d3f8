#pragma once

// Dense row-major arrays with an optional reverse-mode gradient tape.
//
// A Tensor<T> is a shared handle onto a graph node. Operations in ops.hpp
// create new nodes that remember their parents and a closure which pushes the
// node's gradient back into them. Calling backward() on a scalar walks the
// graph in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace slvit {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

template <typename T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) {
        return DType::f32;
    } else if constexpr (std::is_same_v<T, double>) {
        return DType::f64;
    } else {
        static_assert(std::is_same_v<T, std::uint8_t>, "unsupported element type");
        return DType::u8;
    }
}

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool prev_;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;

    std::span<T> grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor holds float or double");

   public:
    using value_type = T;

    Tensor() : node_(std::make_shared<Node<T>>()) {}

    explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
        node_->data.assign(numel(shape), fill);
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<Node<T>>()) {
        if (data.size() != numel(shape)) {
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }
    static Tensor from(Shape shape, std::initializer_list<T> values) {
        return Tensor(std::move(shape), std::vector<T>(values));
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const {
        if (i >= rank()) throw ShapeError("dim index out of range for " + shape_str(shape()));
        return node_->shape[i];
    }
    std::size_t size() const { return node_->data.size(); }
    static constexpr DType dtype() { return dtype_of<T>(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T>& storage() { return node_->data; }
    const std::vector<T>& storage() const { return node_->data; }
    T& operator[](std::size_t i) { return node_->data[i]; }
    T operator[](std::size_t i) const { return node_->data[i]; }
    T item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        return *this;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    // Deep copy of the values, detached from any graph.
    Tensor clone() const {
        Tensor out(shape(), node_->data);
        out.node_->requires_grad = node_->requires_grad;
        return out;
    }
    Tensor detach() const { return Tensor(shape(), node_->data); }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }
    Node<T>& node() const { return *node_; }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

    // Reverse-mode sweep from this scalar.
    void backward() {
        if (size() != 1) {
            throw ShapeError("backward() needs a scalar, got " + shape_str(shape()));
        }
        node_->grad_buffer()[0] += T(1);
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node<T>* p = n->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backward_fn && !n->grad.empty()) n->backward_fn();
        }
    }

    // Builds the output node of an operation. The closure receives the output
    // node and must accumulate into the parents' grad buffers.
    template <typename Fn>
    static Tensor make_result(Shape shape, std::vector<T> data, std::vector<Tensor> parents,
                              Fn&& backward) {
        Tensor out(std::move(shape), std::move(data));
        if (!grad_enabled()) return out;
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (!any) return out;
        Node<T>* self = out.node_.get();
        self->requires_grad = true;
        for (auto& p : parents) self->parents.push_back(p.node_);
        self->backward_fn = [self, fn = std::forward<Fn>(backward)]() { fn(*self); };
        return out;
    }

   private:
    std::shared_ptr<Node<T>> node_;
};

}  // namespace slvit
