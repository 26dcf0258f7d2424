#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "lefm/error.hpp"

namespace lefm::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i)
        s += (i ? "x" : "") + std::to_string(shape[i]);
    return s + "]";
}

namespace detail {
inline bool& grad_mode_flag()
{
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

/// Disables graph recording for its lifetime (inference, evaluation).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Dense n-d array with an optional gradient and the backward closure of the
/// op that produced it. Copies share storage, like a handle.
template <std::floating_point T>
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;
    };

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false)
    {
        const std::size_t n = shape_numel(shape);
        return from_values(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false)
    {
        if (values.size() != shape_numel(shape))
            throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + shape_string(shape));
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<T> values() { return node_->value; }
    std::span<const T> values() const { return node_->value; }
    T item() const { return node_->value.at(0); }

    /// Gradient buffer, allocated (zero-filled) on first access.
    std::span<T> grad()
    {
        ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    /// Copy of the values without graph history.
    Tensor detach() const { return from_values(shape(), node_->value, false); }

    Node& node() { return *node_; }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    void ensure_grad()
    {
        if (node_->grad.size() != node_->value.size())
            node_->grad.assign(node_->value.size(), T(0));
    }

    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

/// Creates an op output. The graph edge is recorded only when grad mode is on
/// and some input requires a gradient.
template <std::floating_point T>
Tensor<T> make_result(Shape shape, std::initializer_list<const Tensor<T>*> inputs)
{
    auto out = Tensor<T>::zeros(std::move(shape));
    if (!grad_enabled())
        return out;
    bool needs = false;
    for (const auto* in : inputs)
        needs = needs || in->requires_grad();
    if (needs) {
        out.node().requires_grad = true;
        for (const auto* in : inputs)
            if (in->requires_grad())
                out.node().parents.push_back(in->node_ptr());
    }
    return out;
}

template <std::floating_point T>
void check_finite(const Tensor<T>& t, const char* op)
{
    for (T v : t.values())
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + ": non-finite value in output");
}

/// Gradient buffer of a parent node, allocated on demand.
template <std::floating_point T>
std::span<T> grad_of(typename Tensor<T>::Node& n)
{
    if (n.grad.size() != n.value.size())
        n.grad.assign(n.value.size(), T(0));
    return n.grad;
}

} // namespace detail

/// Reverse-mode sweep from a scalar output.
template <std::floating_point T>
void backward(Tensor<T>& loss)
{
    using Node = typename Tensor<T>::Node;
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
    if (!loss.requires_grad())
        return;

    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{&loss.node(), 0}};
    visited.insert(&loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (visited.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.ensure_grad();
    loss.grad()[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward) {
            if (node->grad.size() != node->value.size())
                node->grad.assign(node->value.size(), T(0));
            node->backward(*node);
        }
    }
}

} // namespace lefm::nn
